"""rotset test suite."""
