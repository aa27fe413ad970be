"""Shared utility modules for rotset."""
