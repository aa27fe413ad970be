"""Middleware modules for rotset."""
