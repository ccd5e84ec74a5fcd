"""This package contains unit tests for the project."""
