"""Test suite for egcbf."""
