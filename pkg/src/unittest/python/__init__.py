"""
Unit tests for the recurring vulnerability manager.
"""
