"""
Recurring vulnerability management engine.
This package builds a vulnerability knowledge base from disclosed CVEs, screens a
target C repository for recurrences, confirms, repairs and validates them.
"""

__version__ = '1.0.0'
