"""
AF-RPN Test Suite.

Unit tests for the AF-RPN toolkit using pytest.
"""
