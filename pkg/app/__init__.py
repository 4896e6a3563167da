"""
AF-RPN Application Package.

Command-line entry point (app.main) for dataset synthesis, training,
proposal extraction, detection and evaluation.
"""

__version__ = "0.1.0"
