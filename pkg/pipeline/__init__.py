"""
Pipeline Package.

This package sits above the library modules: a loaded two-stage
detector, and the dataset-level jobs (synthesis, label dumps,
training runs, proposal/detection runs, evaluation joins) the
command line drives.
"""
