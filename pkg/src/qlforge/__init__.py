"""qlforge: pipeline for mining taint specifications from a codebase and
forging static-analysis query rules out of them."""

__version__ = "0.1.0"
