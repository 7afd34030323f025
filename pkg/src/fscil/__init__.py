"""Few-shot class-incremental learning with a three-way weight-space head ensemble."""

__version__ = "0.1.0"
