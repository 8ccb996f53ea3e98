"""Group-relative and causally weighted policy optimisation at desk scale."""

__version__ = "0.1.0"
