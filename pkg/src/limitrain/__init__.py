"""Neural imitators and controllers for plants with internal limiters."""

__version__ = "0.1.0"
