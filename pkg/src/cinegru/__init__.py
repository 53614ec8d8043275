"""Frame-pair vs. spatio-temporal classifiers for sliding-motion cine series, on numpy."""

__version__ = "0.1.0"
