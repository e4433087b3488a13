"""Below-horizon aircraft detection: pixel segmentation plus a persistence tracker."""

__version__ = "0.1.0"
