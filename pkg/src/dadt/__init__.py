"""Domain adaptive distill-tuning for LiDAR BEV detectors, at desk scale."""

__version__ = "0.1.0"
