"""Plane-feature LiDAR-inertial-camera odometry toolkit."""

__version__ = "0.1.0"
