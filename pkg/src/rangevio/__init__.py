"""Range-visual-inertial odometry: ranged-facet EKF, simulator, observability lab."""

__version__ = "0.1.0"
