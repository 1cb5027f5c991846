"""Continuous-time LiDAR-inertial odometry library.

Estimation runs on a uniform cumulative B-spline over SO(3) x R^9 knots
(pose plus IMU biases). IMU data contributes different factor types per
motion segment (raw-rate, pre-integrated, or gravity-alignment factors),
LiDAR scans contribute point-to-plane factors whose correspondences are
selected by a min-eigenvalue optimality criterion, and a sliding-window
damped Gauss-Newton solver with marginalization ties it together.
"""

__version__ = "0.1.0"
