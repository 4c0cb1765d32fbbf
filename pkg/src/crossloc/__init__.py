"""Visual-inertial localization against a prior laser map.

Subpackages split along the processing pipeline: Lie-group math and IMU
preintegration feed the residual/solver stack; the simulator produces
multi-session sensor data; the map pipeline distills a stable localization
map from it; the estimator runs sliding-window localization against that
map; the evaluation layer computes trajectory-error metrics.
"""

__version__ = "0.1.0"
