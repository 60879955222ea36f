"""Wind-adaptive quadrotor control with a physics-informed learned dynamics model.

Modules
-------
dynamics      quaternion rigid-body model, wind drag plant, RK4 integration
trajectories  reference trajectories (five training kinds, two unseen kinds)
mpc           multiple-shooting SQP model predictive controller
data          flight-data collection, windowing, normalization, dataset files
net           TCN / MLP approximators with hand-written reverse mode
train         supervised + physics-informed training with collocation
adapter       history-window disturbance estimate and corrected dynamics
bench         experiment matrix and reports
config, cli   run configuration and the ``piwan`` command
"""

__version__ = "0.1.0"
