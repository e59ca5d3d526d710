"""emslab: energy management for a parallel plug-in hybrid.

Modules: :mod:`powertrain` (plant model), :mod:`trip` (drive cycles and
features), :mod:`dp` (backward dynamic programming), :mod:`learn` (value
function regression), :mod:`mpc` (on-board controller), :mod:`baselines`
(CD-CS and A-ECMS), :mod:`sim` (closed loop and comparison) and :mod:`cli`.
"""

__version__ = "0.1.0"
