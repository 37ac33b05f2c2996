"""Sparse stochastic predictive control for linear plants driven over a lossy
actuation channel.

The package is organised around the pipeline of a receding-horizon run:

- :mod:`netspc.plant` -- plant data, lossless/stable spectral split, reachability
- :mod:`netspc.stochastics` -- noise, saturation and dropout-channel models
- :mod:`netspc.policy` -- affine dropout / saturated-noise feedback policies
- :mod:`netspc.protocol` -- transmission protocols and actuator emulation
- :mod:`netspc.moments` -- lifted horizon matrices and Monte Carlo moments
- :mod:`netspc.ocp` -- quadratic-program assembly and solution
- :mod:`netspc.sim` -- closed-loop simulation, metrics, baselines
- :mod:`netspc.cli` -- scenario runner (``netspc moments|run|report``)
"""

__version__ = "0.1.0"
