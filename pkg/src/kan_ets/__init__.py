"""Ehrenfest-penalized Kolmogorov-Arnold networks for driven spin-chain time series.

Modules:

* :mod:`kan_ets.spin_dynamics` -- exact driven transverse-field Ising chain simulator
* :mod:`kan_ets.datasets` -- dataset recipes, scaling, splits, persistence
* :mod:`kan_ets.kan` -- spline and wavelet KAN layers with analytic gradients
* :mod:`kan_ets.chain_kan` -- causal chain of per-time-step KANs
* :mod:`kan_ets.training` -- Ehrenfest-penalized loss, Adam, training loop
* :mod:`kan_ets.evaluation` -- R² reports and the partition-stability protocol
* :mod:`kan_ets.cli` -- command-line entry point
"""

__version__ = "0.1.0"
