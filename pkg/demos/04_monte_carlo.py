"""Sampling the basin of attraction.

A 100-run version of the 500-run check: initial errors up to pi - 0.2 rad and
0.1 rad/s, noise-free.  Then the same template with noisy sensors, where the
error settles to a small noise floor instead of zero.
"""

from dataclasses import replace
from pathlib import Path

import numpy as np

from attikit import config, sim
from attikit.sensors import GyroModel, ObservationModel

cfg = config.load(Path(__file__).parent / "configs" / "montecarlo.json")
sc = config.scenario(cfg)
_, sampler, bias_tol = config.montecarlo_settings(cfg)

summary = sim.monte_carlo(sc, 100, sampler, bias_tol=bias_tol)
med, p95 = summary.settling_stats()
print(f"noise-free: {summary.n_runs} runs, converged fraction {summary.convergence_fraction:.3f}")
print(f"  settling time median {med:.1f} s, 95th percentile {p95:.1f} s")
print(f"  largest initial angle {summary.initial_angle.max():.3f} rad")

noisy_model = ObservationModel(sc.model.vectors, sc.model.weights, np.array([0.02, 0.05]))
noisy = replace(sc, model=noisy_model, gyro=GyroModel(0.01, 0.0), simulate_noise=True, duration=100.0)
summary = sim.monte_carlo(noisy, 20, sim.InitialErrorSampler((0.0, 1.0), 0.02), bias_tol=bias_tol)
print("\nnoisy sensors, 20 runs")
print(f"  median steady-state error angle {np.median(summary.steady_angle):.2e} rad")
print(f"  spread over runs {summary.steady_angle.min():.2e} to {summary.steady_angle.max():.2e} rad")
