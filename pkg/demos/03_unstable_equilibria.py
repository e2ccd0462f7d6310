"""The four equilibria of the attitude error and what happens near them.

The identity is stable; the three half turns about the eigenvectors of M are
not.  The linearization shows it, and a run started 1e-4 rad from the first
half turn drifts away and then settles at the identity.
"""

from pathlib import Path

import numpy as np

from attikit import config, sim
from attikit import stability as stab
from attikit.so3 import exp_map, rotation_angle

cfg = config.load(Path(__file__).parent / "configs" / "montecarlo.json")
sc = config.scenario(cfg)
eq = stab.equilibria(sc.model)
k_p, k_i = sc.filter.gains.k_p(0.0), sc.filter.gains.k_i(0.0)

print("eigenvalues of M:", np.round(eq.lam, 4))
for i in range(4):
    a6 = stab.linearized_system(sc.model, (k_p, k_i), np.zeros(3), i)
    re = np.linalg.eigvals(a6).real
    print(f"equilibrium {i}: angle {rotation_angle(eq.c_star[i]):.4f} rad, largest real part {re.max():+.4f}")

star = eq.c_star[1]
c_tilde0 = (star @ exp_map(1e-4 * np.array([0.6, 0.0, 0.8])))[None]
_, states = sim.simulate_batch(sc, c_tilde0, np.zeros((1, 3)), keep_states=True)
inertial = states["c_true"][:, 0] @ np.swapaxes(states["c_hat"][:, 0], -1, -2)
dist = rotation_angle(star.T @ inertial)
to_identity = rotation_angle(inertial)
print("\nrun started 1e-4 rad from equilibrium 1")
print(f"{'t [s]':>6} {'from eq. 1':>11} {'from identity':>14}")
for t in (0, 10, 20, 30, 40, 50, 60, 80, 120, 200):
    k = int(round(t / sc.dt))
    print(f"{t:6.0f} {dist[k]:11.3e} {to_identity[k]:14.3e}")
