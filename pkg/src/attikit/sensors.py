"""Rate-gyro and vector-observation measurement models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEigenvalues, DegenerateVector

NOISE_ALGORITHM = f"numpy-{np.__version__}/PCG64/standard_normal-ziggurat"

_BUFFER = 4096


@dataclass(frozen=True)
class ObservationModel:
    """Inertial reference directions with correction weights and noise levels.

    ``vectors`` is ``(n, 3)`` of unit vectors, ``weights`` the ``k_n > 0`` used by
    the complementary filters and ``sigmas`` the measurement noise standard
    deviations (also the MEKF weighting through ``1 / sigma**2``).
    """

    vectors: np.ndarray
    weights: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        k = np.atleast_1d(np.asarray(self.weights, dtype=float))
        s = np.atleast_1d(np.asarray(self.sigmas, dtype=float))
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise ValueError("vectors must have shape (n, 3) with n >= 1")
        n = v.shape[0]
        if k.shape != (n,) or s.shape != (n,):
            raise ValueError("weights and sigmas need one entry per vector")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(k)) and np.all(np.isfinite(s))):
            raise ValueError("observation model entries must be finite")
        bad = np.abs(np.linalg.norm(v, axis=1) - 1.0) > 1e-12
        if np.any(bad):
            raise ValueError(f"reference vector {int(np.argmax(bad))} is not unit length")
        if np.any(k <= 0):
            raise ValueError(f"weight {int(np.argmax(k <= 0))} must be positive")
        if np.any(s < 0):
            raise ValueError(f"sigma {int(np.argmax(s < 0))} must be nonnegative")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "weights", k)
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def from_directions(cls, vectors, weights=None, sigmas=None):
        """Build a model, normalizing the directions to unit length."""
        v = np.atleast_2d(np.asarray(vectors, dtype=float))
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        n = v.shape[0]
        k = np.ones(n) if weights is None else np.broadcast_to(np.asarray(weights, float), (n,))
        s = np.zeros(n) if sigmas is None else np.broadcast_to(np.asarray(sigmas, float), (n,))
        return cls(v, np.array(k), np.array(s))

    @classmethod
    def mekf_weighted(cls, vectors, sigmas):
        """Model whose weights are the inverse variances ``sigma**-2``."""
        s = np.atleast_1d(np.asarray(sigmas, dtype=float))
        return cls.from_directions(vectors, weights=inverse_variance(s), sigmas=s)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def m_inertial(self):
        return np.einsum("n,ni,nj->ij", self.weights, self.vectors, self.vectors)

    @property
    def inverse_variances(self):
        return inverse_variance(self.sigmas)

    def require_observable(self):
        """Raise unless at least two directions are non-parallel (angle > 1e-3 rad)."""
        v = self.vectors
        for i in range(len(v)):
            for j in range(i + 1, len(v)):
                if np.linalg.norm(np.cross(v[i], v[j])) > np.sin(1e-3):
                    return
        raise DegenerateEigenvalues("need at least two non-parallel reference vectors")


def inverse_variance(sigmas):
    s = np.asarray(sigmas, dtype=float)
    if np.any(s <= 0):
        raise ValueError("MEKF weighting needs strictly positive sigmas")
    return 1.0 / s**2


@dataclass(frozen=True)
class GyroModel:
    sigma_omega: float = 0.0  # rad/s, white rate noise
    sigma_b: float = 0.0  # rad/s*sqrt(Hz), bias random walk
    b0: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.sigma_omega < 0 or self.sigma_b < 0:
            raise ValueError("gyro noise levels must be nonnegative")
        object.__setattr__(self, "b0", np.asarray(self.b0, dtype=float).copy())


@dataclass
class MeasurementFrame:
    """One sample: gyro rate over ``[t, t + dt]`` and unit vector readings at ``t``."""

    t: float
    omega_meas: np.ndarray
    vec_meas: np.ndarray


class NoiseStream:
    """Seeded standard-normal source.

    Draws are served from an internal buffer so the sequence depends only on the
    seed and the total count consumed, not on how requests are chunked.
    """

    algorithm = NOISE_ALGORITHM

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self._buf = np.empty(0)
        self._pos = 0

    def normal(self, shape):
        shape = tuple(np.atleast_1d(shape))
        n = int(np.prod(shape))
        if self._pos + n > self._buf.size:
            rest = self._buf[self._pos :]
            fresh = self._gen.standard_normal(max(_BUFFER, n))
            self._buf = np.concatenate([rest, fresh])
            self._pos = 0
        out = self._buf[self._pos : self._pos + n].reshape(shape)
        self._pos += n
        return out


class NoiseBank:
    """Independent :class:`NoiseStream` sequences for a batch of runs.

    ``normal(shape)`` returns ``(len(seeds),) + shape``; row ``i`` is exactly
    what ``NoiseStream(seeds[i])`` would have produced.
    """

    algorithm = NOISE_ALGORITHM

    def __init__(self, seeds):
        self.seeds = [int(s) for s in seeds]
        self._gens = [np.random.Generator(np.random.PCG64(s)) for s in self.seeds]
        self._buf = np.empty((len(self.seeds), 0))
        self._pos = 0

    def normal(self, shape):
        shape = tuple(np.atleast_1d(shape))
        n = int(np.prod(shape))
        if self._pos + n > self._buf.shape[1]:
            rest = self._buf[:, self._pos :]
            m = max(_BUFFER, n)
            fresh = np.stack([g.standard_normal(m) for g in self._gens])
            self._buf = np.concatenate([rest, fresh], axis=1)
            self._pos = 0
        out = self._buf[:, self._pos : self._pos + n].reshape((len(self.seeds),) + shape)
        self._pos += n
        return out


def measure(c_true, omega_true, bias, gyro, model, dt, noise, t=0.0):
    """Sample the gyro and vector sensors; also step the bias random walk.

    Returns ``(frame, bias_next)``.  Rate noise uses variance ``sigma_omega**2 / dt``,
    the bias increment ``sigma_b**2 * dt``.  Every call consumes ``6 + 3 n``
    normals regardless of the noise levels so streams stay aligned across
    configurations.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    c_true = np.asarray(c_true, dtype=float)
    n = len(model)
    eta_w = noise.normal((3,))
    eta_b = noise.normal((3,))
    eta_v = noise.normal((n, 3))

    omega_meas = omega_true + bias
    if gyro.sigma_omega > 0:
        omega_meas = omega_meas + gyro.sigma_omega / np.sqrt(dt) * eta_w
    bias_next = bias + gyro.sigma_b * np.sqrt(dt) * eta_b if gyro.sigma_b > 0 else np.array(bias, float)

    # C^T v^A for every reference vector
    vec = np.einsum("...ji,nj->...ni", c_true, model.vectors)
    noisy = model.sigmas > 0
    if np.any(noisy):
        vec = vec + model.sigmas[:, None] * eta_v
        norms = np.linalg.norm(vec, axis=-1, keepdims=True)
        if np.any(norms < 1e-9):
            raise DegenerateVector("noisy vector measurement collapsed to zero length")
        vec = np.where(noisy[:, None], vec / norms, vec)
    return MeasurementFrame(t=t, omega_meas=omega_meas, vec_meas=vec), bias_next


def build_m(model, c=None):
    """``M = C^T M^A C`` with ``M^A = sum_n k_n v_n v_n^T``."""
    m_a = model.m_inertial
    if c is None:
        return m_a
    c = np.asarray(c, dtype=float)
    return np.swapaxes(c, -1, -2) @ m_a @ c


def check_distinct_eigenvalues(m):
    """Descending eigenvalues of symmetric ``m``; raise if any two nearly coincide."""
    lam = np.linalg.eigvalsh(np.asarray(m, dtype=float))[::-1]
    gap = 1e-6 * max(float(np.sum(lam)), 1.0)
    if np.min(np.abs(np.diff(lam))) <= gap:
        raise DegenerateEigenvalues(f"eigenvalues {lam} are not distinct")
    return tuple(float(x) for x in lam)
