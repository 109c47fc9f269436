"""Conditional Gaussian reference densities for conditionally linear SDEs.

The state splits as ``x = (x_I, x_II)`` with

    dx_I  = [A0(t, x_I) + A1(t, x_I) x_II] dt + S_I dW_I
    dx_II = [a0(t, x_I) + a1(t, x_I) x_II] dt + S_II dW_II

so that ``x_II`` given the ``x_I`` path is Gaussian with a mean and
covariance obeying Kalman-Bucy type equations. Coefficient callables take
``(t, x_I)`` with ``x_I`` of shape ``(1, n_I)``.
"""
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from ._accel import USE_NUMBA, is_compiled, njit
from .models import TURB6D_NOISE, SdeModel
from .sampler import ReferenceSet, SimulationError, Trajectory

_NO_RECORD = 1 << 62


@dataclass(frozen=True)
class ConditionalLinearModel:
    base: SdeModel
    n_first: int
    big_a0: Callable
    big_a1: Callable
    small_a0: Callable
    small_a1: Callable
    sigma_first: np.ndarray = field(repr=False)
    sigma_second: np.ndarray = field(repr=False)

    def __post_init__(self):
        s1 = np.atleast_2d(np.asarray(self.sigma_first, dtype=float))
        s2 = np.atleast_2d(np.asarray(self.sigma_second, dtype=float))
        if s1.shape != (self.n_first, self.n_first) or s2.shape != (self.n_second, self.n_second):
            raise ValueError("noise blocks do not match the state split")
        obs = s1 @ s1.T
        if np.linalg.matrix_rank(obs) < self.n_first:
            raise np.linalg.LinAlgError("S_I S_I^T is singular; the filter gain is undefined")
        object.__setattr__(self, "sigma_first", s1)
        object.__setattr__(self, "sigma_second", s2)

    @property
    def n_second(self):
        return self.base.dim - self.n_first

    @property
    def observation_inverse(self):
        return np.linalg.inv(self.sigma_first @ self.sigma_first.T)

    def state_noise(self, first_block_noise=False):
        # the observed-block term S_I S_I^T is only shape-compatible when n_I == n_II
        s = self.sigma_first if first_block_noise else self.sigma_second
        if first_block_noise and self.n_first != self.n_second:
            raise ValueError("first-block noise term needs n_I == n_II")
        return s @ s.T

    def coefficients(self, t, x_first):
        xi = np.ascontiguousarray(np.asarray(x_first, dtype=float).reshape(1, self.n_first))
        return (np.asarray(self.big_a0(t, xi)), np.asarray(self.big_a1(t, xi)),
                np.asarray(self.small_a0(t, xi)), np.asarray(self.small_a1(t, xi)))

    def reassembled_drift(self, x, t=0.0):
        """Drift rebuilt from the linear blocks, for checking against ``base``."""
        x = np.atleast_2d(x)
        out = np.empty_like(x, dtype=float)
        for row, state in enumerate(x):
            b0, b1, c0, c1 = self.coefficients(t, state[: self.n_first])
            second = state[self.n_first:]
            out[row, : self.n_first] = b0 + b1 @ second
            out[row, self.n_first:] = c0 + c1 @ second
        return out


@dataclass
class FilterState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")


def _clamp_psd(cov):
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w[0] < 0.0:
        cov = (v * np.maximum(w, 0.0)) @ v.T
        cov = 0.5 * (cov + cov.T)
    return cov


def filter_step(m, state, x_first, dx_first, dt, t=0.0, first_block_noise=False):
    """Explicit Euler update of the conditional mean and covariance."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    b0, b1, c0, c1 = m.coefficients(t, x_first)
    mean, cov = state.mean, state.cov
    innov = np.atleast_1d(dx_first) - (b0 + b1 @ mean) * dt
    ra = cov @ b1.T
    gain = ra @ m.observation_inverse
    new_mean = mean + (c0 + c1 @ mean) * dt + gain @ innov
    dcov = c1 @ cov + cov @ c1.T + m.state_noise(first_block_noise) - gain @ ra.T
    return FilterState(new_mean, _clamp_psd(cov + dcov * dt))


def gaussian_density(state, y):
    """``N(mean, cov)`` density at ``y``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    k = state.mean.size
    try:
        chol = np.linalg.cholesky(state.cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance is singular") from exc
    z = np.linalg.solve(chol, y - state.mean)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(np.exp(-0.5 * (k * np.log(2 * np.pi) + log_det) - 0.5 * z @ z))


@dataclass
class CgEstimate:
    """Joint densities, the bare conditional averages, and visit bookkeeping."""

    densities: np.ndarray
    conditional: np.ndarray
    visits: np.ndarray
    n_records: int
    half_width: float
    state: FilterState


def cg_reference_densities(m, reference, horizon, half_width, cfg, record_every=1,
                           x0=None, first_block_noise=False):
    """Reference densities from one long trajectory co-integrated with the filter.

    At each recording time, reference points whose ``x_I`` block lies within
    the box of half-width ``half_width`` receive the filter's Gaussian
    density of their ``x_II`` block. ``conditional`` is the per-point average
    of those values; ``densities`` multiplies it by the visit-frequency
    density of ``x_I``, giving the joint invariant density. Unvisited points
    carry NaN.
    """
    points = reference.points if isinstance(reference, ReferenceSet) else np.atleast_2d(reference)
    base = m.base
    nf = m.n_first
    traj = Trajectory(base, cfg, x0=x0)
    run = _kernels.cg_filter_run
    coef = (m.big_a0, m.big_a1, m.small_a0, m.small_a1)
    if not (USE_NUMBA and is_compiled(base.drift) and all(is_compiled(c) for c in coef)):
        run = _kernels.PY_KERNELS["cg_filter_run"]

    obs_inv = np.ascontiguousarray(m.observation_inverse)
    noise = np.ascontiguousarray(m.state_noise(first_block_noise))
    mean = traj.x[0, nf:].copy()
    cov = np.zeros((m.n_second, m.n_second))

    ref_first = np.ascontiguousarray(points[:, :nf])
    ref_second = np.ascontiguousarray(points[:, nf:])
    order = np.argsort(ref_first[:, 0], kind="stable").astype(np.int64)
    key = np.ascontiguousarray(ref_first[order, 0])
    sums = np.zeros(points.shape[0])
    visits = np.zeros(points.shape[0], dtype=np.int64)
    n_records = np.zeros(1, dtype=np.int64)

    def drive(steps, every, first, second, srt, keys, acc, cnt, rec):
        done = 0
        while done < steps:
            k = min(1 << 16, steps - done)
            status = run(traj.x, base.drift, cfg.dt, traj.increments(k), traj.time, nf, *coef,
                         obs_inv, noise, mean, cov, every, done, first, second, srt, keys,
                         float(half_width), acc, cnt, rec)
            if status >= 0:
                raise SimulationError("trajectory blew up during conditional Gaussian sampling",
                                      state=traj.x[0].copy())
            traj.steps_taken += k
            done += k

    # filter burn-in: no references, no records
    empty2 = np.zeros((0, nf))
    drive(cfg.burn_in_steps, _NO_RECORD, empty2, np.zeros((0, m.n_second)),
          np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64),
          np.zeros(1, dtype=np.int64))
    drive(int(round(horizon / cfg.dt)), int(record_every), ref_first, ref_second, order, key,
          sums, visits, n_records)

    if not visits.any():
        raise RuntimeError("no reference point was visited; increase the horizon or half_width")
    with np.errstate(invalid="ignore", divide="ignore"):
        conditional = np.where(visits > 0, sums / visits, np.nan)
    joint = np.where(visits > 0, sums / (n_records[0] * (2.0 * half_width) ** nf), np.nan)
    return CgEstimate(joint, conditional, visits, int(n_records[0]), float(half_width),
                      FilterState(mean, cov))


# ------------------------------------------------------------ built-ins


@njit
def _gibbs_big_a0(t, xi):
    return np.array([-xi[0, 0] ** 5])


@njit
def _gibbs_big_a1(t, xi):
    return np.array([[xi[0, 0] ** 2]])


@njit
def _gibbs_small_a0(t, xi):
    return np.array([xi[0, 0] ** 3 / 3.0])


@njit
def _gibbs_small_a1(t, xi):
    return np.array([[-7.0 / 3.0]])


@njit
def _turb_big_a0(t, xi):
    return np.array([-0.1 * xi[0, 0] + 0.5])


@njit
def _turb_big_a1(t, xi):
    return np.full((1, 5), 0.25 * xi[0, 0])


@njit
def _turb_small_a0(t, xi):
    return np.full(5, -0.25 * xi[0, 0] ** 2)


@njit
def _turb_small_a1(t, xi):
    return -np.diag(np.array([0.2, 0.5, 1.0, 2.0, 5.0]))


def decompose(model):
    """Conditionally linear form of a built-in model (``x_I`` = first coordinate)."""
    if model.name == "gibbs2d":
        s = model.noise_level
        return ConditionalLinearModel(model, 1, _gibbs_big_a0, _gibbs_big_a1, _gibbs_small_a0,
                                      _gibbs_small_a1, np.array([[s]]), np.array([[s]]))
    if model.name == "turb6d":
        return ConditionalLinearModel(model, 1, _turb_big_a0, _turb_big_a1, _turb_small_a0,
                                      _turb_small_a1, np.diag(TURB6D_NOISE[:1]),
                                      np.diag(TURB6D_NOISE[1:]))
    raise ValueError(f"model {model.name!r} has no conditionally linear decomposition")
