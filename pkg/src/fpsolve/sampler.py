"""Euler-Maruyama trajectories, collocation sampling and Monte Carlo densities."""
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from ._accel import USE_NUMBA, is_compiled
from .grid import DensityField

CHUNK = 1 << 16


class SimulationError(RuntimeError):
    """A trajectory produced a non-finite state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


def substream(seed, name):
    """Independent generator for the named purpose under a root seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


@dataclass(frozen=True)
class TrajectoryConfig:
    dt: float = 1e-3
    burn_in_time: float = 10.0
    internal_gap: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.burn_in_time < 0:
            raise ValueError("burn_in_time must be nonnegative")
        if self.internal_gap is None:
            object.__setattr__(self, "internal_gap", 10.0 * self.dt)
        if self.internal_gap < self.dt * (1 - 1e-12):
            raise ValueError("internal_gap must be at least dt")

    @property
    def burn_in_steps(self):
        return int(round(self.burn_in_time / self.dt))

    @property
    def gap_steps(self):
        return max(1, int(round(self.internal_gap / self.dt)))


@dataclass
class ReferenceSet:
    points: np.ndarray
    densities: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.densities is not None:
            self.densities = np.asarray(self.densities, dtype=float).ravel()
            if self.densities.size != self.points.shape[0]:
                raise ValueError("densities and points differ in length")

    def __len__(self):
        return self.points.shape[0]

    def with_densities(self, densities):
        return ReferenceSet(self.points, densities)

    def present(self):
        """Subset whose density is not missing (NaN)."""
        if self.densities is None:
            raise ValueError("reference set has no densities")
        keep = np.isfinite(self.densities)
        return ReferenceSet(self.points[keep], self.densities[keep])


def em_step(model, x, dt, rng):
    """One Euler-Maruyama step ``x + f(x) dt + sigma sqrt(dt) xi``."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    x = np.asarray(x, dtype=float)
    xi = rng.standard_normal(model.dim)
    out = x + model.drift_at(x)[0] * dt + np.sqrt(dt) * (model.sigma @ xi)
    if not np.all(np.isfinite(out)):
        raise SimulationError("Euler-Maruyama step produced a non-finite state", state=out)
    return out


class Trajectory:
    """A single long Euler-Maruyama path driven by pre-drawn noise chunks."""

    def __init__(self, model, cfg, x0=None, rng=None):
        self.model = model
        self.cfg = cfg
        if x0 is None:
            x0 = model.domain.center if model.domain is not None else np.zeros(model.dim)
        self.x = np.ascontiguousarray(np.asarray(x0, dtype=float).reshape(1, model.dim))
        self.rng = rng if rng is not None else substream(cfg.seed, "trajectory")
        self.steps_taken = 0
        self._scale = np.sqrt(cfg.dt) * model.sigma.T
        self._compiled = USE_NUMBA and is_compiled(model.drift)

    @property
    def time(self):
        return self.steps_taken * self.cfg.dt

    def kernel(self, name):
        if self._compiled:
            return getattr(_kernels, name)
        return _kernels.PY_KERNELS[name]

    def increments(self, count):
        return self.rng.standard_normal((count, self.model.dim)) @ self._scale

    def _check(self, status):
        if status >= 0:
            step = self.steps_taken + status
            raise SimulationError(
                f"trajectory of {self.model.name} blew up at step {step}", state=self.x[0].copy()
            )

    def _chunks(self, steps, chunk=CHUNK):
        done = 0
        while done < steps:
            k = min(chunk, steps - done)
            yield k
            done += k

    def advance(self, steps):
        run = self.kernel("advance")
        for k in self._chunks(steps):
            status = run(self.x, self.model.drift, self.cfg.dt, self.increments(k))
            self._check(status)
            self.steps_taken += k
        return self.x[0].copy()

    def burn_in(self):
        return self.advance(self.cfg.burn_in_steps)

    def record(self, count, stride=1):
        """States after every ``stride`` steps, ``count`` of them."""
        run = self.kernel("advance_record")
        out = np.empty((count, self.model.dim))
        per_chunk = max(1, CHUNK // stride)
        row = 0
        for k in self._chunks(count, per_chunk):
            status = run(self.x, self.model.drift, self.cfg.dt, self.increments(k * stride),
                         stride, out[row:row + k])
            self._check(status)
            self.steps_taken += k * stride
            row += k
        return out

    def histogram(self, grid, steps):
        run = self.kernel("count_full")
        counts = np.zeros(grid.size, dtype=np.int64)
        lower = grid.domain.lower_array
        for k in self._chunks(steps):
            status = run(self.x, self.model.drift, self.cfg.dt, self.increments(k),
                         lower, grid.spacing, grid.points_per_axis, counts)
            self._check(status)
            self.steps_taken += k
        return counts

    def split_counts(self, grid, half, ptr, idx, n_ref, steps):
        run = self.kernel("count_split")
        eta = np.zeros(n_ref, dtype=np.int64)
        lower = grid.domain.lower_array
        for k in self._chunks(steps):
            status = run(self.x, self.model.drift, self.cfg.dt, self.increments(k),
                         lower, grid.spacing, grid.points_per_axis, half, ptr, idx, eta)
            self._check(status)
            self.steps_taken += k
        return eta


def sample_collocation(model, domain, count, alpha, cfg, x0=None, return_mask=False):
    """Mixture of trajectory states and uniform points on ``domain``.

    Each point comes from the burned-in trajectory (advanced by the internal
    gap before each pick) with probability ``alpha`` and is uniform on the
    domain otherwise. Trajectory points outside the domain are kept.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    pick_rng = substream(cfg.seed, "collocation")
    from_traj = pick_rng.random(count) <= alpha
    if alpha == 0.0:
        from_traj[:] = False
    points = np.empty((count, model.dim))
    n_traj = int(from_traj.sum())
    points[~from_traj] = domain.uniform(pick_rng, count - n_traj)
    if n_traj:
        traj = Trajectory(model, cfg, x0=x0)
        traj.burn_in()
        points[from_traj] = traj.record(n_traj, cfg.gap_steps)
    if return_mask:
        return points, from_traj
    return points


def snap_to_grid(points, grid):
    """Map points to their nearest grid nodes, dropping repeated nodes.

    Returns ``(nodes, multi_indices)`` in order of first occurrence.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    inside = grid.domain.contains(pts)
    if not np.all(inside):
        bad = pts[~inside][0]
        raise ValueError(f"point {bad.tolist()} lies outside the domain")
    idx = np.clip(grid.node_index(pts), 0, grid.points_per_axis - 1)
    _, first = np.unique(grid.flat_index(idx), return_index=True)
    idx = idx[np.sort(first)]
    nodes = grid.domain.lower_array + idx * grid.spacing
    return nodes, idx


def estimate_density_full_grid(model, grid, steps, cfg, x0=None):
    """Histogram density on every node from one trajectory of ``steps`` steps."""
    if grid.dim > 3:
        raise ValueError(
            f"full-grid estimation needs N**{grid.dim} cells; use estimate_density_split for dim > 3"
        )
    traj = Trajectory(model, cfg, x0=x0)
    traj.burn_in()
    counts = traj.histogram(grid, steps)
    if steps == 0:
        return DensityField(grid, np.zeros(grid.size))
    return DensityField(grid, counts / (steps * grid.box_volume))


def _grid_aligned_indices(points, grid, tol=1e-6):
    raw = (np.atleast_2d(points) - grid.domain.lower_array) / grid.spacing
    idx = np.rint(raw).astype(np.int64)
    if np.any(np.abs(raw - idx) > tol) or np.any(idx < 0) or np.any(idx >= grid.points_per_axis):
        raise ValueError("reference points must be grid nodes; run snap_to_grid first")
    return idx


def build_split_index(multi_index, npts):
    """Array-of-arrays of reference ids per half-bucket, in CSR form.

    Buckets ``0..B-1`` hold the first half of the coordinates, ``B..2B-1`` the
    second half, with ``B = npts**(n/2)``. Member lists are sorted.
    """
    m, n = multi_index.shape
    half = n // 2
    nbuckets = npts**half
    shape = (npts,) * half
    c1 = np.ravel_multi_index(tuple(multi_index[:, :half].T), shape)
    c2 = np.ravel_multi_index(tuple(multi_index[:, half:].T), shape)
    bucket = np.concatenate([c1, nbuckets + c2])
    owner = np.concatenate([np.arange(m), np.arange(m)])
    order = np.argsort(bucket, kind="stable")
    idx = owner[order].astype(np.int64)
    ptr = np.zeros(2 * nbuckets + 1, dtype=np.int64)
    np.cumsum(np.bincount(bucket, minlength=2 * nbuckets), out=ptr[1:])
    return ptr, idx


def estimate_density_split(model, grid, reference, steps, cfg, x0=None, return_counts=False):
    """Densities at grid-aligned reference points via the split-dimension index.

    A sample is credited to reference ``j`` only when the membership lists of
    its two half-buckets intersect in exactly ``{j}``. Densities are counts
    divided by ``steps`` and the box volume.
    """
    points = reference.points if isinstance(reference, ReferenceSet) else np.atleast_2d(reference)
    n = grid.dim
    if n % 2:
        raise ValueError("split estimation pairs coordinates into two halves; dim must be even")
    idx = _grid_aligned_indices(points, grid)
    ptr, members = build_split_index(idx, grid.points_per_axis)
    traj = Trajectory(model, cfg, x0=x0)
    traj.burn_in()
    eta = traj.split_counts(grid, n // 2, ptr, members, idx.shape[0], steps)
    dens = eta / (steps * grid.box_volume) if steps else np.zeros(idx.shape[0])
    if return_counts:
        return dens, eta
    return dens


def inject_multiplicative_noise(densities, alpha, rng):
    """Multiply each density by an independent ``U[1 - alpha, 1 + alpha]`` factor."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    densities = np.asarray(densities, dtype=float)
    return densities * rng.uniform(1.0 - alpha, 1.0 + alpha, size=densities.shape)
