"""Rectangular domains, uniform grids and grid-valued densities."""
from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``prod_i [lower_i, upper_i]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lower = tuple(float(a) for a in np.atleast_1d(self.lower))
        upper = tuple(float(b) for b in np.atleast_1d(self.upper))
        if len(lower) != len(upper) or not lower:
            raise ValueError("lower and upper bounds must have the same nonzero length")
        for a, b in zip(lower, upper):
            if not a < b:
                raise ValueError(f"empty interval [{a}, {b}]")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def cube(cls, a, b, dim):
        return cls((a,) * dim, (b,) * dim)

    @property
    def dim(self):
        return len(self.lower)

    @property
    def lower_array(self):
        return np.asarray(self.lower)

    @property
    def upper_array(self):
        return np.asarray(self.upper)

    @property
    def widths(self):
        return self.upper_array - self.lower_array

    @property
    def volume(self):
        return float(np.prod(self.widths))

    @property
    def center(self):
        return 0.5 * (self.lower_array + self.upper_array)

    def contains(self, points):
        """Boolean mask of points inside the closed box."""
        pts = np.atleast_2d(points)
        return np.all((pts >= self.lower_array) & (pts <= self.upper_array), axis=1)

    def uniform(self, rng, count):
        return self.lower_array + self.widths * rng.random((count, self.dim))


@dataclass(frozen=True)
class GridSpec:
    """``points_per_axis`` nodes per axis at ``lower + i*h`` with ``h = width/N``.

    Node ``i`` owns the box ``[x_i - h/2, x_i + h/2)``; a coordinate maps to the
    node ``floor((x - a)/h + 1/2)``.
    """

    domain: Domain
    points_per_axis: int

    def __post_init__(self):
        if int(self.points_per_axis) != self.points_per_axis or self.points_per_axis < 3:
            raise ValueError("points_per_axis must be an integer >= 3")
        object.__setattr__(self, "points_per_axis", int(self.points_per_axis))

    @property
    def dim(self):
        return self.domain.dim

    @property
    def shape(self):
        return (self.points_per_axis,) * self.dim

    @property
    def size(self):
        return self.points_per_axis ** self.dim

    @cached_property
    def spacing(self):
        return self.domain.widths / self.points_per_axis

    @property
    def box_volume(self):
        return float(np.prod(self.spacing))

    def axis(self, i):
        return self.domain.lower[i] + self.spacing[i] * np.arange(self.points_per_axis)

    def nodes(self):
        """All nodes as an ``(N**n, n)`` array in row-major multi-index order."""
        axes = [self.axis(i) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def node_index(self, points):
        """Nearest-node multi-indices, unclamped (may fall outside ``[0, N)``)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((pts - self.domain.lower_array) / self.spacing + 0.5).astype(np.int64)

    def flat_index(self, multi_index):
        return np.ravel_multi_index(tuple(np.asarray(multi_index).T), self.shape)

    def interior_mask(self):
        idx = np.indices(self.shape).reshape(self.dim, -1)
        return np.all((idx > 0) & (idx < self.points_per_axis - 1), axis=0)

    def same_as(self, other):
        return (
            self.points_per_axis == other.points_per_axis
            and np.allclose(self.domain.lower, other.domain.lower)
            and np.allclose(self.domain.upper, other.domain.upper)
        )


@dataclass
class DensityField:
    """Density values on every node of ``grid``, flattened row-major."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} values, got {self.values.size}")

    @property
    def mass(self):
        return self.grid.box_volume * float(self.values.sum())

    def as_array(self):
        return self.values.reshape(self.grid.shape)

    @classmethod
    def from_function(cls, grid, func):
        return cls(grid, func(grid.nodes()))
