"""SDE systems with constant diffusion and their Gibbs-type invariant densities.

All model callables act on a batch of states ``x`` of shape ``(m, n)``.
Drifts are written with column slicing only, so the same source compiles
under numba and runs under plain numpy.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._accel import njit
from .grid import Domain


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class SdeModel:
    """``dX = f(X) dt + sigma dW`` with constant noise matrix ``sigma``.

    ``diffusion`` is ``sigma @ sigma.T``, the covariance rate of the noise.
    ``potential`` (with its gradient and Hessian) is set when the invariant
    density is ``exp(-2 V / s**2)`` for scalar noise level ``s``.
    """

    name: str
    dim: int
    drift: Callable
    drift_divergence: Callable
    sigma: np.ndarray
    domain: Optional[Domain] = None
    potential: Optional[Callable] = None
    potential_grad: Optional[Callable] = None
    potential_hess: Optional[Callable] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if callable(self.sigma):
            raise ModelError("state-dependent noise is not supported; sigma must be constant")
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = float(sigma) * np.eye(self.dim)
        elif sigma.ndim == 1:
            sigma = np.diag(sigma)
        if sigma.shape != (self.dim, self.dim):
            raise ModelError(f"sigma must be {self.dim}x{self.dim}, got {sigma.shape}")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        if self.domain is not None and self.domain.dim != self.dim:
            raise ModelError("domain dimension does not match model dimension")

    @property
    def diffusion(self):
        return self.sigma @ self.sigma.T

    @property
    def noise_level(self):
        """Scalar ``s`` with ``diffusion == s**2 I``, or None."""
        d = self.diffusion
        s2 = d[0, 0]
        if np.allclose(d, s2 * np.eye(self.dim), rtol=0, atol=1e-14 * max(1.0, s2)):
            return float(np.sqrt(s2))
        return None

    @property
    def has_exact_solution(self):
        return self.potential is not None and self.noise_level is not None

    def drift_at(self, x):
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        return self.drift(x)

    def divergence_at(self, x):
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        return self.drift_divergence(x)


# ---------------------------------------------------------------- ring models


@njit
def _ring2d_drift(x):
    out = np.empty_like(x)
    r = x[:, 0] ** 2 + x[:, 1] ** 2 - 1.0
    out[:, 0] = -4.0 * x[:, 0] * r + x[:, 1]
    out[:, 1] = -4.0 * x[:, 1] * r - x[:, 0]
    return out


@njit
def _ring4d_drift(x):
    out = np.empty_like(x)
    r = x[:, 0] ** 2 + x[:, 1] ** 2 + x[:, 2] ** 2 + x[:, 3] ** 2 - 1.0
    out[:, 0] = -4.0 * x[:, 0] * r + x[:, 1]
    out[:, 1] = -4.0 * x[:, 1] * r - x[:, 0]
    out[:, 2] = -4.0 * x[:, 2] * r
    out[:, 3] = -4.0 * x[:, 3] * r
    return out


def _ring_divergence(x):
    n = x.shape[1]
    r2 = np.sum(x * x, axis=1)
    return -4.0 * n * (r2 - 1.0) - 8.0 * r2


def _ring_potential(x):
    return (np.sum(x * x, axis=1) - 1.0) ** 2


def _ring_potential_grad(x):
    r = np.sum(x * x, axis=1) - 1.0
    return 4.0 * r[:, None] * x


def _ring_potential_hess(x):
    n = x.shape[1]
    r = np.sum(x * x, axis=1) - 1.0
    return 4.0 * r[:, None, None] * np.eye(n) + 8.0 * x[:, :, None] * x[:, None, :]


# ----------------------------------------------------------------- gibbs2d


@njit
def _gibbs2d_drift(x):
    out = np.empty_like(x)
    out[:, 0] = x[:, 0] ** 2 * x[:, 1] - x[:, 0] ** 5
    out[:, 1] = x[:, 0] ** 3 / 3.0 - 7.0 / 3.0 * x[:, 1]
    return out


def _gibbs2d_divergence(x):
    return 2.0 * x[:, 0] * x[:, 1] - 5.0 * x[:, 0] ** 4 - 7.0 / 3.0


def _gibbs2d_potential(x):
    return (x[:, 0] ** 3 - x[:, 1]) ** 2 / 6.0 + x[:, 1] ** 2


def _gibbs2d_potential_grad(x):
    c = x[:, 0] ** 3 - x[:, 1]
    return np.stack([c * x[:, 0] ** 2, -c / 3.0 + 2.0 * x[:, 1]], axis=1)


def _gibbs2d_potential_hess(x):
    h = np.empty((x.shape[0], 2, 2))
    h[:, 0, 0] = 5.0 * x[:, 0] ** 4 - 2.0 * x[:, 0] * x[:, 1]
    h[:, 0, 1] = h[:, 1, 0] = -x[:, 0] ** 2
    h[:, 1, 1] = 7.0 / 3.0
    return h


# ------------------------------------------------------------------ turb6d

TURB6D_DAMPING = (0.2, 0.5, 1.0, 2.0, 5.0)
TURB6D_NOISE = (2.0, 0.5, 0.2, 0.1, 0.1, 0.1)


@njit
def _turb6d_drift(x):
    out = np.empty_like(x)
    s = x[:, 1] + x[:, 2] + x[:, 3] + x[:, 4] + x[:, 5]
    q = 0.25 * x[:, 0] ** 2
    out[:, 0] = -0.1 * x[:, 0] + 0.5 + 0.25 * x[:, 0] * s
    out[:, 1] = -0.2 * x[:, 1] - q
    out[:, 2] = -0.5 * x[:, 2] - q
    out[:, 3] = -x[:, 3] - q
    out[:, 4] = -2.0 * x[:, 4] - q
    out[:, 5] = -5.0 * x[:, 5] - q
    return out


def _turb6d_divergence(x):
    return -0.1 + 0.25 * np.sum(x[:, 1:], axis=1) - sum(TURB6D_DAMPING)


# ---------------------------------------------------------------- registry

BUILTIN_NAMES = ("ring2d", "gibbs2d", "ring4d", "turb6d")


def make_builtin(name):
    """Return one of the built-in benchmark systems by identifier."""
    if name == "ring2d":
        return SdeModel(
            "ring2d", 2, _ring2d_drift, _ring_divergence, 1.0,
            domain=Domain.cube(-2.0, 2.0, 2),
            potential=_ring_potential, potential_grad=_ring_potential_grad,
            potential_hess=_ring_potential_hess,
        )
    if name == "ring4d":
        return SdeModel(
            "ring4d", 4, _ring4d_drift, _ring_divergence, 1.0,
            domain=Domain.cube(-2.0, 2.0, 4),
            potential=_ring_potential, potential_grad=_ring_potential_grad,
            potential_hess=_ring_potential_hess,
        )
    if name == "gibbs2d":
        return SdeModel(
            "gibbs2d", 2, _gibbs2d_drift, _gibbs2d_divergence, 1.0,
            domain=Domain((-2.0, -3.0), (2.0, 3.0)),
            potential=_gibbs2d_potential, potential_grad=_gibbs2d_potential_grad,
            potential_hess=_gibbs2d_potential_hess,
        )
    if name == "turb6d":
        return SdeModel(
            "turb6d", 6, _turb6d_drift, _turb6d_divergence, np.array(TURB6D_NOISE),
            domain=Domain((-3.0, -3.0, -1.5, -0.5, -0.5, -0.5), (3.0, 0.0, 0.5, 0.5, 0.5, 0.5)),
        )
    raise ModelError(f"unknown model {name!r}; choose from {', '.join(BUILTIN_NAMES)}")


@njit
def _zero_drift(x):
    return np.zeros_like(x)


def _zero_divergence(x):
    return np.zeros(x.shape[0])


def zero_drift_model(dim, sigma=1.0, domain=None):
    """Pure diffusion ``dX = sigma dW``; used for operator diagnostics."""
    if domain is None:
        domain = Domain.cube(0.0, 1.0, dim)
    return SdeModel(f"zero{dim}d", dim, _zero_drift, _zero_divergence, sigma, domain=domain)


# ---------------------------------------------------------- exact solutions


def gauss_legendre_composite(lo, hi, panels, order):
    """Nodes and weights of a composite Gauss-Legendre rule on ``[lo, hi]``."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


_QUAD_PANELS = {1: (64, 10), 2: (32, 8), 3: (16, 8), 4: (10, 6)}


def tensor_quadrature(func, domain, panels=None, order=None):
    """Integrate a batched ``func`` over ``domain`` by tensor-product Gauss-Legendre."""
    n = domain.dim
    if n > 4:
        raise ModelError("tensor-product quadrature is limited to dim <= 4")
    p0, o0 = _QUAD_PANELS[n]
    panels = panels or p0
    order = order or o0
    rules = [gauss_legendre_composite(a, b, panels, order) for a, b in zip(domain.lower, domain.upper)]
    first_nodes, first_weights = rules[0]
    if n == 1:
        return float(np.dot(func(first_nodes[:, None]), first_weights))
    rest = [r[0] for r in rules[1:]]
    mesh = np.meshgrid(*rest, indexing="ij")
    rest_pts = np.stack([m.ravel() for m in mesh], axis=1)
    rest_w = rules[1][1]
    for r in rules[2:]:
        rest_w = np.multiply.outer(rest_w, r[1])
    rest_w = rest_w.ravel()
    total = 0.0
    # slab by slab along the first axis keeps memory at O(nodes**(n-1))
    pts = np.empty((rest_pts.shape[0], n))
    pts[:, 1:] = rest_pts
    for x0, w0 in zip(first_nodes, first_weights):
        pts[:, 0] = x0
        total += w0 * float(np.dot(func(pts), rest_w))
    return total


@dataclass(frozen=True)
class ExactSolution:
    model: SdeModel
    normalization: float
    domain: Domain

    def unnormalized_density(self, x):
        x = np.atleast_2d(x)
        s = self.model.noise_level
        return np.exp(-2.0 * self.model.potential(x) / s**2)

    def density(self, x):
        return self.unnormalized_density(x) / self.normalization


def exact_solution(model, domain=None):
    """Normalise ``exp(-2V/s^2)`` by quadrature over ``domain`` (tail neglected)."""
    if not model.has_exact_solution:
        raise ModelError(f"model {model.name!r} has no closed-form invariant density")
    domain = domain or model.domain
    s = model.noise_level
    z = tensor_quadrature(lambda x: np.exp(-2.0 * model.potential(x) / s**2), domain)
    return ExactSolution(model, z, domain)


def exact_density(sol, x):
    """Normalised invariant density at ``x`` (single point or batch)."""
    x = np.asarray(x, dtype=float)
    val = sol.density(x)
    return float(val[0]) if x.ndim == 1 else val


def exact_jet(sol, x):
    """Exact density with gradient and Hessian at ``x``.

    Uses ``grad u = -c u grad V`` and ``hess u = u (c^2 gV gV^T - c hess V)``
    with ``c = 2/s^2``.
    """
    model = sol.model
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    c = 2.0 / model.noise_level**2
    u = sol.density(xb)
    gv = model.potential_grad(xb)
    hv = model.potential_hess(xb)
    grad = -c * u[:, None] * gv
    hess = u[:, None, None] * (c * c * gv[:, :, None] * gv[:, None, :] - c * hv)
    if single:
        return float(u[0]), grad[0], hess[0]
    return u, grad, hess


def generator_apply(model, u, grad, hess, x):
    """Apply the stationary Fokker-Planck operator to a pointwise jet.

    Returns ``-sum_i (df_i/dx_i u + f_i du/dx_i) + 1/2 sum_ij D_ij d2u/dx_i dx_j``
    for constant diffusion ``D``. Accepts a single point or a batch.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    m, n = xb.shape
    if n != model.dim:
        raise ModelError(f"point has dimension {n}, model has {model.dim}")
    u = np.reshape(np.asarray(u, dtype=float), (m,))
    grad = np.reshape(np.asarray(grad, dtype=float), (m, -1))
    hess = np.asarray(hess, dtype=float)
    if grad.shape[1] != n or hess.size != m * n * n:
        raise ModelError("gradient/Hessian shapes do not match the model dimension")
    hess = hess.reshape(m, n, n)
    f = model.drift_at(xb)
    div = model.divergence_at(xb)
    out = -(div * u + np.sum(f * grad, axis=1)) + 0.5 * np.einsum("ij,mij->m", model.diffusion, hess)
    return float(out[0]) if single else out
