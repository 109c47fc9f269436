"""Sigmoid MLP density model with exact input jets and the alternating trainer.

Input derivatives are carried forward layer by layer as a value, a gradient
and a full Hessian per sample. Parameter gradients of the residual loss are
obtained by reverse accumulation over that jet computation, so they include
every second-order path through the network.

Array layout for a batch of ``m`` points in ``n`` dimensions and a layer of
width ``k``: value ``(m, k)``, gradient ``(m, n, k)``, Hessian ``(m, n, n, k)``.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .grid import DensityField
from .sampler import ReferenceSet, substream

DEFAULT_HIDDEN = (16, 128, 128, 128, 16, 4)


def default_layer_sizes(dim):
    return (dim, *DEFAULT_HIDDEN, 1)


class MlpParams:
    """Weights and biases stored contiguously in one flat vector.

    ``weights[l]`` has shape ``(out, in)``; both lists are views into ``flat``.
    """

    def __init__(self, layer_sizes, flat=None):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError("need at least an input and an output layer of positive width")
        size = sum(o * i + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        if flat is None:
            flat = np.zeros(size)
        flat = np.ascontiguousarray(flat, dtype=float)
        if flat.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {flat.shape}")
        self.flat = flat
        self.weights, self.biases = [], []
        pos = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in))
            pos += fan_in * fan_out
            self.biases.append(flat[pos:pos + fan_out])
            pos += fan_out

    @property
    def size(self):
        return self.flat.size

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    def copy(self):
        return MlpParams(self.layer_sizes, self.flat.copy())

    def with_flat(self, flat):
        return MlpParams(self.layer_sizes, flat)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.flat)))

    def __eq__(self, other):
        return (isinstance(other, MlpParams) and self.layer_sizes == other.layer_sizes
                and np.array_equal(self.flat, other.flat))

    def __repr__(self):
        return f"MlpParams(layer_sizes={self.layer_sizes}, size={self.size})"


def init_params(layer_sizes, seed, gain=1.0):
    """Uniform weights of half-width ``gain * sqrt(6 / (fan_in + fan_out))``, zero biases.

    ``gain=1`` is plain Glorot. Deep all-sigmoid stacks need ``gain=4`` to keep
    the input signal from shrinking by the sigmoid slope at every layer.
    """
    params = MlpParams(layer_sizes)
    rng = substream(seed, "init")
    for w in params.weights:
        fan_out, fan_in = w.shape
        limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return params


def _batch(params, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.input_dim:
        raise ValueError(f"network takes {params.input_dim} inputs, got {x.shape[1]}")
    return x, single


def forward(params, x):
    """Network output at one point (scalar) or a batch ``(m, n)`` (vector)."""
    a, single = _batch(params, x)
    for w, b in zip(params.weights, params.biases):
        a = expit(a @ w.T + b)
    out = a[:, 0]
    return float(out[0]) if single else out


@dataclass
class Jet:
    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray

    def at(self, i):
        return Jet(self.value[i], self.grad[i], self.hess[i])


@dataclass
class _Tape:
    inputs: list = field(default_factory=list)  # (a_prev, G_prev, H_prev) per layer
    pre: list = field(default_factory=list)     # (Gz, Hz) per layer
    act: list = field(default_factory=list)     # (s, s1, s2) per layer


def _right_mul(t, mat):
    """``t @ mat`` over the last axis as one 2D product."""
    return (t.reshape(-1, t.shape[-1]) @ mat).reshape(t.shape[:-1] + (mat.shape[1],))


def _jet_pass(params, x, tape=None):
    m, n = x.shape
    a = x
    grad = np.ascontiguousarray(np.broadcast_to(np.eye(n)[None, :, :], (m, n, n)))
    hess = np.zeros((m, n, n, n))
    for w, b in zip(params.weights, params.biases):
        z = a @ w.T + b
        gz = _right_mul(grad, w.T)
        hz = _right_mul(hess, w.T)
        s = expit(z)
        s1 = s * (1.0 - s)
        s2 = s1 * (1.0 - 2.0 * s)
        if tape is not None:
            tape.inputs.append((a, grad, hess))
            tape.pre.append((gz, hz))
            tape.act.append((s, s1, s2))
        a = s
        grad = s1[:, None, :] * gz
        hess = s2[:, None, None, :] * gz[:, :, None, :] * gz[:, None, :, :] + s1[:, None, None, :] * hz
    return a, grad, hess


def forward_jet(params, x):
    """Value, input gradient and input Hessian of the network output.

    The value is computed by the same operations as :func:`forward`, so the
    two agree bit for bit.
    """
    xb, single = _batch(params, x)
    a, grad, hess = _jet_pass(params, xb)
    jet = Jet(a[:, 0], grad[..., 0], hess[..., 0])
    if single:
        return Jet(float(jet.value[0]), jet.grad[0], jet.hess[0])
    return jet


def _generator_terms(model, x):
    return model.drift_at(x), model.divergence_at(x)


def _residual_from_jet(u, grad, hess, drift, div, diffusion):
    return (-(div * u + np.einsum("mi,mi->m", drift, grad))
            + 0.5 * np.einsum("ij,mij->m", diffusion, hess))


def residual(model, params, x):
    """Generator applied to the network output, at one point or a batch."""
    xb, single = _batch(params, x)
    jet = forward_jet(params, xb)
    drift, div = _generator_terms(model, xb)
    r = _residual_from_jet(jet.value, jet.grad, jet.hess, drift, div, model.diffusion)
    return float(r[0]) if single else r


def _backward_jet(params, tape, bar_a, bar_g, bar_h):
    """Reverse sweep through the jet pass; returns the flat parameter gradient."""
    out = np.zeros(params.size)
    grads = MlpParams(params.layer_sizes, out)
    for layer in range(len(params.weights) - 1, -1, -1):
        w = params.weights[layer]
        s, s1, s2 = tape.act[layer]
        gz, hz = tape.pre[layer]
        s3 = s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1
        # sigmoid: G = s1 Gz, H = s2 Gz Gz^T + s1 Hz
        hsym_gz = ((bar_h + np.swapaxes(bar_h, 1, 2)) * gz[:, None, :, :]).sum(axis=2)
        bar_z = (bar_a * s1
                 + s2 * (bar_g * gz).sum(axis=1)
                 + s3 * 0.5 * (hsym_gz * gz).sum(axis=1)
                 + s2 * (bar_h * hz).sum(axis=(1, 2)))
        bar_gz = s1[:, None, :] * bar_g + s2[:, None, :] * hsym_gz
        bar_hz = s1[:, None, None, :] * bar_h
        # affine: z = a W^T + b, Gz = G W^T, Hz = H W^T
        a_prev, g_prev, h_prev = tape.inputs[layer]
        k_out, k_in = w.shape
        gw = grads.weights[layer]
        gw += bar_z.T @ a_prev
        gw += bar_gz.reshape(-1, k_out).T @ g_prev.reshape(-1, k_in)
        if layer > 0:
            gw += bar_hz.reshape(-1, k_out).T @ h_prev.reshape(-1, k_in)
        grads.biases[layer] += bar_z.sum(axis=0)
        if layer > 0:
            bar_a = bar_z @ w
            bar_g = _right_mul(bar_gz, w)
            bar_h = _right_mul(bar_hz, w)
    return out


def _l1_core(params, x, drift, div, diffusion):
    tape = _Tape()
    a, grad, hess = _jet_pass(params, x, tape)
    r = _residual_from_jet(a[:, 0], grad[..., 0], hess[..., 0], drift, div, diffusion)
    m = x.shape[0]
    loss = float(r @ r / m)
    rbar = 2.0 * r / m
    bar_a = (-div * rbar)[:, None]
    bar_g = (-drift * rbar[:, None])[:, :, None]
    bar_h = (0.5 * diffusion[None, :, :] * rbar[:, None, None])[..., None]
    return loss, _backward_jet(params, tape, bar_a, bar_g, bar_h)


def loss_and_grad_L1(model, params, batch):
    """Mean squared generator residual over ``batch`` and its parameter gradient."""
    x, _ = _batch(params, batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    drift, div = _generator_terms(model, x)
    return _l1_core(params, x, drift, div, model.diffusion)


def loss_and_grad_L2(params, batch, targets):
    """Mean squared misfit ``(u(y) - v)^2`` over a batch and its parameter gradient."""
    x, _ = _batch(params, batch)
    v = np.asarray(targets, dtype=float).ravel()
    if x.shape[0] == 0 or v.size != x.shape[0]:
        raise ValueError("batch and targets must be nonempty and of equal length")
    acts = [x]
    a = x
    for w, b in zip(params.weights, params.biases):
        a = expit(a @ w.T + b)
        acts.append(a)
    diff = a[:, 0] - v
    m = x.shape[0]
    loss = float(diff @ diff / m)
    out = np.zeros(params.size)
    grads = MlpParams(params.layer_sizes, out)
    bar_a = (2.0 * diff / m)[:, None]
    for layer in range(len(params.weights) - 1, -1, -1):
        s = acts[layer + 1]
        bar_z = bar_a * s * (1.0 - s)
        grads.weights[layer] += bar_z.T @ acts[layer]
        grads.biases[layer] += bar_z.sum(axis=0)
        if layer > 0:
            bar_a = bar_z @ params.weights[layer]
    return loss, out


# ------------------------------------------------------------------ Adam


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    first: np.ndarray
    second: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, params):
        return cls(np.zeros(params.size), np.zeros(params.size), 0)


def adam_update(params, grads, state, hyper=AdamHyper()):
    """Bias-corrected Adam step. Returns new ``(params, state)``; inputs are untouched."""
    g = np.asarray(grads, dtype=float)
    if g.shape != params.flat.shape or state.first.shape != g.shape:
        raise ValueError("gradient, moments and parameters must have matching shapes")
    step = state.step + 1
    first = hyper.beta1 * state.first + (1.0 - hyper.beta1) * g
    second = hyper.beta2 * state.second + (1.0 - hyper.beta2) * g * g
    mhat = first / (1.0 - hyper.beta1**step)
    vhat = second / (1.0 - hyper.beta2**step)
    flat = params.flat - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)
    return params.with_flat(flat), AdamState(first, second, step)


# -------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_train: int = 128
    batch_ref: Optional[int] = None  # None: min(128, reference count)
    max_iters: int = 10_000
    ema_decay: float = 0.99
    threshold_l1: float = 1e-5
    threshold_l2: float = 1e-5
    seed: int = 0
    rescale: bool = False
    use_residual: bool = True
    hyper_l1: AdamHyper = AdamHyper()
    hyper_l2: AdamHyper = AdamHyper()
    log_every: int = 0

    def __post_init__(self):
        if self.batch_train < 1 or (self.batch_ref is not None and self.batch_ref < 1):
            raise ValueError("batch sizes must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class TrainResult:
    params: MlpParams
    history: np.ndarray  # (iterations, 2): batch L1, batch L2
    converged: bool
    best_iteration: int
    scale: float  # multiply network output by this to get a density

    def density(self, x):
        return self.scale * forward(self.params, x)


class _Shuffler:
    """Consecutive slices of a per-epoch permutation."""

    def __init__(self, size, batch, rng):
        if batch > size:
            raise ValueError(f"batch size {batch} exceeds set size {size}")
        self.size, self.batch, self.rng = size, batch, rng
        self.perm = rng.permutation(size)
        self.pos = 0

    def next(self):
        if self.pos + self.batch > self.size:
            self.perm = self.rng.permutation(self.size)
            self.pos = 0
        out = self.perm[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return out


def _full_l1(params, x, drift, div, diffusion, chunk=1024):
    total = 0.0
    for i in range(0, x.shape[0], chunk):
        a, g, h = _jet_pass(params, x[i:i + chunk])
        r = _residual_from_jet(a[:, 0], g[..., 0], h[..., 0], drift[i:i + chunk], div[i:i + chunk], diffusion)
        total += float(r @ r)
    return total / x.shape[0]


def train_double_shuffle(model, params, train_points, reference, cfg=TrainConfig(), log=None):
    """Alternate Adam steps on the residual loss and the reference-data loss.

    Each iteration takes one step on a fresh mini-batch of ``train_points``
    for the residual (own Adam state) and one on a mini-batch of the
    reference set for the data misfit (separate Adam state). Training stops
    when the exponentially smoothed batch losses both drop below their
    thresholds, or when the budget runs out; in the latter case the
    parameters with the lowest smoothed loss sum are returned.
    """
    if not isinstance(reference, ReferenceSet) or reference.densities is None:
        raise ValueError("reference must be a ReferenceSet with densities")
    ref = reference.present()
    xs = np.ascontiguousarray(np.atleast_2d(np.asarray(train_points, dtype=float)))
    if len(ref) == 0 or (cfg.use_residual and xs.shape[0] == 0):
        raise ValueError("training and reference sets must be nonempty")
    scale = float(ref.densities.max()) if cfg.rescale else 1.0
    if scale <= 0:
        raise ValueError("cannot rescale: all reference densities are zero")
    targets = ref.densities / scale

    rng = substream(cfg.seed, "shuffling")
    batch_ref = cfg.batch_ref if cfg.batch_ref is not None else min(128, len(ref))
    ref_batches = _Shuffler(len(ref), batch_ref, rng)
    drift = div = None
    if cfg.use_residual:
        drift, div = _generator_terms(model, xs)
        train_batches = _Shuffler(xs.shape[0], cfg.batch_train, rng)

    l1_now = _full_l1(params, xs, drift, div, model.diffusion) if cfg.use_residual else 0.0
    l2_now = float(np.mean((forward(params, ref.points) - targets) ** 2))
    if l1_now < cfg.threshold_l1 and l2_now < cfg.threshold_l2:
        return TrainResult(params, np.empty((0, 2)), True, 0, scale)

    state1 = AdamState.fresh(params)
    state2 = AdamState.fresh(params)
    ema1, ema2 = l1_now, l2_now
    best = (ema1 + ema2, params, 0)
    history = np.full((cfg.max_iters, 2), np.nan)
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if cfg.use_residual:
            pick = train_batches.next()
            l1, g1 = _l1_core(params, xs[pick], drift[pick], div[pick], model.diffusion)
            params, state1 = adam_update(params, g1, state1, cfg.hyper_l1)
            ema1 = cfg.ema_decay * ema1 + (1 - cfg.ema_decay) * l1
            history[it - 1, 0] = l1
        pick = ref_batches.next()
        l2, g2 = loss_and_grad_L2(params, ref.points[pick], targets[pick])
        params, state2 = adam_update(params, g2, state2, cfg.hyper_l2)
        ema2 = cfg.ema_decay * ema2 + (1 - cfg.ema_decay) * l2
        history[it - 1, 1] = l2
        if not params.is_finite():
            raise FloatingPointError(f"parameters became non-finite at iteration {it}")
        if log is not None and cfg.log_every and it % cfg.log_every == 0:
            log(it, ema1, ema2)
        if ema1 + ema2 < best[0]:
            best = (ema1 + ema2, params, it)
        if ema1 < cfg.threshold_l1 and ema2 < cfg.threshold_l2:
            converged = True
            break
    history = history[:it]
    if converged:
        return TrainResult(params, history, True, it, scale)
    return TrainResult(best[1], history, False, best[2], scale)


def evaluate_on_grid(params, grid, scale=1.0):
    """Network density (times ``scale``) at every grid node."""
    return DensityField(grid, scale * forward(params, grid.nodes()))


def evaluate_slice(params, plane, fixed, free_axes=(0, 1), scale=1.0):
    """Evaluate on a 2D plane grid, the other coordinates held at ``fixed``.

    ``fixed`` maps each remaining axis to its value. Returns a field on
    ``plane``.
    """
    dim = params.input_dim
    free_axes = tuple(free_axes)
    if plane.dim != len(free_axes):
        raise ValueError("plane dimension must match the number of free axes")
    held = sorted(set(range(dim)) - set(free_axes))
    if sorted(fixed) != held:
        raise ValueError(f"fixed values needed for axes {held}")
    pts = np.empty((plane.size, dim))
    pts[:, list(free_axes)] = plane.nodes()
    for axis, value in fixed.items():
        pts[:, axis] = value
    return DensityField(plane, scale * forward(params, pts))


def moving_average_upticks(history, window=100, tolerance=0.05):
    """Fraction of windows whose smoothed ``L1 + L2`` rose by more than ``tolerance``."""
    total = np.nansum(history, axis=1)
    if total.size < 2 * window:
        return 0.0
    kernel = np.ones(window) / window
    avg = np.convolve(total, kernel, mode="valid")[::window]
    rises = avg[1:] > avg[:-1] * (1.0 + tolerance)
    return float(rises.mean()) if rises.size else 0.0


__all__ = [
    "MlpParams", "init_params", "forward", "forward_jet", "Jet", "residual",
    "loss_and_grad_L1", "loss_and_grad_L2", "AdamHyper", "AdamState", "adam_update",
    "TrainConfig", "TrainResult", "train_double_shuffle", "evaluate_on_grid", "evaluate_slice",
    "default_layer_sizes", "moving_average_upticks",
]
