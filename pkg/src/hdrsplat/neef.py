"""Neural exposure fusion of bracketed radiance into HDR radiance.

Fusion runs independently on every SH coefficient triple of every
Gaussian. For one scalar slot with bracket values x_1..x_n in channel c:

    ldr_p   = f(x_p)
    gamma_p = exp(-(ldr_p - 0.5)^2 / (2 sigma_c^2))
    raw_p   = mlp_c([gamma, ldr])_p * gamma_p
    w       = softmax(raw)
    fused   = sum_p w_p ldr_p

All steps have hand-written adjoints (``neef_backward``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import ResponseCurve, apply_crf
from .scene import BracketedScene, ColorDomain, GaussianSet

HIDDEN = (16, 16)
SIGMA_INIT = 0.2
NORMALIZATIONS = ("softmax", "ratio")


class MissingTraceError(RuntimeError):
    pass


@dataclass
class MLP:
    """tanh hidden layers, identity output. ``layers`` is a list of (W, b)."""

    layers: list

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, hidden=HIDDEN) -> "MLP":
        sizes = (n_in,) + tuple(hidden) + (n_out,)
        layers = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            w = rng.uniform(-0.5, 0.5, size=(a, b)) / np.sqrt(a)
            layers.append((w, np.zeros(b)))
        return cls(layers)

    @classmethod
    def constant(cls, n_in: int, n_out: int, value: float = 1.0, hidden=HIDDEN) -> "MLP":
        sizes = (n_in,) + tuple(hidden) + (n_out,)
        layers = [(np.zeros((a, b)), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])]
        layers[-1] = (layers[-1][0], np.full(n_out, float(value)))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def n_out(self) -> int:
        return self.layers[-1][0].shape[1]

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, g_out: np.ndarray):
        grads = [None] * len(self.layers)
        g = g_out
        for k in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[k]
            if k < len(self.layers) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[k] = (acts[k].T @ g, g.sum(axis=0))
            g = g @ w.T
        return g, grads

    def copy(self) -> "MLP":
        return MLP([(w.copy(), b.copy()) for w, b in self.layers])


@dataclass
class NeEFParams:
    log_sigma: np.ndarray
    mlps: list

    @classmethod
    def init(cls, n_exposures: int, seed: int = 0, sigma: float = SIGMA_INIT) -> "NeEFParams":
        rng = np.random.default_rng(seed)
        mlps = [MLP.init(2 * n_exposures, n_exposures, rng) for _ in range(3)]
        return cls(np.full(3, np.log(sigma)), mlps)

    @classmethod
    def constant(cls, n_exposures: int, value: float = 1.0, sigma: float = SIGMA_INIT) -> "NeEFParams":
        mlps = [MLP.constant(2 * n_exposures, n_exposures, value) for _ in range(3)]
        return cls(np.full(3, np.log(sigma)), mlps)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def n_exposures(self) -> int:
        return self.mlps[0].n_out

    def arrays(self) -> list:
        """Flat list of every parameter array (views, not copies)."""
        out = [self.log_sigma]
        for mlp in self.mlps:
            for w, b in mlp.layers:
                out.extend((w, b))
        return out

    def copy(self) -> "NeEFParams":
        return NeEFParams(self.log_sigma.copy(), [m.copy() for m in self.mlps])


@dataclass
class NeEFGrads:
    log_sigma: np.ndarray
    mlps: list
    log_radiance: np.ndarray

    def arrays(self) -> list:
        out = [self.log_sigma]
        for layers in self.mlps:
            for gw, gb in layers:
                out.extend((gw, gb))
        return out


@dataclass
class FusionTrace:
    """Forward intermediates. Per-slot arrays are (N, B, 3, n)."""

    gamma: np.ndarray
    raw: np.ndarray
    weights: np.ndarray
    fused: np.ndarray
    normalization: str = "softmax"
    _cache: dict | None = field(default=None, repr=False)


def well_exposedness(ldr, sigma):
    ldr = np.asarray(ldr, dtype=np.float64)
    return np.exp(-((ldr - 0.5) ** 2) / (2.0 * np.asarray(sigma, dtype=np.float64) ** 2))


def _softmax(raw: np.ndarray) -> np.ndarray:
    z = raw - raw.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _normalize(raw: np.ndarray, normalization: str) -> np.ndarray:
    if normalization == "softmax":
        return _softmax(raw)
    if normalization == "ratio":
        return raw / raw.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATIONS}")


def fusion_weights(gamma, ldr, mlp: MLP, normalization: str = "softmax") -> np.ndarray:
    """Weights over the exposure axis for stacks of shape (..., n)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    ldr = np.asarray(ldr, dtype=np.float64)
    n = gamma.shape[-1]
    if ldr.shape != gamma.shape:
        raise ValueError("gamma and ldr stacks differ in shape")
    if mlp.n_in != 2 * n or mlp.n_out != n:
        raise ValueError(f"MLP maps {mlp.n_in} -> {mlp.n_out}, stack has n={n}")
    x = np.concatenate([gamma, ldr], axis=-1).reshape(-1, 2 * n)
    out, _ = mlp.forward(x)
    raw = out.reshape(gamma.shape) * gamma
    return _normalize(raw, normalization)


def fuse_log(log_stack: np.ndarray, curve: ResponseCurve, params: NeEFParams, normalization: str = "softmax"):
    """Fuse a (N, n, B, 3) log-radiance stack; returns (fused (N, B, 3), trace)."""
    n_gauss, n, n_coef, _ = log_stack.shape
    if params.n_exposures != n:
        raise ValueError(f"NeEF parameters expect {params.n_exposures} exposures, stack has {n}")
    x = np.exp(np.moveaxis(log_stack, 1, -1))  # (N, B, 3, n)
    ldr, slope = apply_crf(curve, x, with_slope=True)
    sigma = params.sigma
    gamma = well_exposedness(ldr, sigma[None, None, :, None])
    raw = np.empty_like(gamma)
    mlp_cache = []
    for c, mlp in enumerate(params.mlps):
        inp = np.concatenate([gamma[:, :, c], ldr[:, :, c]], axis=-1).reshape(-1, 2 * n)
        out, acts = mlp.forward(inp)
        out = out.reshape(n_gauss, n_coef, n)
        raw[:, :, c] = out * gamma[:, :, c]
        mlp_cache.append((out, acts))
    weights = _normalize(raw, normalization)
    fused = np.sum(weights * ldr, axis=-1)
    if normalization == "softmax":
        # positive weights summing to one: the clip only removes last-bit rounding
        # outside the bracket hull, so the backward pass treats it as identity
        fused = np.clip(fused, ldr.min(axis=-1), ldr.max(axis=-1))
    cache = {"x": x, "ldr": ldr, "slope": slope, "sigma": sigma, "mlp": mlp_cache, "params": params}
    trace = FusionTrace(gamma, raw, weights, fused, normalization, cache)
    return fused, trace


def fuse(bracketed: BracketedScene, curve: ResponseCurve, params: NeEFParams, normalization: str = "softmax"):
    fused, trace = fuse_log(bracketed.log_radiance, curve, params, normalization)
    hdr = bracketed.geometry.with_radiance(fused, ColorDomain.LINEAR_HDR)
    return hdr, trace


def fuse_oracle(bracketed: BracketedScene, curve: ResponseCurve, sigma) -> GaussianSet:
    """Mertens-style fusion with well-exposedness-only weights, one slot at a time."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    lin = np.exp(bracketed.log_radiance)
    n_gauss, n, n_coef, _ = lin.shape
    grid = np.linspace(0.0, 1.0, len(curve.samples))
    out = np.zeros((n_gauss, n_coef, 3))
    for i in range(n_gauss):
        for b in range(n_coef):
            for c in range(3):
                vals = [float(np.interp(min(max(lin[i, p, b, c], 0.0), 1.0), grid, curve.samples)) for p in range(n)]
                gam = [np.exp(-((v - 0.5) ** 2) / (2.0 * sigma[c] ** 2)) for v in vals]
                total = sum(gam)
                out[i, b, c] = sum(g * v for g, v in zip(gam, vals)) / total
    return bracketed.geometry.with_radiance(out, ColorDomain.LINEAR_HDR)


def neef_backward(trace: FusionTrace | None, g_fused: np.ndarray) -> NeEFGrads:
    """Adjoint of ``fuse_log``: gradients for log sigma, every MLP array, and the base log radiance."""
    if trace is None or trace._cache is None:
        raise MissingTraceError("neef_backward needs the trace of a forward pass")
    cache = trace._cache
    params: NeEFParams = cache["params"]
    x, ldr, slope, sigma = cache["x"], cache["ldr"], cache["slope"], cache["sigma"]
    gamma, raw, w = trace.gamma, trace.raw, trace.weights
    n = gamma.shape[-1]
    g_fused = np.asarray(g_fused, dtype=np.float64)[..., None]

    g_ldr = g_fused * w
    g_w = g_fused * ldr
    if trace.normalization == "softmax":
        g_raw = w * (g_w - np.sum(g_w * w, axis=-1, keepdims=True))
    else:
        s = raw.sum(axis=-1, keepdims=True)
        g_raw = (g_w - np.sum(g_w * w, axis=-1, keepdims=True)) / s

    g_gamma = np.empty_like(gamma)
    mlp_grads = []
    for c, mlp in enumerate(params.mlps):
        out, acts = cache["mlp"][c]
        g_out = g_raw[:, :, c] * gamma[:, :, c]
        g_gamma[:, :, c] = g_raw[:, :, c] * out
        g_in, grads = mlp.backward(acts, g_out.reshape(-1, n))
        g_in = g_in.reshape(gamma.shape[0], gamma.shape[1], 2 * n)
        g_gamma[:, :, c] += g_in[..., :n]
        g_ldr[:, :, c] += g_in[..., n:]
        mlp_grads.append(grads)

    sig2 = (sigma**2)[None, None, :, None]
    dev = ldr - 0.5
    g_ldr += g_gamma * gamma * (-dev / sig2)
    g_log_sigma = np.sum(g_gamma * gamma * dev**2 / sig2, axis=(0, 1, 3))

    g_x = g_ldr * slope
    g_log_base = np.sum(g_x * x, axis=-1)
    return NeEFGrads(g_log_sigma, mlp_grads, g_log_base)
