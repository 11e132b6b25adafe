"""Optimization of base radiance, opacity and fusion parameters from LDR views.

One iteration renders three images in a single blending pass (they share
geometry and opacity): the LDR view from tone-mapped fused radiance, the
fused HDR view and the base linear view. The objective is

    loss = loss_ldr + beta * loss_linear

with both terms L1 + lambda * D-SSIM. Geometry is frozen.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import renderer
from .bracketing import ExposurePlan, bracket_log
from .imaging import ResponseCurve, apply_crf, invert_crf
from .metrics import dssim_loss_with_grad
from .neef import MLP, NeEFParams, fuse_log, neef_backward
from .renderer import Camera, project_geometry, rasterize, rasterize_backward
from .scene import SH_C0, BracketedScene, ColorDomain, GaussianSet

log = logging.getLogger(__name__)

SELF_SUPERVISED = "self-supervised"
HDR_SUPERVISED = "hdr-supervised"
MODES = (SELF_SUPERVISED, HDR_SUPERVISED)
INIT_MODES = ("views", "constant")
HIGHER_ORDER_INIT = 0.05  # fused higher-order SH coefficients start at this fraction of DC

CHECKPOINT_MAGIC = b"SEHDRCK1"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; carries a diagnostic dump."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_sigma: float = 1e-3
    lr_mlp: float = 1e-3
    lambda_dssim: float = 0.2
    beta: float = 0.5
    ratios: tuple = (0.25, 4.0)
    seed: int = 0
    mode: str = SELF_SUPERVISED
    detach_hdr: bool = True
    full_batch: bool = False
    normalization: str = "softmax"
    init: str = "views"
    init_radiance: float = 0.5
    init_opacity: float = 0.5
    geometry_noise: float = 0.0

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if not (0.0 <= self.beta <= 1.0 and 0.0 <= self.lambda_dssim <= 1.0):
            raise ValueError("beta and lambda must lie in [0, 1]")
        for name in ("lr_sh", "lr_opacity", "lr_sigma", "lr_mlp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if not 0.0 < self.init_opacity < 1.0 or not self.init_radiance > 0:
            raise ValueError("init_opacity must be in (0, 1) and init_radiance positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    def hash(self) -> str:
        # iterations excluded: a run resumed to a longer horizon keeps its identity
        d = self.to_dict()
        d.pop("iterations")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class View:
    camera: Camera
    ldr: np.ndarray
    exposure: float
    hdr: np.ndarray | None = None


@dataclass
class Model:
    """Trainable state plus the fixed pieces (geometry, curve, plan)."""

    geometry: GaussianSet
    log_radiance: np.ndarray  # (N, B, 3) base log radiance aligned with plan.base_exposure
    neef: NeEFParams
    curve: ResponseCurve
    plan: ExposurePlan
    normalization: str = "softmax"

    @property
    def exposure(self) -> float:
        return self.plan.base_exposure

    def param_arrays(self) -> list:
        return [self.log_radiance, self.geometry.opacity_logits] + self.neef.arrays()

    def base_scene(self) -> GaussianSet:
        return self.geometry.with_radiance(
            np.exp(self.log_radiance), ColorDomain.LINEAR_EXPOSURE_SCALED, self.exposure
        )

    def bracketed(self) -> BracketedScene:
        return BracketedScene(
            geometry=self.geometry,
            log_radiance=bracket_log(self.log_radiance, self.plan),
            exposures=self.plan.exposures(),
            base_index=self.plan.base_index,
        )

    def fused(self):
        return fuse_log(bracket_log(self.log_radiance, self.plan), self.curve, self.neef, self.normalization)

    def hdr_scene(self) -> GaussianSet:
        fused, _ = self.fused()
        return self.geometry.with_radiance(fused, ColorDomain.LINEAR_HDR)

    def copy(self) -> "Model":
        return Model(self.geometry.copy(), self.log_radiance.copy(), self.neef.copy(), self.curve, self.plan, self.normalization)


def init_model(geometry: GaussianSet, curve: ResponseCurve, exposure: float, config: TrainConfig,
               views=None) -> Model:
    """Fresh model on ``geometry`` (optionally perturbed).

    With ``config.init == "views"`` and views given, base radiance is set so
    that the initial fused color of each Gaussian matches the inverse-CRF
    color seen at its projected center; otherwise it starts at
    ``config.init_radiance``.
    """
    rng = np.random.default_rng([config.seed, 1])
    geo = geometry.copy()
    if config.geometry_noise > 0:
        geo.means = geo.means + rng.normal(scale=config.geometry_noise, size=geo.means.shape)
    p = config.init_opacity
    geo.opacity_logits = np.full(len(geo), math.log(p / (1.0 - p)))
    log_rad = np.full(geo.sh.shape, math.log(config.init_radiance * HIGHER_ORDER_INIT))
    log_rad[:, 0, :] = math.log(config.init_radiance)
    plan = ExposurePlan(exposure, config.ratios)
    neef = NeEFParams.init(plan.n, seed=config.seed)
    model = Model(geo, log_rad, neef, curve, plan, config.normalization)
    if config.init == "views" and views:
        target = _fused_targets(geo, curve, exposure, views)
        model.log_radiance = _solve_log_radiance(model, target)
    return model


def _fused_targets(geo: GaussianSet, curve: ResponseCurve, exposure: float, views) -> np.ndarray:
    """Per-Gaussian SH coefficient targets from the LDR pixel under each projected center."""
    samples = [[] for _ in range(len(geo))]
    for v in views:
        cam = v.camera
        pc = geo.means @ cam.R.T + cam.t
        for i in np.nonzero(pc[:, 2] > renderer.NEAR_PLANE)[0]:
            u = cam.K[0, 0] * pc[i, 0] / pc[i, 2] + cam.K[0, 2]
            w = cam.K[1, 1] * pc[i, 1] / pc[i, 2] + cam.K[1, 2]
            x, y = int(round(u)), int(round(w))
            if 0 <= x < cam.width and 0 <= y < cam.height:
                samples[i].append(v.ldr[y, x])
    n_coef = geo.sh.shape[1]
    out = np.empty((len(geo), n_coef, 3))
    for i, s in enumerate(samples):
        z = np.median(np.asarray(s), axis=0) if s else np.full(3, 0.5)
        color = invert_crf(curve, z) / exposure
        dc = np.clip(color / SH_C0, 1e-6, 1.0)
        out[i, 0] = dc
        out[i, 1:] = HIGHER_ORDER_INIT * dc
    return out


def _solve_log_radiance(model: Model, target: np.ndarray, steps: int = 60) -> np.ndarray:
    """Bisection (per coefficient) on base log radiance so the fused value meets ``target``."""
    lo = np.full(target.shape, -40.0)
    hi = np.full(target.shape, 5.0)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        fused, _ = fuse_log(bracket_log(mid, model.plan), model.curve, model.neef, model.normalization)
        above = fused > target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# rendering helpers


def render_ldr(scene_hdr: GaussianSet, curve: ResponseCurve, exposure: float, cam: Camera) -> np.ndarray:
    """LDR view with per-Gaussian color f(c_h * dt) blended by the splatting renderer."""
    splats = renderer.project(scene_hdr, cam)
    splats = splats.with_colors(apply_crf(curve, splats.color * exposure))
    return rasterize(splats, cam)


def render_hdr(model: Model, cam: Camera) -> np.ndarray:
    return renderer.render(model.hdr_scene(), cam)


def render_bracketed(model: Model, cam: Camera, j: int) -> np.ndarray:
    """Linear render of exposure ``j`` (sorted order) of the bracketed Gaussians."""
    return renderer.render(model.bracketed().exposure_set(j), cam)


# ---------------------------------------------------------------------------
# loss and gradients


@dataclass
class LossTerms:
    ldr: float
    linear: float
    total: float


@dataclass
class Gradients:
    log_radiance: np.ndarray
    opacity_logits: np.ndarray
    neef: list  # same layout as NeEFParams.arrays()

    def arrays(self) -> list:
        return [self.log_radiance, self.opacity_logits] + self.neef


class _ProjectionCache:
    def __init__(self):
        self._store = {}

    def get(self, model: Model, cam: Camera):
        key = id(cam)
        hit = self._store.get(key)
        if hit is not None and hit[0] is cam:
            return hit[1]
        g = model.geometry
        proj = project_geometry(g.means, g.scales, g.rotations, cam, g.sh_degree)
        self._store[key] = (cam, proj)
        return proj


def loss_and_grads(model: Model, view: View, config: TrainConfig, proj=None, need_grad: bool = True):
    """Loss terms for one view and (optionally) gradients for every trainable array."""
    cam = view.camera
    exposure = model.exposure
    g = model.geometry
    if proj is None:
        proj = project_geometry(g.means, g.scales, g.rotations, cam, g.sh_degree)
    idx, basis = proj.index, proj.basis

    fused, trace = fuse_log(bracket_log(model.log_radiance, model.plan), model.curve, model.neef, model.normalization)
    base = np.exp(model.log_radiance)

    h_raw = np.einsum("mb,mbc->mc", basis, fused[idx])
    b_raw = np.einsum("mb,mbc->mc", basis, base[idx])
    h_col = np.maximum(h_raw, 0.0)
    b_col = np.maximum(b_raw, 0.0)
    l_col, l_slope = apply_crf(model.curve, h_col * exposure, with_slope=True)

    alpha = 1.0 / (1.0 + np.exp(-g.opacity_logits[idx]))
    splats = renderer.SplatList(
        idx, proj.mean2d, proj.cov2d, proj.depth, np.ascontiguousarray(alpha),
        np.ascontiguousarray(np.concatenate([l_col, h_col, b_col], axis=1)), basis, None, len(g),
    )
    img = rasterize(splats, cam)
    i_ldr, i_hdr, i_base = img[..., 0:3], img[..., 3:6], img[..., 6:9]

    lam, beta = config.lambda_dssim, config.beta
    loss_ldr, g_ldr, _ = dssim_loss_with_grad(i_ldr, view.ldr, lam)
    if config.mode == HDR_SUPERVISED:
        if view.hdr is None:
            raise ValueError("hdr-supervised training needs HDR references on every view")
        target = view.hdr * exposure
    else:
        target = i_hdr * exposure
    loss_lin, g_target, g_base = dssim_loss_with_grad(target, i_base, lam)
    total = loss_ldr + beta * loss_lin
    terms = LossTerms(loss_ldr, loss_lin, total)
    if not need_grad:
        return terms, None

    g_img = np.zeros_like(img)
    g_img[..., 0:3] = g_ldr
    if config.mode == SELF_SUPERVISED and not config.detach_hdr:
        g_img[..., 3:6] = beta * exposure * g_target
    g_img[..., 6:9] = beta * g_base
    rg = rasterize_backward(splats, cam, g_img)

    g_h = rg.color[:, 3:6] + rg.color[:, 0:3] * l_slope * exposure
    g_h = np.where(h_raw > 0.0, g_h, 0.0)
    g_b = np.where(b_raw > 0.0, rg.color[:, 6:9], 0.0)
    g_fused = np.zeros_like(fused)
    g_fused[idx] = basis[:, :, None] * g_h[:, None, :]
    g_base_coef = np.zeros_like(base)
    g_base_coef[idx] = basis[:, :, None] * g_b[:, None, :]

    ng = neef_backward(trace, g_fused)
    grads = Gradients(
        log_radiance=ng.log_radiance + g_base_coef * base,
        opacity_logits=rg.opacity_logit,
        neef=ng.arrays(),
    )
    return terms, grads


def batch_loss_and_grads(model: Model, views, config: TrainConfig, projections=None, need_grad: bool = True):
    """Mean loss and gradient over ``views``."""
    total_terms = LossTerms(0.0, 0.0, 0.0)
    acc = None
    k = len(views)
    for v_i, view in enumerate(views):
        proj = projections[v_i] if projections is not None else None
        terms, grads = loss_and_grads(model, view, config, proj, need_grad)
        total_terms = LossTerms(
            total_terms.ldr + terms.ldr / k, total_terms.linear + terms.linear / k, total_terms.total + terms.total / k
        )
        if need_grad:
            arrs = grads.arrays()
            acc = [a / k for a in arrs] if acc is None else [x + a / k for x, a in zip(acc, arrs)]
    if not need_grad:
        return total_terms, None
    return total_terms, Gradients(acc[0], acc[1], acc[2:])


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    lrs: list
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_model(cls, model: Model, config: TrainConfig) -> "Adam":
        arrays = model.param_arrays()
        lrs = [config.lr_sh, config.lr_opacity, config.lr_sigma] + [config.lr_mlp] * (len(arrays) - 3)
        return cls(lrs, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)

    def update(self, params: list, grads: list) -> None:
        self.step += 1
        c1 = 1.0 - ADAM_BETA1**self.step
        c2 = 1.0 - ADAM_BETA2**self.step
        for p, g, m, v, lr in zip(params, grads, self.m, self.v, self.lrs):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class Checkpoint:
    model: Model
    optimizer: Adam
    iteration: int
    config_hash: str
    extra: dict = field(default_factory=dict)


def view_order(seed: int, n_views: int, iteration: int) -> int:
    """Index of the view used at ``iteration``: seeded per-epoch shuffles."""
    epoch, pos = divmod(iteration, n_views)
    perm = np.random.default_rng([seed, 7, epoch]).permutation(n_views)
    return int(perm[pos])


def _diagnostics(model: Model, view_index: int, terms: LossTerms) -> dict:
    return {
        "view": view_index,
        "loss_ldr": terms.ldr,
        "loss_linear": terms.linear,
        "norm_log_radiance": float(np.linalg.norm(model.log_radiance)),
        "norm_opacity_logits": float(np.linalg.norm(model.geometry.opacity_logits)),
        "sigma": model.neef.sigma.tolist(),
        "norm_mlp": [float(sum(np.linalg.norm(w) for w, _ in m.layers)) for m in model.neef.mlps],
    }


def train(config: TrainConfig, views, geometry: GaussianSet | None = None, curve: ResponseCurve | None = None,
          resume: Checkpoint | None = None, log_path=None, log_rows: list | None = None) -> Checkpoint:
    """Run (or continue) optimization up to ``config.iterations``.

    ``views`` must share one capture exposure. A fresh run needs
    ``geometry`` and ``curve``; a resumed run takes both from ``resume``.
    """
    views = list(views)
    if not views:
        raise ValueError("training needs at least one view")
    exposures = {float(v.exposure) for v in views}
    if len(exposures) != 1:
        raise ValueError(f"all views must share one exposure, got {sorted(exposures)}")
    exposure = exposures.pop()
    if config.mode == HDR_SUPERVISED and any(v.hdr is None for v in views):
        raise ValueError("hdr-supervised training needs HDR references on every view")

    if resume is not None:
        if resume.config_hash != config.hash():
            raise ValueError("checkpoint was produced with a different configuration")
        model = resume.model.copy()
        opt = Adam(list(resume.optimizer.lrs), [m.copy() for m in resume.optimizer.m],
                   [v.copy() for v in resume.optimizer.v], resume.optimizer.step)
        start = resume.iteration
    else:
        if geometry is None or curve is None:
            raise ValueError("a fresh run needs initial geometry and a response curve")
        model = init_model(geometry, curve, exposure, config, views)
        opt = Adam.for_model(model, config)
        start = 0

    g = model.geometry
    projections = [project_geometry(g.means, g.scales, g.rotations, v.camera, g.sh_degree) for v in views]
    writer = None
    fh = None
    if log_path is not None:
        new = start == 0 or not os.path.exists(log_path)
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["iter", "loss_ldr", "loss_linear", "total"])
    try:
        for it in range(start, config.iterations):
            if config.full_batch:
                v_i = -1
                terms, grads = batch_loss_and_grads(model, views, config, projections)
            else:
                v_i = view_order(config.seed, len(views), it)
                terms, grads = loss_and_grads(model, views[v_i], config, projections[v_i])
            if not math.isfinite(terms.total) or not all(np.all(np.isfinite(a)) for a in grads.arrays()):
                diag = _diagnostics(model, v_i, terms)
                raise TrainingDiverged(f"non-finite loss at iteration {it} (view {v_i}): {diag}", diag)
            opt.update(model.param_arrays(), grads.arrays())
            model.geometry.renormalize()
            row = [it, repr(terms.ldr), repr(terms.linear), repr(terms.total)]
            if writer is not None:
                writer.writerow(row)
            if log_rows is not None:
                log_rows.append((it, terms.ldr, terms.linear, terms.total))
            if it % 500 == 0:
                log.info("iter %d  ldr %.5f  linear %.5f  total %.5f", it, terms.ldr, terms.linear, terms.total)
    finally:
        if fh is not None:
            fh.close()
    return Checkpoint(model, opt, max(start, config.iterations), config.hash())


# ---------------------------------------------------------------------------
# checkpoint file: magic, u64 header length, JSON header, float64 arrays


def _checkpoint_arrays(ck: Checkpoint):
    m = ck.model
    g = m.geometry
    named = [
        ("means", g.means),
        ("scales", g.scales),
        ("rotations", g.rotations),
        ("opacity_logits", g.opacity_logits),
        ("log_radiance", m.log_radiance),
        ("curve", m.curve.samples),
    ]
    named += [(f"neef.{k}", a) for k, a in enumerate(m.neef.arrays())]
    named += [(f"adam.m.{k}", a) for k, a in enumerate(ck.optimizer.m)]
    named += [(f"adam.v.{k}", a) for k, a in enumerate(ck.optimizer.v)]
    return named


def checkpoint_to_bytes(ck: Checkpoint) -> bytes:
    m = ck.model
    named = _checkpoint_arrays(ck)
    header = {
        "version": CHECKPOINT_VERSION,
        "iteration": ck.iteration,
        "config_hash": ck.config_hash,
        "sh_degree": m.geometry.sh_degree,
        "curve_name": m.curve.name,
        "exposure": m.plan.base_exposure,
        "ratios": list(m.plan.ratios),
        "normalization": m.normalization,
        "mlp_layers": [[list(w.shape) for w, _ in mlp.layers] for mlp in m.neef.mlps],
        "adam_step": ck.optimizer.step,
        "adam_lrs": ck.optimizer.lrs,
        "extra": ck.extra,
        "arrays": [[name, list(a.shape)] for name, a in named],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in named)
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + body


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    try:
        header = json.loads(data[16 : 16 + hlen])
    except ValueError as exc:
        raise CheckpointFormatError("unreadable checkpoint header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {header.get('version')}")
    arrays = {}
    off = 16 + hlen
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(data):
            raise CheckpointFormatError(f"truncated checkpoint at array {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise CheckpointFormatError("trailing bytes in checkpoint")
    degree = header["sh_degree"]
    geo = GaussianSet(
        arrays["means"], arrays["scales"], arrays["rotations"], arrays["opacity_logits"],
        np.exp(arrays["log_radiance"]), degree, ColorDomain.LINEAR_EXPOSURE_SCALED, header["exposure"],
    )
    n_neef = sum(1 for name in arrays if name.startswith("neef."))
    flat = [arrays[f"neef.{k}"] for k in range(n_neef)]
    mlps = []
    pos = 1
    for layer_shapes in header["mlp_layers"]:
        layers = []
        for _ in layer_shapes:
            layers.append((flat[pos], flat[pos + 1]))
            pos += 2
        mlps.append(MLP(layers))
    neef = NeEFParams(flat[0], mlps)
    curve = ResponseCurve(header["curve_name"], arrays["curve"])
    plan = ExposurePlan(header["exposure"], tuple(header["ratios"]))
    model = Model(geo, arrays["log_radiance"], neef, curve, plan, header["normalization"])
    n_adam = sum(1 for name in arrays if name.startswith("adam.m."))
    opt = Adam(
        list(header["adam_lrs"]),
        [arrays[f"adam.m.{k}"] for k in range(n_adam)],
        [arrays[f"adam.v.{k}"] for k in range(n_adam)],
        header["adam_step"],
    )
    return Checkpoint(model, opt, header["iteration"], header["config_hash"], header.get("extra", {}))


def write_checkpoint(ck: Checkpoint, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_to_bytes(ck))
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
