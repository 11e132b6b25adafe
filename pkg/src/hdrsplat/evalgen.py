"""Synthetic ground-truth scenes and evaluation in the mu-law domain."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import renderer
from .imaging import CurveDatabase, ResponseCurve, apply_crf, invert_crf, minmax_normalize, mu_law, reinhard_tonemap
from .metrics import PSNR_CAP, psnr, ssim
from .renderer import Camera
from .scene import ColorDomain, GaussianSet, sh_coeff_count

MAX_ATTEMPTS = 64


@dataclass(frozen=True)
class SyntheticSpec:
    n_gaussians: int = 12
    extent: float = 0.6
    span: float = 1e3
    max_radiance: float = 0.9
    n_cameras: int = 8
    radius: float = 3.0
    look_at: tuple = (0.0, 0.0, 0.0)
    width: int = 32
    height: int = 32
    focal: float = 40.0
    crf: str = "gamma-2.4"
    exposure: float = 5.0
    sh_degree: int = 1
    test_every: int = 4
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise ValueError("need at least one Gaussian")
        if self.span < 1.0:
            raise ValueError("span must be >= 1")
        if self.n_cameras < 2:
            raise ValueError("need at least two cameras for a train/test split")
        if not (self.exposure > 0 and self.max_radiance > 0 and self.extent > 0 and self.radius > 0):
            raise ValueError("exposure, max_radiance, extent and radius must be positive")
        if self.test_every < 2 or self.test_every > self.n_cameras:
            raise ValueError("test_every must lie in [2, n_cameras]")

    @property
    def test_indices(self) -> list:
        return [i for i in range(self.n_cameras) if i % self.test_every == self.test_every - 1]

    @property
    def train_indices(self) -> list:
        held = set(self.test_indices)
        return [i for i in range(self.n_cameras) if i not in held]


@dataclass
class Synthetic:
    spec: SyntheticSpec
    scene: GaussianSet  # true radiance, LinearHDR
    cameras: list
    ldr: list  # 8-bit quantized captures at spec.exposure, as floats in [0, 1]
    hdr: list  # LinearHDR reference renders
    curve: ResponseCurve
    seed_used: int = 0


def quantize8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255) / 255.0


def ring_cameras(spec: SyntheticSpec) -> list:
    target = np.asarray(spec.look_at, dtype=np.float64)
    cams = []
    for i in range(spec.n_cameras):
        a = 2.0 * math.pi * i / spec.n_cameras
        # alternate heights so the ring does not view from a single plane
        eye = target + spec.radius * np.array([math.sin(a), 0.25 * (-1) ** i, math.cos(a)])
        cams.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), spec.focal, spec.width, spec.height))
    return cams


def random_scene(spec: SyntheticSpec, rng: np.random.Generator) -> GaussianSet:
    n = spec.n_gaussians
    means = rng.uniform(-spec.extent, spec.extent, (n, 3))
    scales = np.exp(rng.uniform(math.log(0.2), math.log(0.5), (n, 3))) * spec.extent
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    opacity = rng.uniform(0.6, 0.95, n)
    logits = np.log(opacity / (1.0 - opacity))
    # DC radiance log-uniform over the span; first two Gaussians pin both ends
    levels = np.exp(rng.uniform(-math.log(spec.span), 0.0, n))
    levels[0] = 1.0
    if n > 1:
        levels[1] = 1.0 / spec.span
    tint = rng.uniform(0.7, 1.0, (n, 3))
    b = sh_coeff_count(spec.sh_degree)
    sh = np.zeros((n, b, 3))
    # fused coefficients are convex combinations of curve values, so the
    # truth keeps every coefficient in [0, 1] to stay representable
    sh[:, 0, :] = spec.max_radiance * levels[:, None] * tint
    if b > 1:
        sh[:, 1:, :] = rng.uniform(0.0, 0.1, (n, b - 1, 3)) * sh[:, :1, :]
    return GaussianSet(means, scales, q, logits, sh, spec.sh_degree, ColorDomain.LINEAR_HDR, 0.0)


def capture(hdr: np.ndarray, curve: ResponseCurve, exposure: float, noise_sigma: float = 0.0, rng=None) -> np.ndarray:
    """Per-pixel LDR capture: scale by exposure, optional noise, CRF, 8-bit quantization."""
    x = hdr * exposure
    if noise_sigma > 0:
        x = np.maximum(x + rng.normal(scale=noise_sigma, size=x.shape), 0.0)
    return quantize8(apply_crf(curve, x))


def _exposes_both_ends(ldr_views) -> bool:
    return any(v.max() > 0.99 and v.min() < 0.01 for v in ldr_views)


def generate(spec: SyntheticSpec = SyntheticSpec(), curves: CurveDatabase | None = None) -> Synthetic:
    """Deterministic scene, cameras, LDR captures and HDR references.

    Candidate scenes are drawn from seeds (spec.seed, 0), (spec.seed, 1), ...
    until some view has both a pixel above 0.99 and one below 0.01.
    """
    curves = curves or CurveDatabase.builtin()
    curve = curves[spec.crf]
    cams = ring_cameras(spec)
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        scene = random_scene(spec, rng)
        hdr = [renderer.render(scene, c) for c in cams]
        noise_rng = np.random.default_rng([spec.seed, attempt, 1])
        ldr = [capture(h, curve, spec.exposure, spec.noise_sigma, noise_rng) for h in hdr]
        if _exposes_both_ends(ldr):
            return Synthetic(spec, scene, cams, ldr, hdr, curve, attempt)
    raise RuntimeError(f"no scene with both under- and over-exposed pixels after {MAX_ATTEMPTS} draws")


# ---------------------------------------------------------------------------
# evaluation


def mu_pair(pred: np.ndarray, ref: np.ndarray):
    """Joint min-max normalization of (pred, ref) followed by the mu-law."""
    lo = min(float(pred.min()), float(ref.min()))
    hi = max(float(pred.max()), float(ref.max()))
    return mu_law(minmax_normalize(pred, lo, hi)), mu_law(minmax_normalize(ref, lo, hi))


def hdr_scores(pred: np.ndarray, ref: np.ndarray):
    """(psnr, ssim) in the mu-law domain after joint normalization."""
    a, b = mu_pair(pred, ref)
    return psnr(a, b), ssim(a, b)


def ldr_inverse_baseline(ldr_render: np.ndarray, curve: ResponseCurve, exposure: float) -> np.ndarray:
    """HDR estimate from an LDR image alone: inverse CRF divided by the exposure."""
    return invert_crf(curve, ldr_render) / exposure


@dataclass
class Report:
    rows: list  # (view, psnr, ssim)
    domain: str = "hdr"
    notes: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def summary(self) -> str:
        metric = "mu-law" if self.domain == "hdr" else "LDR"
        lines = [f"# {metric} evaluation over {len(self.rows)} view(s)"]
        lines += [f"# {n}" for n in self.notes]
        lines.append(f"mean_psnr = {self.mean_psnr:.6f}")
        lines.append(f"mean_ssim = {self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"


HDR_NOTES = (
    "prediction and reference share one min-max normalization before the mu-law (mu = 5000)",
    "one synthetic exposure per scene: aggregate over seeds rather than over exposure levels",
)


def evaluate(preds, refs=None, ldr_preds=None, ldr_refs=None, views=None) -> Report:
    """Score HDR predictions against references; without references, score LDR renders.

    ``preds`` are HDR renders at the held-out cameras. When ``refs`` is None
    the report falls back to plain PSNR/SSIM between ``ldr_preds`` and
    ``ldr_refs``.
    """
    if refs is not None:
        if len(preds) != len(refs):
            raise ValueError("prediction and reference counts differ")
        views = views if views is not None else list(range(len(preds)))
        rows = [(v, *hdr_scores(p, r)) for v, p, r in zip(views, preds, refs)]
        return Report(rows, "hdr", list(HDR_NOTES))
    if ldr_preds is None or ldr_refs is None:
        raise ValueError("without HDR references an LDR-only report needs LDR renders and captures")
    views = views if views is not None else list(range(len(ldr_preds)))
    rows = [(v, psnr(p, r), ssim(p, r)) for v, p, r in zip(views, ldr_preds, ldr_refs)]
    return Report(rows, "ldr", ["no HDR references available: LDR renders scored against LDR captures"])


def evaluate_model(model, cameras, refs=None, ldr_refs=None, views=None) -> Report:
    """Render a trained model at ``cameras`` and score it (see ``evaluate``)."""
    from .training import render_ldr

    hdr_scene = model.hdr_scene()
    if refs is not None:
        preds = [renderer.render(hdr_scene, c) for c in cameras]
        return evaluate(preds, refs, views=views)
    ldr_preds = [render_ldr(hdr_scene, model.curve, model.exposure, c) for c in cameras]
    return evaluate(None, None, ldr_preds, ldr_refs, views=views)


def baseline_report(model, cameras, refs, views=None) -> Report:
    """LDR-inverse baseline: invert the CRF on the model's own LDR render."""
    from .training import render_ldr

    hdr_scene = model.hdr_scene()
    preds = [
        ldr_inverse_baseline(render_ldr(hdr_scene, model.curve, model.exposure, c), model.curve, model.exposure)
        for c in cameras
    ]
    return evaluate(preds, refs, views=views)


def write_report(report: Report, out_dir, previews=None) -> None:
    """CSV ``view,psnr_mu,ssim_mu``, a text summary, and optional (name, image) previews as PPM."""
    from .cli import write_ppm, atomic_write_text

    os.makedirs(out_dir, exist_ok=True)
    lines = ["view,psnr_mu,ssim_mu"] + [f"{v},{p!r},{s!r}" for v, p, s in report.rows]
    atomic_write_text(os.path.join(out_dir, "report.csv"), "\n".join(lines) + "\n")
    atomic_write_text(os.path.join(out_dir, "summary.txt"), report.summary())
    for name, img in previews or []:
        write_ppm(os.path.join(out_dir, f"{name}.ppm"), reinhard_tonemap(img))


__all__ = [
    "PSNR_CAP", "Report", "Synthetic", "SyntheticSpec", "baseline_report", "capture", "evaluate",
    "evaluate_model", "generate", "hdr_scores", "ldr_inverse_baseline", "mu_pair", "psnr",
    "quantize8", "ring_cameras", "ssim", "write_report",
]
