"""Camera response curves, curve selection and HDR tone mapping."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CRF_EPS = 1e-6
MU = 5000.0
DEFAULT_SAMPLES = 1024
SMOOTHNESS_WEIGHT = 10.0


class ImageDomain(enum.Enum):
    LDR = "ldr"
    LINEAR_EXPOSURE_SCALED = "linear-exposure-scaled"
    LINEAR_HDR = "linear-hdr"


@dataclass
class ImagePlane:
    pixels: np.ndarray
    domain: ImageDomain = ImageDomain.LINEAR_HDR
    exposure: float = 0.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 raster, got {self.pixels.shape}")
        if self.domain == ImageDomain.LDR:
            if self.pixels.min(initial=0.0) < 0 or self.pixels.max(initial=0.0) > 1:
                raise ValueError("LDR pixels must lie in [0, 1]")
        elif self.pixels.min(initial=0.0) < 0:
            raise ValueError("linear pixels must be nonnegative")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ResponseCurve:
    """Monotone response f sampled uniformly on [0, 1]."""

    name: str
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or len(s) < 2:
            raise ValueError(f"curve {self.name!r}: need at least two samples")
        if np.any(np.diff(s) <= 0):
            raise ValueError(f"curve {self.name!r}: samples must be strictly increasing")
        if abs(s[0]) > 1e-6 or abs(s[-1] - 1.0) > 1e-6:
            raise ValueError(f"curve {self.name!r}: endpoints must be f(0)=0, f(1)=1")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_function(cls, name: str, fn, k: int = DEFAULT_SAMPLES) -> "ResponseCurve":
        x = np.linspace(0.0, 1.0, k)
        s = np.asarray(fn(x), dtype=np.float64)
        s = (s - s[0]) / (s[-1] - s[0])
        s[0], s[-1] = 0.0, 1.0
        return cls(name, s)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.samples))

    def __call__(self, x):
        return apply_crf(self, x)

    def __eq__(self, other):
        return (
            isinstance(other, ResponseCurve)
            and self.name == other.name
            and np.array_equal(self.samples, other.samples)
        )

    def __hash__(self):
        return hash((self.name, self.samples.tobytes()))


def apply_crf(curve: ResponseCurve, x, with_slope: bool = False):
    """Piecewise-linear f(x); inputs outside [0, 1] saturate.

    With ``with_slope`` also returns df/dx (segment slope, zero where the
    input was clamped).
    """
    s = curve.samples
    k1 = len(s) - 1
    x = np.asarray(x, dtype=np.float64)
    bad = np.isnan(x)
    xc = np.clip(np.where(bad, 0.0, x), 0.0, 1.0)
    t = xc * k1
    i = np.minimum(np.floor(t).astype(np.intp), k1 - 1)
    lo = s[i]
    delta = s[i + 1] - lo
    y = lo + (t - i) * delta
    if np.any(bad):
        # NaN propagates so callers can detect divergence
        y = np.where(bad, np.nan, y)
    if not with_slope:
        return y
    slope = np.where((x >= 0.0) & (x <= 1.0), delta * k1, 0.0)
    return y, slope


def invert_crf(curve: ResponseCurve, z):
    """f^{-1}(z) for z in [0, 1] (clamped)."""
    z = np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0)
    return np.interp(z, curve.samples, curve.grid)


def _gamma(g):
    return lambda x: x ** (1.0 / g)


def _sigmoid(a):
    return lambda x: 1.0 / (1.0 + np.exp(-a * (x - 0.5)))


def _film(p, h):
    # Hill-type toe/shoulder curve, pivot h.
    def fn(x):
        xp = x**p
        return xp / (xp + (h * (1.0 - x)) ** p + 1e-300)

    return fn


def builtin_curves(k: int = DEFAULT_SAMPLES) -> list[ResponseCurve]:
    specs = [
        ("identity", lambda x: x),
        ("gamma-1.8", _gamma(1.8)),
        ("gamma-2.2", _gamma(2.2)),
        ("gamma-2.4", _gamma(2.4)),
        ("sigmoid-6", _sigmoid(6.0)),
        ("sigmoid-10", _sigmoid(10.0)),
        ("film-a", _film(1.6, 0.6)),
        ("film-b", _film(2.2, 0.45)),
    ]
    return [ResponseCurve.from_function(name, fn, k) for name, fn in specs]


class CurveDatabase:
    def __init__(self, curves):
        self.curves = list(curves)
        if not self.curves:
            raise ValueError("curve database is empty")

    def __len__(self):
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    def __getitem__(self, name: str) -> ResponseCurve:
        for c in self.curves:
            if c.name == name:
                return c
        raise KeyError(name)

    def names(self) -> list[str]:
        return [c.name for c in self.curves]

    @classmethod
    def builtin(cls, k: int = DEFAULT_SAMPLES) -> "CurveDatabase":
        return cls(builtin_curves(k))

    @classmethod
    def load(cls, path) -> "CurveDatabase":
        return cls(read_curve_file(path))

    def save(self, path) -> None:
        write_curve_file(self.curves, path)


def read_curve_file(path) -> list[ResponseCurve]:
    """Blocks of ``name``, ``K`` and K ascending floats, separated by blank lines."""
    text = Path(path).read_text()
    curves = []
    for block in text.strip().split("\n\n"):
        lines = [ln.strip() for ln in block.strip().splitlines() if ln.strip()]
        if not lines:
            continue
        if len(lines) < 2:
            raise ValueError(f"incomplete curve block: {lines!r}")
        name, k = lines[0], int(lines[1])
        values = np.array(" ".join(lines[2:]).split(), dtype=np.float64)
        if len(values) != k:
            raise ValueError(f"curve {name!r}: header says {k} samples, found {len(values)}")
        curves.append(ResponseCurve(name, values))
    return curves


def write_curve_file(curves, path) -> None:
    blocks = []
    for c in curves:
        body = "\n".join(repr(float(v)) for v in c.samples)
        blocks.append(f"{c.name}\n{len(c.samples)}\n{body}")
    Path(path).write_text("\n\n".join(blocks) + "\n")


def curve_roughness(curve: ResponseCurve) -> float:
    return float(np.sum(np.diff(curve.samples, 2) ** 2))


def crf_score(curve: ResponseCurve, probe, smoothness_weight: float = SMOOTHNESS_WEIGHT) -> float:
    """Inverse dynamic range over the probe's 1%/99% quantiles minus a roughness penalty."""
    px = np.asarray(probe.pixels if isinstance(probe, ImagePlane) else probe, dtype=np.float64)
    q01, q99 = np.clip(np.quantile(px.ravel(), [0.01, 0.99]), CRF_EPS, 1.0 - CRF_EPS)
    lo = max(float(invert_crf(curve, q01)), CRF_EPS * CRF_EPS)
    hi = max(float(invert_crf(curve, q99)), CRF_EPS * CRF_EPS)
    return math.log(hi / lo) - smoothness_weight * curve_roughness(curve)


def select_crf(db: CurveDatabase, probe, smoothness_weight: float = SMOOTHNESS_WEIGHT) -> ResponseCurve:
    if len(db) == 0:
        raise ValueError("curve database is empty")
    best, best_score = None, -math.inf
    for curve in sorted(db, key=lambda c: c.name):
        score = crf_score(curve, probe, smoothness_weight)
        if score > best_score:
            best, best_score = curve, score
    return best


def mu_law(e, mu: float = MU):
    e = np.asarray(e, dtype=np.float64)
    return np.log1p(mu * e) / np.log1p(mu)


def minmax_normalize(x, lo=None, hi=None):
    x = np.asarray(x, dtype=np.float64)
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def reinhard_tonemap(img):
    """Global Reinhard x/(1+x) after min-max normalization; output in [0, 0.5]."""
    px = img.pixels if isinstance(img, ImagePlane) else np.asarray(img, dtype=np.float64)
    e = minmax_normalize(px)
    out = e / (1.0 + e)
    if isinstance(img, ImagePlane):
        return ImagePlane(out, ImageDomain.LDR)
    return out
