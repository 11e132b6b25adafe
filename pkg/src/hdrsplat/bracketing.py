"""Deriving per-exposure radiance channels from a base Gaussian set."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import BracketedScene, ColorDomain, GaussianSet

RESIDUAL_EPS = 1e-12


@dataclass(frozen=True)
class ExposurePlan:
    """Capture exposure plus the multipliers of the synthesized exposures."""

    base_exposure: float
    ratios: tuple[float, ...] = (0.25, 4.0)

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        object.__setattr__(self, "ratios", ratios)
        if not self.base_exposure > 0:
            raise ValueError("base exposure must be positive")
        if not ratios:
            raise ValueError("an exposure plan needs at least one extra exposure")
        if any(not r > 0 for r in ratios):
            raise ValueError(f"exposure ratios must be positive, got {ratios}")
        if any(r == 1.0 for r in ratios):
            raise ValueError("ratio 1 duplicates the base exposure")
        if len(set(ratios)) != len(ratios):
            raise ValueError("exposure ratios must be distinct")

    @property
    def n(self) -> int:
        return len(self.ratios) + 1

    def all_ratios(self) -> np.ndarray:
        """Sorted multipliers including the base (1.0)."""
        return np.sort(np.array((1.0,) + self.ratios))

    @property
    def base_index(self) -> int:
        return int(np.searchsorted(self.all_ratios(), 1.0))

    def exposures(self) -> np.ndarray:
        return self.base_exposure * self.all_ratios()

    def log_offsets(self) -> np.ndarray:
        """log(dt_j) - log(dt_1) per sorted exposure, exactly 0 for the base."""
        base = math.log(self.base_exposure)
        out = np.array([math.log(t) - base for t in self.exposures()])
        out[self.base_index] = 0.0
        return out

    @classmethod
    def random(cls, base_exposure: float, n: int, seed: int, lo: float = 1 / 8, hi: float = 8.0) -> "ExposurePlan":
        """n-1 log-uniform ratios on [lo, hi] (seeded)."""
        rng = np.random.default_rng(seed)
        ratios: list[float] = []
        while len(ratios) < n - 1:
            r = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            if r != 1.0 and r not in ratios:
                ratios.append(r)
        return cls(base_exposure, tuple(ratios))


def bracket_log(log_base: np.ndarray, plan: ExposurePlan) -> np.ndarray:
    """Stack (N, n, B, 3) of log radiance; the base slot is a copy of ``log_base``."""
    offsets = plan.log_offsets()
    out = log_base[:, None, :, :] + offsets[None, :, None, None]
    out[:, plan.base_index] = log_base
    return out


def bracket(base: GaussianSet, plan: ExposurePlan) -> BracketedScene:
    if base.color_domain != ColorDomain.LINEAR_EXPOSURE_SCALED:
        raise ValueError("bracketing needs a set in exposure-scaled linear radiance")
    if not math.isclose(base.exposure, plan.base_exposure, rel_tol=1e-12):
        raise ValueError(f"base set is aligned with dt={base.exposure}, plan says {plan.base_exposure}")
    if np.any(base.sh <= 0):
        raise ValueError("log-domain bracketing needs strictly positive radiance coefficients")
    return BracketedScene(
        geometry=base,
        log_radiance=bracket_log(np.log(base.sh), plan),
        exposures=plan.exposures(),
        base_index=plan.base_index,
    )


def exposure_consistency_residual(b: BracketedScene) -> float:
    """Largest relative deviation of c_j / dt_j from the base c_1 / dt_1."""
    lin = b.linear_radiance()
    per_time = lin / b.exposures[None, :, None, None]
    ref = per_time[:, b.base_index : b.base_index + 1]
    if lin.size == 0:
        return 0.0
    return float(np.max(np.abs(per_time - ref) / np.maximum(ref, RESIDUAL_EPS)))
