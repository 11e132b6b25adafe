"""Gaussian scene containers, real spherical harmonics and the binary scene file."""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAX_SH_DEGREE = 3

# Real SH normalization constants, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SCENE_MAGIC = b"SEHDRSC1"
SCENE_VERSION = 1
_HEADER = struct.Struct("<8sIIIId")
assert _HEADER.size == 32


class SceneFormatError(ValueError):
    """Malformed, truncated or non-finite scene file."""


class ColorDomain(enum.IntEnum):
    LINEAR_EXPOSURE_SCALED = 1
    LINEAR_HDR = 2


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values at unit directions.

    ``dirs`` has shape (..., 3); the result has shape (..., (degree+1)**2)
    in the usual (l, m) order m = -l..l.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"sh degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (sh_coeff_count(degree),))
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh(sh, direction, degree: int) -> np.ndarray:
    """Evaluate one Gaussian's SH radiance (unclamped RGB) along ``direction``."""
    sh = np.asarray(sh, dtype=np.float64)
    if sh.shape != (sh_coeff_count(degree), 3):
        raise ValueError(
            f"expected {sh_coeff_count(degree)} RGB coefficients for degree {degree}, "
            f"got shape {sh.shape}"
        )
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("direction must be a unit vector")
    return sh_basis(direction, degree) @ sh


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions (..., 4) to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass
class Gaussian:
    """A single primitive. Mostly used for tests and inspection."""

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh: np.ndarray

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


def covariance(g: Gaussian) -> np.ndarray:
    """World-space covariance R S S^T R^T of one Gaussian."""
    r = quat_to_rotmat(g.rotation)
    m = r * np.asarray(g.scale, dtype=np.float64)[None, :]
    return m @ m.T


def covariances(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    r = quat_to_rotmat(rotations)
    m = r * np.asarray(scales, dtype=np.float64)[:, None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class GaussianSet:
    """Structure-of-arrays storage for N Gaussians.

    ``scales`` are positive lengths, ``rotations`` unit (w, x, y, z)
    quaternions, ``sh`` has shape (N, (L+1)**2, 3). ``exposure`` is the
    exposure time a LINEAR_EXPOSURE_SCALED set is aligned with.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = 1
    color_domain: ColorDomain = ColorDomain.LINEAR_HDR
    exposure: float = 0.0

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, sh_coeff_count(self.sh_degree), 3)
        self.color_domain = ColorDomain(self.color_domain)
        self.validate()

    def __len__(self) -> int:
        return len(self.means)

    def validate(self) -> None:
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise ValueError(f"unsupported sh degree {self.sh_degree}")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be strictly positive")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("rotations must be unit quaternions")
        if self.color_domain == ColorDomain.LINEAR_EXPOSURE_SCALED and not self.exposure > 0:
            raise ValueError("an exposure-scaled set needs a positive exposure time")

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            self.means[i].copy(),
            self.scales[i].copy(),
            self.rotations[i].copy(),
            float(self.opacity_logits[i]),
            self.sh[i].copy(),
        )

    def covariances(self) -> np.ndarray:
        return covariances(self.scales, self.rotations)

    def renormalize(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def with_radiance(self, sh: np.ndarray, color_domain: ColorDomain, exposure: float = 0.0) -> "GaussianSet":
        """Same geometry arrays (shared, not copied) with a different radiance block."""
        out = GaussianSet.__new__(GaussianSet)
        out.means = self.means
        out.scales = self.scales
        out.rotations = self.rotations
        out.opacity_logits = self.opacity_logits
        out.sh = np.asarray(sh, dtype=np.float64).reshape(self.sh.shape)
        out.sh_degree = self.sh_degree
        out.color_domain = ColorDomain(color_domain)
        out.exposure = float(exposure)
        return out

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.means.copy(),
            self.scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.sh.copy(),
            self.sh_degree,
            self.color_domain,
            self.exposure,
        )


@dataclass
class BracketedScene:
    """Shared geometry plus one log-radiance SH block per exposure.

    ``log_radiance`` has shape (N, n, (L+1)**2, 3); ``exposures`` is sorted
    ascending and ``exposures[base_index]`` is the capture exposure.
    """

    geometry: GaussianSet
    log_radiance: np.ndarray
    exposures: np.ndarray
    base_index: int = 0
    _linear: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.exposures = np.asarray(self.exposures, dtype=np.float64)
        if self.exposures.ndim != 1 or len(self.exposures) < 1:
            raise ValueError("need at least one exposure")
        if np.any(self.exposures <= 0):
            raise ValueError("exposures must be strictly positive")
        if np.any(np.diff(self.exposures) <= 0):
            raise ValueError("exposures must be distinct and sorted ascending")
        if not 0 <= self.base_index < len(self.exposures):
            raise ValueError("base_index out of range")
        expected = (len(self.geometry), len(self.exposures)) + self.geometry.sh.shape[1:]
        if self.log_radiance.shape != expected:
            raise ValueError(f"log_radiance shape {self.log_radiance.shape}, expected {expected}")

    @property
    def n_exposures(self) -> int:
        return len(self.exposures)

    @property
    def base_exposure(self) -> float:
        return float(self.exposures[self.base_index])

    def linear_radiance(self) -> np.ndarray:
        if self._linear is None:
            self._linear = np.exp(self.log_radiance)
        return self._linear

    def exposure_set(self, j: int) -> GaussianSet:
        """The Gaussians of exposure ``j`` in its own linear domain."""
        return self.geometry.with_radiance(
            self.linear_radiance()[:, j],
            ColorDomain.LINEAR_EXPOSURE_SCALED,
            float(self.exposures[j]),
        )


def _record_width(degree: int) -> int:
    return 3 + 3 + 4 + 1 + 3 * sh_coeff_count(degree)


def scene_to_bytes(s: GaussianSet) -> bytes:
    n = len(s)
    body = np.concatenate(
        [
            s.means,
            s.scales,
            s.rotations,
            s.opacity_logits[:, None],
            s.sh.reshape(n, 3 * s.sh.shape[1]),
        ],
        axis=1,
    ).astype("<f4")
    if not np.all(np.isfinite(body)):
        raise SceneFormatError("refusing to write non-finite scene values")
    header = _HEADER.pack(SCENE_MAGIC, SCENE_VERSION, n, s.sh_degree, int(s.color_domain), float(s.exposure))
    return header + body.tobytes()


def scene_from_bytes(data: bytes) -> GaussianSet:
    if len(data) < _HEADER.size:
        raise SceneFormatError("file shorter than the 32-byte header")
    magic, version, n, degree, domain, exposure = _HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise SceneFormatError(f"bad magic {magic!r}")
    if version != SCENE_VERSION:
        raise SceneFormatError(f"unsupported scene version {version}")
    if degree > MAX_SH_DEGREE:
        raise SceneFormatError(f"unsupported sh degree {degree}")
    try:
        domain = ColorDomain(domain)
    except ValueError as exc:
        raise SceneFormatError(f"unknown color domain tag {domain}") from exc
    width = _record_width(degree)
    need = _HEADER.size + 4 * width * n
    if len(data) < need:
        raise SceneFormatError(f"truncated body: header declares {n} Gaussians, file holds fewer")
    if len(data) > need:
        raise SceneFormatError("trailing bytes after scene body")
    body = np.frombuffer(data, dtype="<f4", count=width * n, offset=_HEADER.size).reshape(n, width)
    if not np.all(np.isfinite(body)):
        raise SceneFormatError("scene contains non-finite values")
    body = body.astype(np.float64)
    try:
        return GaussianSet(
            means=body[:, 0:3],
            scales=body[:, 3:6],
            rotations=body[:, 6:10],
            opacity_logits=body[:, 10],
            sh=body[:, 11:].reshape(n, sh_coeff_count(degree), 3),
            sh_degree=degree,
            color_domain=domain,
            exposure=exposure,
        )
    except ValueError as exc:
        raise SceneFormatError(str(exc)) from exc


def write_scene(s: GaussianSet, path) -> None:
    data = scene_to_bytes(s)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_scene(path) -> GaussianSet:
    with open(path, "rb") as fh:
        return scene_from_bytes(fh.read())
