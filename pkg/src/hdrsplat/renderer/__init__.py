"""CPU splatting: projection, front-to-back alpha blending and its adjoint.

The blending kernels come from the compiled ``_raster_ext`` module when it
was built, otherwise from the numpy fallback. ``SEHDR_BACKEND=python``
forces the fallback; ``SEHDR_THREADS`` sets the row-parallel worker count
of the compiled path (default 1).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..scene import GaussianSet, covariances, sh_basis
from . import _raster_py

try:
    from . import _raster_ext
except ImportError:  # extension not built
    _raster_ext = None

NEAR_PLANE = 0.01
LOWPASS = 0.3
ETA_MIN = 1.0 / 255.0
T_MIN = 1e-4

AVAILABLE_BACKENDS = ("python",) + (("compiled",) if _raster_ext is not None else ())


def default_backend() -> str:
    choice = os.environ.get("SEHDR_BACKEND", "").strip().lower()
    if choice in ("python", "numpy"):
        return "python"
    if choice == "compiled" and _raster_ext is None:
        raise ImportError("SEHDR_BACKEND=compiled but the extension is not built")
    return "compiled" if _raster_ext is not None else "python"


BACKEND = default_backend()


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SEHDR_THREADS", "1")))
    except ValueError:
        return 1


class MissingForwardState(RuntimeError):
    pass


@dataclass
class Camera:
    """Pinhole camera: intrinsics ``K`` and world-to-camera ``R``, ``t``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.K[0, 0] > 0 and self.K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height) -> "Camera":
        """Camera at ``eye`` looking at ``target``; x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        K = np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ eye, width, height)

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["K"], d["R"], d["t"], d["width"], d["height"])


@dataclass
class SplatList:
    """Visible Gaussians in blending order (depth ascending, index tie-break).

    ``index`` maps each splat back to its Gaussian; ``basis`` holds the SH
    basis values along each splat's view direction.
    """

    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    basis: np.ndarray | None = None
    raw_color: np.ndarray | None = None
    n_gaussians: int = 0
    state: object = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.index)

    @property
    def conic(self) -> np.ndarray:
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        return np.ascontiguousarray(np.stack([c / det, -b / det, a / det], axis=1))

    def with_colors(self, color: np.ndarray) -> "SplatList":
        """Same splats carrying another color block (N_visible, C)."""
        return SplatList(
            self.index, self.mean2d, self.cov2d, self.depth, self.opacity,
            np.ascontiguousarray(color, dtype=np.float64), self.basis, None, self.n_gaussians,
        )


@dataclass
class Projection:
    """Camera-dependent geometry of a Gaussian set (independent of radiance)."""

    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    basis: np.ndarray
    n_gaussians: int


def project_geometry(means, scales, rotations, cam: Camera, sh_degree: int) -> Projection:
    means = np.asarray(means, dtype=np.float64)
    n = len(means)
    pc = means @ cam.R.T + cam.t
    z = pc[:, 2]
    keep = np.nonzero(z >= NEAR_PLANE)[0]
    order = keep[np.lexsort((keep, z[keep]))]
    pc = pc[order]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    fx, fy, cx, cy = cam.K[0, 0], cam.K[1, 1], cam.K[0, 2], cam.K[1, 2]
    mean2d = np.stack([fx * x / z + cx, fy * y / z + cy], axis=1)
    jac = np.zeros((len(order), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    cov3 = covariances(np.asarray(scales)[order], np.asarray(rotations)[order])
    t = jac @ cam.R
    cov2d = t @ cov3 @ np.swapaxes(t, -1, -2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    dirs = means[order] - cam.center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return Projection(order, np.ascontiguousarray(mean2d), cov2d, z.copy(), sh_basis(dirs, sh_degree), n)


def splats_from(proj: Projection, opacity_logits, sh) -> SplatList:
    """Attach view-evaluated colors (clamped at zero) and opacities to a projection."""
    idx = proj.index
    alpha = 1.0 / (1.0 + np.exp(-np.asarray(opacity_logits, dtype=np.float64)[idx]))
    raw = np.einsum("mb,mbc->mc", proj.basis, np.asarray(sh, dtype=np.float64)[idx])
    return SplatList(
        idx, proj.mean2d, proj.cov2d, proj.depth, np.ascontiguousarray(alpha),
        np.ascontiguousarray(np.maximum(raw, 0.0)), proj.basis, raw, proj.n_gaussians,
    )


def project(gs: GaussianSet, cam: Camera) -> SplatList:
    proj = project_geometry(gs.means, gs.scales, gs.rotations, cam, gs.sh_degree)
    return splats_from(proj, gs.opacity_logits, gs.sh)


def _row_chunks(height: int, threads: int):
    bounds = np.linspace(0, height, min(threads, height) + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


@dataclass
class _ForwardState:
    backend: str
    shape: tuple
    data: object = None


def rasterize(splats: SplatList, cam: Camera, backend: str | None = None, threads: int | None = None,
              eta_min: float = ETA_MIN, t_min: float = T_MIN) -> np.ndarray:
    """Front-to-back blend of ``splats.color`` into an (H, W, C) array."""
    backend = backend or BACKEND
    threads = threads or thread_count()
    h, w = cam.height, cam.width
    colors = np.ascontiguousarray(splats.color, dtype=np.float64)
    if colors.ndim == 1:
        colors = colors[:, None]
    n_ch = colors.shape[1]
    if len(splats) == 0:
        splats.state = _ForwardState(backend, (h, w, n_ch), (eta_min, t_min))
        return np.zeros((h, w, n_ch))
    mean2d = np.ascontiguousarray(splats.mean2d)
    conic = splats.conic
    opacity = np.ascontiguousarray(splats.opacity, dtype=np.float64)
    if backend == "python":
        image, _, data = _raster_py.forward(mean2d, conic, opacity, colors, h, w, eta_min, t_min)
        splats.state = _ForwardState("python", (h, w, n_ch), data)
        return image
    if backend != "compiled" or _raster_ext is None:
        raise ValueError(f"backend {backend!r} unavailable; have {AVAILABLE_BACKENDS}")
    image = np.zeros((h, w, n_ch))
    t_final = np.zeros((h, w))
    chunks = _row_chunks(h, threads)
    run = lambda r: _raster_ext.forward_rows(mean2d, conic, opacity, colors, image, t_final, r[0], r[1], eta_min, t_min)
    if len(chunks) == 1:
        run(chunks[0])
    else:
        with ThreadPoolExecutor(len(chunks)) as ex:
            list(ex.map(run, chunks))
    splats.state = _ForwardState("compiled", (h, w, n_ch), (eta_min, t_min))
    return image


@dataclass
class RasterGrads:
    color: np.ndarray  # (M, C), w.r.t. the blended (clamped) splat colors
    opacity: np.ndarray  # (M,), w.r.t. splat opacity alpha
    opacity_logit: np.ndarray  # (N,), scattered back to Gaussian order


def rasterize_backward(splats: SplatList, cam: Camera, g_image: np.ndarray, threads: int | None = None) -> RasterGrads:
    state = splats.state
    if not isinstance(state, _ForwardState):
        raise MissingForwardState("rasterize_backward needs the state of a preceding rasterize call")
    g_image = np.ascontiguousarray(g_image, dtype=np.float64)
    if g_image.ndim == 2:
        g_image = g_image[:, :, None]
    if g_image.shape != state.shape:
        raise ValueError(f"upstream gradient shape {g_image.shape} != image shape {state.shape}")
    m = len(splats)
    colors = np.ascontiguousarray(splats.color, dtype=np.float64).reshape(m, -1)
    n_ch = colors.shape[1]
    if m == 0:
        g_col, g_op = np.zeros((0, n_ch)), np.zeros(0)
    elif state.backend == "python":
        g_col, g_op = _raster_py.backward(colors, g_image, state.data)
    else:
        eta_min, t_min = state.data
        h = cam.height
        g_col_rows = np.zeros((h, m, n_ch))
        g_op_rows = np.zeros((h, m))
        args = (np.ascontiguousarray(splats.mean2d), splats.conic, np.ascontiguousarray(splats.opacity), colors, g_image)
        run = lambda r: _raster_ext.backward_rows(*args, g_col_rows, g_op_rows, r[0], r[1], eta_min, t_min)
        chunks = _row_chunks(h, threads or thread_count())
        if len(chunks) == 1:
            run(chunks[0])
        else:
            with ThreadPoolExecutor(len(chunks)) as ex:
                list(ex.map(run, chunks))
        # fixed row-order reduction, independent of the thread split
        g_col = np.zeros((m, n_ch))
        g_op = np.zeros(m)
        for y in range(h):
            g_col += g_col_rows[y]
            g_op += g_op_rows[y]
    alpha = splats.opacity
    g_logit = np.zeros(splats.n_gaussians)
    g_logit[splats.index] = g_op * alpha * (1.0 - alpha)
    return RasterGrads(g_col, g_op, g_logit)


def sh_backward(splats: SplatList, g_color: np.ndarray) -> np.ndarray:
    """Chain (M, 3) color gradients through the zero clamp and SH basis to (N, B, 3)."""
    if splats.basis is None or splats.raw_color is None:
        raise MissingForwardState("splats carry no SH basis; build them with project()")
    g = np.where(splats.raw_color > 0.0, g_color, 0.0)
    out = np.zeros((splats.n_gaussians, splats.basis.shape[1], 3))
    out[splats.index] = splats.basis[:, :, None] * g[:, None, :]
    return out


def render(gs: GaussianSet, cam: Camera, backend: str | None = None) -> np.ndarray:
    return rasterize(project(gs, cam), cam, backend=backend)


def render_backward(splats: SplatList, cam: Camera, g_image: np.ndarray):
    """Gradients (sh (N, B, 3), opacity_logit (N,)) of a projected GaussianSet render."""
    rg = rasterize_backward(splats, cam, g_image)
    return sh_backward(splats, rg.color), rg.opacity_logit
