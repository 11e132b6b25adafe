"""Pure-Python (numpy) blending kernels; same arithmetic order as the compiled ones.

Loops run over splats front to back and are vectorized over pixels, so
each pixel sees exactly the sequence of operations of the per-pixel loop.
"""

import numpy as np


def _pixel_grid(height, width):
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)


def _falloff(mean2d, conic, i, px, py):
    dx = px - mean2d[i, 0]
    dy = py - mean2d[i, 1]
    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
    return np.exp(power)


def forward(mean2d, conic, opacity, colors, height, width, eta_min, t_min):
    """Returns (image (H, W, C), final transmittance (H, W), per-splat (etas, trans, falloffs))."""
    px, py = _pixel_grid(height, width)
    n_pix = px.size
    m, n_ch = colors.shape
    image = np.zeros((n_pix, n_ch))
    T = np.ones(n_pix)
    active = np.ones(n_pix, dtype=bool)
    etas = np.zeros((m, n_pix))
    trans = np.zeros((m, n_pix))
    falloffs = np.zeros((m, n_pix))
    for i in range(m):
        g = _falloff(mean2d, conic, i, px, py)
        eta = opacity[i] * g
        use = active & (eta >= eta_min)
        w = np.where(use, eta * T, 0.0)
        image += np.where(use[:, None], colors[i][None, :] * w[:, None], 0.0)
        etas[i] = np.where(use, eta, 0.0)
        trans[i] = T
        falloffs[i] = g
        T = np.where(use, T * (1.0 - eta), T)
        active &= ~(use & (T < t_min))
    state = (etas, trans, falloffs)
    return image.reshape(height, width, n_ch), T.reshape(height, width), state


def backward(colors, g_image, state):
    etas, trans, falloffs = state
    m, n_ch = colors.shape
    g = g_image.reshape(-1, n_ch)
    acc = np.zeros_like(g)
    g_colors = np.zeros((m, n_ch))
    g_opacity = np.zeros(m)
    for i in range(m - 1, -1, -1):
        eta = etas[i]
        T = trans[i]
        used = eta > 0
        wt = eta * T
        g_colors[i] = np.sum(g * wt[:, None], axis=0)
        g_eta = np.sum(g * T[:, None] * (colors[i][None, :] - acc), axis=1)
        g_opacity[i] = np.sum(np.where(used, g_eta * falloffs[i], 0.0))
        acc = np.where(used[:, None], colors[i][None, :] * eta[:, None] + (1.0 - eta[:, None]) * acc, acc)
    return g_colors, g_opacity
