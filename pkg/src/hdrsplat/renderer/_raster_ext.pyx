# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel alpha-blending kernels.

Both kernels work on a half-open row range so the caller can split an
image across threads; rows never share output memory.
"""

from libc.math cimport exp
from libc.stdlib cimport malloc, free


def forward_rows(const double[:, ::1] mean2d, const double[:, ::1] conic,
                 const double[::1] opacity, const double[:, ::1] colors,
                 double[:, :, ::1] image, double[:, ::1] t_final,
                 int row0, int row1, double eta_min, double t_min):
    cdef Py_ssize_t m = mean2d.shape[0]
    cdef Py_ssize_t n_ch = colors.shape[1]
    cdef Py_ssize_t width = image.shape[1]
    cdef Py_ssize_t x, y, i, ch
    cdef double dx, dy, power, eta, w, T
    with nogil:
        for y in range(row0, row1):
            for x in range(width):
                T = 1.0
                for i in range(m):
                    dx = x - mean2d[i, 0]
                    dy = y - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    eta = opacity[i] * exp(power)
                    if eta < eta_min:
                        continue
                    w = eta * T
                    for ch in range(n_ch):
                        image[y, x, ch] += colors[i, ch] * w
                    T = T * (1.0 - eta)
                    if T < t_min:
                        break
                t_final[y, x] = T


def backward_rows(const double[:, ::1] mean2d, const double[:, ::1] conic,
                  const double[::1] opacity, const double[:, ::1] colors,
                  const double[:, :, ::1] g_image,
                  double[:, :, ::1] g_colors_rows, double[:, ::1] g_opacity_rows,
                  int row0, int row1, double eta_min, double t_min):
    """Per-row partial gradients: g_colors_rows[y, i, ch], g_opacity_rows[y, i]."""
    cdef Py_ssize_t m = mean2d.shape[0]
    cdef Py_ssize_t n_ch = colors.shape[1]
    cdef Py_ssize_t width = g_image.shape[1]
    cdef Py_ssize_t x, y, i, ch, k, cnt
    cdef double dx, dy, power, g, eta, T, g_eta
    cdef Py_ssize_t *idx = <Py_ssize_t *> malloc(max(m, 1) * sizeof(Py_ssize_t))
    cdef double *etas = <double *> malloc(max(m, 1) * sizeof(double))
    cdef double *falloff = <double *> malloc(max(m, 1) * sizeof(double))
    cdef double *trans = <double *> malloc(max(m, 1) * sizeof(double))
    cdef double *acc = <double *> malloc(max(n_ch, 1) * sizeof(double))
    if idx == NULL or etas == NULL or falloff == NULL or trans == NULL or acc == NULL:
        free(idx); free(etas); free(falloff); free(trans); free(acc)
        raise MemoryError()
    try:
        with nogil:
            for y in range(row0, row1):
                for x in range(width):
                    T = 1.0
                    cnt = 0
                    for i in range(m):
                        dx = x - mean2d[i, 0]
                        dy = y - mean2d[i, 1]
                        power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                        g = exp(power)
                        eta = opacity[i] * g
                        if eta < eta_min:
                            continue
                        idx[cnt] = i
                        etas[cnt] = eta
                        falloff[cnt] = g
                        trans[cnt] = T
                        cnt = cnt + 1
                        T = T * (1.0 - eta)
                        if T < t_min:
                            break
                    for ch in range(n_ch):
                        acc[ch] = 0.0
                    for k in range(cnt - 1, -1, -1):
                        i = idx[k]
                        eta = etas[k]
                        T = trans[k]
                        g_eta = 0.0
                        for ch in range(n_ch):
                            g_colors_rows[y, i, ch] += g_image[y, x, ch] * eta * T
                            g_eta = g_eta + g_image[y, x, ch] * T * (colors[i, ch] - acc[ch])
                            acc[ch] = colors[i, ch] * eta + (1.0 - eta) * acc[ch]
                        g_opacity_rows[y, i] += g_eta * falloff[k]
    finally:
        free(idx); free(etas); free(falloff); free(trans); free(acc)
