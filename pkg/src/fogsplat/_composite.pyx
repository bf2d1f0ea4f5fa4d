# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled front-to-back alpha compositing over depth-sorted tile lists.

Mirrors ``_composite_py`` exactly in semantics; tiles are processed in
parallel (OpenMP) and each tile writes only its own pixels and its own
slice of the per-entry gradient buffer, so results do not depend on the
thread count.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double ALPHA_MAX = 0.99
cdef double ALPHA_MIN = 1.0 / 255.0
cdef double T_MIN = 1e-4
cdef double POWER_MIN = -4.5


cdef void _forward_tile(Py_ssize_t tile, int ntx, int ts, int width, int height,
                        const double[:, ::1] means2d, const double[:, ::1] conics,
                        const double[::1] opac, const double[:, ::1] feats,
                        const double[::1] bg, const cnp.int64_t[::1] ranges,
                        const cnp.int64_t[::1] entries, double[:, :, ::1] out,
                        double[:, ::1] t_final, cnp.int64_t[:, ::1] n_contrib) noexcept nogil:
    cdef Py_ssize_t F = feats.shape[1]
    cdef Py_ssize_t start = ranges[tile], stop = ranges[tile + 1]
    cdef int tx = tile % ntx, ty = tile // ntx
    cdef int x0 = tx * ts, y0 = ty * ts
    cdef int x1 = min(x0 + ts, width), y1 = min(y0 + ts, height)
    cdef int px, py
    cdef Py_ssize_t j, g, k, last
    cdef double T, dx, dy, power, alpha, test_T, w
    for py in range(y0, y1):
        for px in range(x0, x1):
            T = 1.0
            last = 0
            for j in range(start, stop):
                g = entries[j]
                dx = px - means2d[g, 0]
                dy = py - means2d[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                if power < POWER_MIN:
                    continue
                alpha = opac[g] * exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                test_T = T * (1.0 - alpha)
                if test_T < T_MIN:
                    break
                w = alpha * T
                for k in range(F):
                    out[py, px, k] += feats[g, k] * w
                T = test_T
                last = j - start + 1
            for k in range(F):
                out[py, px, k] += bg[k] * T
            t_final[py, px] = T
            n_contrib[py, px] = last


def forward(const double[:, ::1] means2d, const double[:, ::1] conics, const double[::1] opac,
            const double[:, ::1] feats, const double[::1] background,
            const cnp.int64_t[::1] ranges, const cnp.int64_t[::1] entries,
            int width, int height, int tile_size, int num_threads=1):
    cdef Py_ssize_t F = feats.shape[1]
    out_arr = np.zeros((height, width, F))
    tf_arr = np.ones((height, width))
    nc_arr = np.zeros((height, width), dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] t_final = tf_arr
    cdef cnp.int64_t[:, ::1] n_contrib = nc_arr
    cdef int ntx = (width + tile_size - 1) // tile_size
    cdef int nty = (height + tile_size - 1) // tile_size
    cdef Py_ssize_t tile
    for tile in prange(ntx * nty, nogil=True, num_threads=max(num_threads, 1), schedule="dynamic"):
        _forward_tile(tile, ntx, tile_size, width, height, means2d, conics, opac, feats,
                      background, ranges, entries, out, t_final, n_contrib)
    return out_arr, tf_arr, nc_arr


cdef void _backward_tile(Py_ssize_t tile, int ntx, int ts, int width, int height,
                         const double[:, ::1] means2d, const double[:, ::1] conics,
                         const double[::1] opac, const double[:, ::1] feats,
                         const double[::1] bg, const cnp.int64_t[::1] ranges,
                         const cnp.int64_t[::1] entries, const double[:, ::1] t_final,
                         const cnp.int64_t[:, ::1] n_contrib, const double[:, :, ::1] g_out,
                         const double[:, ::1] g_alpha, double[:, ::1] buf) noexcept nogil:
    cdef Py_ssize_t F = feats.shape[1]
    cdef Py_ssize_t start = ranges[tile]
    cdef int tx = tile % ntx, ty = tile // ntx
    cdef int x0 = tx * ts, y0 = ty * ts
    cdef int x1 = min(x0 + ts, width), y1 = min(y0 + ts, height)
    cdef int px, py
    cdef Py_ssize_t j, g, k
    cdef double T, Tf, dx, dy, power, G, a_raw, alpha, w, dalpha, dpow, ga
    cdef double* accum = <double*> malloc(F * sizeof(double))
    for py in range(y0, y1):
        for px in range(x0, x1):
            Tf = t_final[py, px]
            T = Tf
            ga = g_alpha[py, px]
            for k in range(F):
                accum[k] = bg[k]
            j = start + n_contrib[py, px] - 1
            while j >= start:
                g = entries[j]
                dx = px - means2d[g, 0]
                dy = py - means2d[g, 1]
                power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                if power < POWER_MIN:
                    j -= 1
                    continue
                G = exp(power)
                a_raw = opac[g] * G
                alpha = a_raw if a_raw < ALPHA_MAX else ALPHA_MAX
                if alpha < ALPHA_MIN:
                    j -= 1
                    continue
                T = T / (1.0 - alpha)
                w = alpha * T
                dalpha = 0.0
                for k in range(F):
                    buf[j, k] += w * g_out[py, px, k]
                    dalpha += g_out[py, px, k] * (feats[g, k] - accum[k])
                    accum[k] = alpha * feats[g, k] + (1.0 - alpha) * accum[k]
                dalpha = dalpha * T + ga * Tf / (1.0 - alpha)
                if a_raw < ALPHA_MAX:
                    buf[j, F] += G * dalpha
                    dpow = alpha * dalpha
                    buf[j, F + 1] += dpow * (conics[g, 0] * dx + conics[g, 1] * dy)
                    buf[j, F + 2] += dpow * (conics[g, 1] * dx + conics[g, 2] * dy)
                    buf[j, F + 3] += -0.5 * dx * dx * dpow
                    buf[j, F + 4] += -dx * dy * dpow
                    buf[j, F + 5] += -0.5 * dy * dy * dpow
                j -= 1
    free(accum)


def backward(const double[:, ::1] means2d, const double[:, ::1] conics, const double[::1] opac,
             const double[:, ::1] feats, const double[::1] background,
             const cnp.int64_t[::1] ranges, const cnp.int64_t[::1] entries,
             int width, int height, int tile_size,
             const double[:, ::1] t_final, const cnp.int64_t[:, ::1] n_contrib,
             const double[:, :, ::1] grad_out, const double[:, ::1] grad_alpha,
             int num_threads=1):
    """Per-entry gradients, columns [feats (F), opacity, mean x, mean y, conic a, b, c]."""
    cdef Py_ssize_t F = feats.shape[1]
    buf_arr = np.zeros((entries.shape[0], F + 6))
    cdef double[:, ::1] buf = buf_arr
    cdef int ntx = (width + tile_size - 1) // tile_size
    cdef int nty = (height + tile_size - 1) // tile_size
    cdef Py_ssize_t tile
    for tile in prange(ntx * nty, nogil=True, num_threads=max(num_threads, 1), schedule="dynamic"):
        _backward_tile(tile, ntx, tile_size, width, height, means2d, conics, opac, feats,
                       background, ranges, entries, t_final, n_contrib, grad_out, grad_alpha, buf)
    return buf_arr
