# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled compositing kernels.

Pixel-major: each pixel walks the depth-ordered list of Gaussians whose bbox
overlaps its 16x16 tile. Accumulation order is fixed (tile, pixel, depth), so
results are deterministic. All kernels release the GIL.
"""

import numpy as np
from libc.math cimport exp
from libc.stdlib cimport malloc, free

DEF TILE = 16


cdef struct TileLists:
    int tiles_x
    int tiles_y
    int *offsets
    int *items


cdef int _build_tiles(int[:, ::1] bbox, int width, int height, TileLists *tl) nogil:
    cdef int n = bbox.shape[0]
    cdef int tx = (width + TILE - 1) // TILE
    cdef int ty = (height + TILE - 1) // TILE
    cdef int i, x, y, t, total = 0
    cdef int *count
    tl.tiles_x = tx
    tl.tiles_y = ty
    tl.offsets = <int *> malloc((tx * ty + 1) * sizeof(int))
    count = <int *> malloc((tx * ty + 1) * sizeof(int))
    for t in range(tx * ty + 1):
        tl.offsets[t] = 0
        count[t] = 0
    for i in range(n):
        if bbox[i, 0] >= bbox[i, 1] or bbox[i, 2] >= bbox[i, 3]:
            continue
        for y in range(bbox[i, 2] // TILE, (bbox[i, 3] - 1) // TILE + 1):
            for x in range(bbox[i, 0] // TILE, (bbox[i, 1] - 1) // TILE + 1):
                count[y * tx + x + 1] += 1
                total += 1
    for t in range(tx * ty):
        tl.offsets[t + 1] = tl.offsets[t] + count[t + 1]
        count[t + 1] = 0
    tl.items = <int *> malloc((total + 1) * sizeof(int))
    for i in range(n):
        if bbox[i, 0] >= bbox[i, 1] or bbox[i, 2] >= bbox[i, 3]:
            continue
        for y in range(bbox[i, 2] // TILE, (bbox[i, 3] - 1) // TILE + 1):
            for x in range(bbox[i, 0] // TILE, (bbox[i, 1] - 1) // TILE + 1):
                t = y * tx + x
                tl.items[tl.offsets[t] + count[t + 1]] = i
                count[t + 1] += 1
    free(count)
    return total


cdef void _free_tiles(TileLists *tl) nogil:
    free(tl.offsets)
    free(tl.items)


cdef inline bint _inside(int[:, ::1] bbox, int i, int px, int py) nogil:
    return bbox[i, 0] <= px < bbox[i, 1] and bbox[i, 2] <= py < bbox[i, 3]


cdef struct PixelState:
    double rgb[3]
    double trans
    int n


cdef inline void _pixel_forward(
    int px, int py, int start, int stop, int *items,
    double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity, double[:, ::1] color,
    int[:, ::1] bbox, double alpha_min, double alpha_max, double t_stop,
    long long *hits, int *buf_i, double *buf_a, double *buf_t, double *buf_g, double *buf_dx,
    double *buf_dy, PixelState *st,
) nogil:
    # Records contributors into the buffers when they are not NULL.
    cdef int k, i
    cdef double dx, dy, power, g, raw, alpha, test, w
    cdef double fx = px + 0.5
    cdef double fy = py + 0.5
    st.rgb[0] = 0.0
    st.rgb[1] = 0.0
    st.rgb[2] = 0.0
    st.trans = 1.0
    st.n = 0
    for k in range(start, stop):
        i = items[k]
        if not _inside(bbox, i, px, py):
            continue
        dx = fx - mean2d[i, 0]
        dy = fy - mean2d[i, 1]
        power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
        g = exp(power)
        raw = opacity[i] * g
        alpha = raw if raw < alpha_max else alpha_max
        if alpha < alpha_min:
            continue
        if hits != NULL:
            hits[i] += 1
        test = st.trans * (1.0 - alpha)
        if test < t_stop:
            break
        w = alpha * st.trans
        st.rgb[0] += w * color[i, 0]
        st.rgb[1] += w * color[i, 1]
        st.rgb[2] += w * color[i, 2]
        if buf_i != NULL:
            buf_i[st.n] = i
            buf_a[st.n] = alpha
            buf_t[st.n] = st.trans
            # zero gaussian value marks a clamped alpha (no derivative through the kernel)
            buf_g[st.n] = g if raw < alpha_max else 0.0
            buf_dx[st.n] = dx
            buf_dy[st.n] = dy
        st.trans = test
        st.n += 1


def composite_forward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
                      double[:, ::1] color, int[:, ::1] bbox, int width, int height,
                      background, double alpha_min, double alpha_max, double t_stop):
    cdef int n = opacity.shape[0]
    image_arr = np.zeros((height, width, 3))
    trans_arr = np.ones((height, width))
    hits_arr = np.zeros(n, dtype=np.int64)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] trans = trans_arr
    cdef long long[::1] hits = hits_arr
    cdef double bg0 = background[0], bg1 = background[1], bg2 = background[2]
    cdef TileLists tl
    cdef PixelState st
    cdef int tx, ty, px, py, t
    cdef long long *hits_ptr = &hits[0] if n > 0 else NULL
    with nogil:
        _build_tiles(bbox, width, height, &tl)
        for ty in range(tl.tiles_y):
            for tx in range(tl.tiles_x):
                t = ty * tl.tiles_x + tx
                for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                    for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                        _pixel_forward(px, py, tl.offsets[t], tl.offsets[t + 1], tl.items,
                                       mean2d, conic, opacity, color, bbox,
                                       alpha_min, alpha_max, t_stop, hits_ptr,
                                       NULL, NULL, NULL, NULL, NULL, NULL, &st)
                        image[py, px, 0] = st.rgb[0] + st.trans * bg0
                        image[py, px, 1] = st.rgb[1] + st.trans * bg1
                        image[py, px, 2] = st.rgb[2] + st.trans * bg2
                        trans[py, px] = st.trans
        _free_tiles(&tl)
    return image_arr, trans_arr, hits_arr


cdef class _Buffers:
    cdef int *idx
    cdef double *alpha
    cdef double *tb
    cdef double *gauss
    cdef double *dx
    cdef double *dy

    def __cinit__(self, int n):
        n = max(n, 1)
        self.idx = <int *> malloc(n * sizeof(int))
        self.alpha = <double *> malloc(n * sizeof(double))
        self.tb = <double *> malloc(n * sizeof(double))
        self.gauss = <double *> malloc(n * sizeof(double))
        self.dx = <double *> malloc(n * sizeof(double))
        self.dy = <double *> malloc(n * sizeof(double))

    def __dealloc__(self):
        free(self.idx)
        free(self.alpha)
        free(self.tb)
        free(self.gauss)
        free(self.dx)
        free(self.dy)


def composite_backward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
                       double[:, ::1] color, int[:, ::1] bbox, int width, int height,
                       background, double alpha_min, double alpha_max, double t_stop,
                       double[:, :, ::1] grad_image):
    cdef int n = opacity.shape[0]
    g_mean_arr = np.zeros((n, 2))
    g_cov_arr = np.zeros((n, 3))
    g_op_arr = np.zeros(n)
    g_col_arr = np.zeros((n, 3))
    cdef double[:, ::1] g_mean = g_mean_arr
    cdef double[:, ::1] g_cov = g_cov_arr
    cdef double[::1] g_op = g_op_arr
    cdef double[:, ::1] g_col = g_col_arr
    cdef double bg0 = background[0], bg1 = background[1], bg2 = background[2]
    cdef _Buffers buf = _Buffers(n)
    cdef TileLists tl
    cdef PixelState st
    cdef int tx, ty, px, py, t, k, i, c
    cdef double after[3]
    cdef double gl[3]
    cdef double a, tb, w, dca, d_alpha, d_power, qd0, qd1
    with nogil:
        _build_tiles(bbox, width, height, &tl)
        for ty in range(tl.tiles_y):
            for tx in range(tl.tiles_x):
                t = ty * tl.tiles_x + tx
                for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                    for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                        _pixel_forward(px, py, tl.offsets[t], tl.offsets[t + 1], tl.items,
                                       mean2d, conic, opacity, color, bbox,
                                       alpha_min, alpha_max, t_stop, NULL,
                                       buf.idx, buf.alpha, buf.tb, buf.gauss, buf.dx, buf.dy, &st)
                        gl[0] = grad_image[py, px, 0]
                        gl[1] = grad_image[py, px, 1]
                        gl[2] = grad_image[py, px, 2]
                        after[0] = st.trans * bg0
                        after[1] = st.trans * bg1
                        after[2] = st.trans * bg2
                        for k in range(st.n - 1, -1, -1):
                            i = buf.idx[k]
                            a = buf.alpha[k]
                            tb = buf.tb[k]
                            w = a * tb
                            d_alpha = 0.0
                            for c in range(3):
                                dca = tb * color[i, c] - after[c] / (1.0 - a)
                                d_alpha += gl[c] * dca
                                g_col[i, c] += gl[c] * w
                                after[c] += w * color[i, c]
                            if buf.gauss[k] == 0.0:
                                continue
                            d_power = d_alpha * a
                            qd0 = conic[i, 0] * buf.dx[k] + conic[i, 1] * buf.dy[k]
                            qd1 = conic[i, 1] * buf.dx[k] + conic[i, 2] * buf.dy[k]
                            g_mean[i, 0] += d_power * qd0
                            g_mean[i, 1] += d_power * qd1
                            g_cov[i, 0] += 0.5 * d_power * qd0 * qd0
                            g_cov[i, 1] += d_power * qd0 * qd1
                            g_cov[i, 2] += 0.5 * d_power * qd1 * qd1
                            g_op[i] += d_alpha * buf.gauss[k]
        _free_tiles(&tl)
    return g_mean_arr, g_cov_arr, g_op_arr, g_col_arr


cdef inline void _pair_jacobian(
    int i, int k, int d, _Buffers buf, double[:, ::1] conic, double[:, ::1] color,
    double[:, :, ::1] proj_jac, double[:, :, ::1] color_jac, double *after, double *out,
) nogil:
    # out is 3 x d, row-major
    cdef int c, m
    cdef double a = buf.alpha[k]
    cdef double tb = buf.tb[k]
    cdef double w = a * tb
    cdef double qd0, qd1, s, dca
    cdef double f[5]
    cdef double dalpha[16]
    if buf.gauss[k] == 0.0:
        for m in range(d):
            dalpha[m] = 0.0
    else:
        qd0 = conic[i, 0] * buf.dx[k] + conic[i, 1] * buf.dy[k]
        qd1 = conic[i, 1] * buf.dx[k] + conic[i, 2] * buf.dy[k]
        f[0] = qd0
        f[1] = qd1
        f[2] = 0.5 * qd0 * qd0
        f[3] = qd0 * qd1
        f[4] = 0.5 * qd1 * qd1
        for m in range(d):
            s = f[0] * proj_jac[i, 0, m]
            s = s + f[1] * proj_jac[i, 1, m]
            s = s + f[2] * proj_jac[i, 2, m]
            s = s + f[3] * proj_jac[i, 3, m]
            s = s + f[4] * proj_jac[i, 4, m]
            dalpha[m] = a * s
    for c in range(3):
        dca = tb * color[i, c] - after[c] / (1.0 - a)
        for m in range(d):
            out[c * d + m] = dca * dalpha[m] + w * color_jac[i, c, m]


def fisher_accumulate(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
                      double[:, ::1] color, int[:, ::1] bbox, int width, int height,
                      background, double alpha_min, double alpha_max, double t_stop,
                      double[:, :, ::1] proj_jac, double[:, :, ::1] color_jac,
                      double[:, :, ::1] fisher, long long[::1] hits):
    cdef int n = opacity.shape[0]
    cdef int d = proj_jac.shape[2]
    if d > 16:
        raise ValueError("parameter block too large")
    cdef double bg0 = background[0], bg1 = background[1], bg2 = background[2]
    cdef _Buffers buf = _Buffers(n)
    cdef TileLists tl
    cdef PixelState st
    cdef int tx, ty, px, py, t, k, i, c, m, l
    cdef double after[3]
    cdef double jac[48]
    cdef double w, row
    cdef long long *hits_ptr = &hits[0] if n > 0 else NULL
    with nogil:
        _build_tiles(bbox, width, height, &tl)
        for ty in range(tl.tiles_y):
            for tx in range(tl.tiles_x):
                t = ty * tl.tiles_x + tx
                for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                    for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                        _pixel_forward(px, py, tl.offsets[t], tl.offsets[t + 1], tl.items,
                                       mean2d, conic, opacity, color, bbox,
                                       alpha_min, alpha_max, t_stop, hits_ptr,
                                       buf.idx, buf.alpha, buf.tb, buf.gauss, buf.dx, buf.dy, &st)
                        after[0] = st.trans * bg0
                        after[1] = st.trans * bg1
                        after[2] = st.trans * bg2
                        for k in range(st.n - 1, -1, -1):
                            i = buf.idx[k]
                            _pair_jacobian(i, k, d, buf, conic, color, proj_jac, color_jac, after, jac)
                            for c in range(3):
                                for m in range(d):
                                    row = jac[c * d + m]
                                    for l in range(d):
                                        fisher[i, m, l] += row * jac[c * d + l]
                            w = buf.alpha[k] * buf.tb[k]
                            for c in range(3):
                                after[c] += w * color[i, c]
        _free_tiles(&tl)


def pixel_jacobians(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
                    double[:, ::1] color, int[:, ::1] bbox, int width, int height,
                    background, double alpha_min, double alpha_max, double t_stop,
                    double[:, :, ::1] proj_jac, double[:, :, ::1] color_jac):
    cdef int n = opacity.shape[0]
    cdef int d = proj_jac.shape[2]
    if d > 16:
        raise ValueError("parameter block too large")
    _, _, hits_arr = composite_forward(mean2d, conic, opacity, color, bbox, width, height,
                                       background, alpha_min, alpha_max, t_stop)
    # upper bound: terminating encounters are counted as hits but emit no Jacobian
    cdef long long total = int(hits_arr.sum())
    pix_arr = np.zeros(total, dtype=np.int64)
    gid_arr = np.zeros(total, dtype=np.int64)
    jac_arr = np.zeros((total, 3, d))
    cdef long long[::1] pix = pix_arr
    cdef long long[::1] gid = gid_arr
    cdef double[:, :, ::1] jout = jac_arr
    cdef double bg0 = background[0], bg1 = background[1], bg2 = background[2]
    cdef _Buffers buf = _Buffers(n)
    cdef TileLists tl
    cdef PixelState st
    cdef int tx, ty, px, py, t, k, i, c, m
    cdef long long pos = 0, base
    cdef double after[3]
    cdef double jac[48]
    cdef double w
    with nogil:
        _build_tiles(bbox, width, height, &tl)
        for py in range(height):
            for px in range(width):
                t = (py // TILE) * tl.tiles_x + px // TILE
                _pixel_forward(px, py, tl.offsets[t], tl.offsets[t + 1], tl.items,
                               mean2d, conic, opacity, color, bbox,
                               alpha_min, alpha_max, t_stop, NULL,
                               buf.idx, buf.alpha, buf.tb, buf.gauss, buf.dx, buf.dy, &st)
                after[0] = st.trans * bg0
                after[1] = st.trans * bg1
                after[2] = st.trans * bg2
                base = pos
                for k in range(st.n - 1, -1, -1):
                    i = buf.idx[k]
                    _pair_jacobian(i, k, d, buf, conic, color, proj_jac, color_jac, after, jac)
                    pix[base + k] = py * width + px
                    gid[base + k] = i
                    for c in range(3):
                        for m in range(d):
                            jout[base + k, c, m] = jac[c * d + m]
                    w = buf.alpha[k] * buf.tb[k]
                    for c in range(3):
                        after[c] += w * color[i, c]
                pos += st.n
        _free_tiles(&tl)
    return pix_arr[:pos], gid_arr[:pos], jac_arr[:pos]
