"""Pure-numpy compositing kernels.

Same signatures and semantics as the compiled ``_ckernels`` module. Loops over
depth-sorted Gaussians and vectorizes over the pixels of each bounding box, so
cost grows with the summed bbox area rather than pixels x Gaussians.

All per-Gaussian arrays are in depth order. ``bbox`` rows are (x0, x1, y0, y1)
with exclusive upper bounds; ``cov`` derivatives use the packed (xx, xy, yy)
layout where the xy entry stands for both off-diagonal elements.
"""

from __future__ import annotations

import numpy as np


def _patch(i, mean2d, conic, opacity, bbox, alpha_max):
    x0, x1, y0, y1 = (int(v) for v in bbox[i])
    dx = (np.arange(x0, x1) + 0.5 - mean2d[i, 0])[None, :]
    dy = (np.arange(y0, y1) + 0.5 - mean2d[i, 1])[:, None]
    a, b, c = conic[i]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    gauss = np.exp(power)
    raw = opacity[i] * gauss
    alpha = np.minimum(raw, alpha_max)
    return (slice(y0, y1), slice(x0, x1)), dx, dy, gauss, alpha, raw < alpha_max


def _forward_records(mean2d, conic, opacity, color, bbox, width, height, alpha_min, alpha_max, t_stop):
    n = opacity.shape[0]
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    done = np.zeros((height, width), dtype=bool)
    hits = np.zeros(n, dtype=np.int64)
    records = []
    for i in range(n):
        if bbox[i, 0] >= bbox[i, 1] or bbox[i, 2] >= bbox[i, 3]:
            continue
        region, dx, dy, gauss, alpha, unclamped = _patch(i, mean2d, conic, opacity, bbox, alpha_max)
        live = (alpha >= alpha_min) & ~done[region]
        if not live.any():
            continue
        t_before = trans[region].copy()
        test = t_before * (1.0 - alpha)
        stop = live & (test < t_stop)
        hits[i] = int(live.sum())
        done[region] |= stop
        contrib = live & ~stop
        if not contrib.any():
            continue
        weight = np.where(contrib, alpha * t_before, 0.0)
        image[region] += weight[..., None] * color[i]
        trans[region] = np.where(contrib, test, t_before)
        records.append((i, region, dx, dy, gauss, alpha, unclamped, contrib, t_before, weight, color[i]))
    return image, trans, hits, records


def composite_forward(mean2d, conic, opacity, color, bbox, width, height, background,
                      alpha_min, alpha_max, t_stop):
    """Front-to-back alpha compositing. Returns (unclamped rgb, final transmittance, hits)."""
    image, trans, hits, _ = _forward_records(
        mean2d, conic, opacity, color, bbox, width, height, alpha_min, alpha_max, t_stop)
    image += trans[..., None] * np.asarray(background)
    return image, trans, hits


def _reverse(records, trans, background):
    # after[p] = sum of contributions behind the current Gaussian plus the background term
    after = trans[..., None] * np.asarray(background)
    for rec in reversed(records):
        region, alpha, t_before, weight, rgb = rec[1], rec[5], rec[8], rec[9], rec[10]
        local_after = after[region]
        d_color_d_alpha = t_before[..., None] * rgb - local_after / (1.0 - alpha)[..., None]
        yield rec, d_color_d_alpha
        after[region] = local_after + weight[..., None] * rgb


def _power_features(rec, conic):
    i, _, dx, dy = rec[:4]
    a, b, c = conic[i]
    qd0 = a * dx + b * dy
    qd1 = b * dx + c * dy
    return qd0, qd1


def composite_backward(mean2d, conic, opacity, color, bbox, width, height, background,
                       alpha_min, alpha_max, t_stop, grad_image):
    """Backpropagate dL/dC through compositing.

    Returns gradients w.r.t. (mean2d, packed cov2d, activated opacity, view color).
    """
    n = opacity.shape[0]
    g_mean = np.zeros((n, 2))
    g_cov = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_color = np.zeros((n, 3))
    _, trans, _, records = _forward_records(
        mean2d, conic, opacity, color, bbox, width, height, alpha_min, alpha_max, t_stop)
    for rec, d_c_d_a in _reverse(records, trans, background):
        i, region, dx, dy, gauss, alpha, unclamped, contrib, t_before, weight, _ = rec
        g = grad_image[region]
        g_color[i] = (g * weight[..., None]).sum(axis=(0, 1))
        d_alpha = np.where(contrib & unclamped, (g * d_c_d_a).sum(-1), 0.0)
        d_power = d_alpha * alpha
        qd0, qd1 = _power_features(rec, conic)
        g_mean[i] = (d_power * qd0).sum(), (d_power * qd1).sum()
        g_cov[i] = (0.5 * d_power * qd0 * qd0).sum(), (d_power * qd0 * qd1).sum(), (0.5 * d_power * qd1 * qd1).sum()
        g_opacity[i] = (d_alpha * gauss).sum()
    return g_mean, g_cov, g_opacity, g_color


def _pair_jacobians(rec, d_c_d_a, conic, proj_jac, color_jac):
    i, region, dx, dy, gauss, alpha, unclamped, contrib, t_before, weight, _ = rec
    qd0, qd1 = _power_features(rec, conic)
    feats = np.stack([qd0, qd1, 0.5 * qd0 * qd0, qd0 * qd1, 0.5 * qd1 * qd1], -1)
    scale = np.where(unclamped, alpha, 0.0)
    d_alpha = scale[..., None] * (feats @ proj_jac[i])
    jac = d_c_d_a[..., :, None] * d_alpha[..., None, :] + weight[..., None, None] * color_jac[i]
    return jac[contrib]


def fisher_accumulate(mean2d, conic, opacity, color, bbox, width, height, background,
                      alpha_min, alpha_max, t_stop, proj_jac, color_jac, fisher, hits):
    """Add sum_{pixels, channels} j^T j into ``fisher`` (n, d, d) and pixel hits into ``hits``."""
    _, trans, fwd_hits, records = _forward_records(
        mean2d, conic, opacity, color, bbox, width, height, alpha_min, alpha_max, t_stop)
    hits += fwd_hits
    for rec, d_c_d_a in _reverse(records, trans, background):
        jac = _pair_jacobians(rec, d_c_d_a, conic, proj_jac, color_jac)
        fisher[rec[0]] += np.einsum("pck,pcl->kl", jac, jac)


def pixel_jacobians(mean2d, conic, opacity, color, bbox, width, height, background,
                    alpha_min, alpha_max, t_stop, proj_jac, color_jac):
    """Per (pixel, Gaussian) 3 x d Jacobians, ordered by pixel then depth.

    Returns (pixel ids, Gaussian ids, jacobians (m, 3, d)).
    """
    _, trans, _, records = _forward_records(
        mean2d, conic, opacity, color, bbox, width, height, alpha_min, alpha_max, t_stop)
    pix, gid, jacs = [], [], []
    for rec, d_c_d_a in _reverse(records, trans, background):
        i, region, contrib = rec[0], rec[1], rec[7]
        rows, cols = np.nonzero(contrib)
        pix.append((rows + region[0].start) * width + cols + region[1].start)
        gid.append(np.full(rows.shape[0], i, dtype=np.int64))
        jacs.append(_pair_jacobians(rec, d_c_d_a, conic, proj_jac, color_jac))
    d = proj_jac.shape[2]
    if not pix:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3, d))
    pix = np.concatenate(pix)
    gid = np.concatenate(gid)
    jacs = np.concatenate(jacs)
    # depth order within a pixel equals ascending sorted id
    order = np.lexsort((gid, pix))
    return pix[order], gid[order], jacs[order]
