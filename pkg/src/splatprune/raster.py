"""Forward splatting: EWA projection, depth ordering and alpha compositing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .scene import (
    CameraView,
    GaussianCloud,
    normalize_quaternions,
    quaternion_to_rotmat,
    sh_basis,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RenderConfig:
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dilation: float = 0.3
    near: float = 0.2
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    t_stop: float = 1e-4
    max_condition: float = 1e12

    def __post_init__(self):
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))


DEFAULT_CONFIG = RenderConfig()


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    view_color: np.ndarray
    opacity: float
    source_index: int
    bbox: tuple[int, int, int, int]


@dataclass
class Projection:
    """Depth-sorted projection of the visible Gaussians of one view.

    Per-Gaussian arrays have length K (visible count); ``source_index`` maps
    back into the cloud. Intermediates needed for differentiation are kept.
    """

    source_index: np.ndarray
    depth: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray          # packed (xx, xy, yy)
    conic: np.ndarray          # packed inverse
    opacity: np.ndarray
    color: np.ndarray
    bbox: np.ndarray           # int32 (x0, x1, y0, y1), exclusive upper bounds
    width: int
    height: int
    skipped_singular: int = 0
    # differentiation intermediates
    cam_points: np.ndarray = field(default=None, repr=False)
    view_dirs: np.ndarray = field(default=None, repr=False)
    view_vectors: np.ndarray = field(default=None, repr=False)
    color_active: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.source_index.shape[0]

    def kernel_args(self, config: RenderConfig):
        return (self.mean2d, self.conic, self.opacity, self.color, self.bbox,
                self.width, self.height, np.asarray(config.background, dtype=np.float64),
                config.alpha_min, config.alpha_max, config.t_stop)


@dataclass
class RenderedImage:
    rgb: np.ndarray
    final_transmittance: np.ndarray
    resolution_divisor: int = 1
    unclamped: np.ndarray = field(default=None, repr=False)
    hits: np.ndarray = field(default=None, repr=False)  # per cloud Gaussian
    skipped_singular: int = 0


def perspective_jacobian(cam_points: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """(K, 2, 3) Jacobian of the pinhole projection at camera-space points."""
    x, y, z = cam_points.T
    inv_z = 1.0 / z
    jac = np.zeros((cam_points.shape[0], 2, 3))
    jac[:, 0, 0] = fx * inv_z
    jac[:, 0, 2] = -fx * x * inv_z * inv_z
    jac[:, 1, 1] = fy * inv_z
    jac[:, 1, 2] = -fy * y * inv_z * inv_z
    return jac


def depth_order(depth: np.ndarray, source_index: np.ndarray) -> np.ndarray:
    """Permutation sorting by ascending depth, ties by ascending source index."""
    return np.lexsort((source_index, depth))


def depth_sort(projected: list[ProjectedGaussian]) -> list[int]:
    if not projected:
        return []
    depth = np.array([p.depth for p in projected], dtype=np.float64)
    src = np.array([p.source_index for p in projected])
    return depth_order(depth, src).tolist()


def project_cloud(cloud: GaussianCloud, cam: CameraView,
                  config: RenderConfig = DEFAULT_CONFIG) -> Projection:
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    rot_w = cam.rotation
    pts = cloud.positions @ rot_w.T + cam.translation
    opacity = cloud.opacities
    keep = (pts[:, 2] > config.near) & (opacity >= config.alpha_min)
    idx = np.nonzero(keep)[0]
    pts = pts[idx]
    opacity = opacity[idx]

    jac = perspective_jacobian(pts, fx, fy)
    rot = quaternion_to_rotmat(normalize_quaternions(cloud.rotations[idx]))
    m = rot * np.exp(cloud.log_scales[idx])[:, None, :]
    t_mat = jac @ rot_w
    tm = t_mat @ m
    cov = tm @ np.swapaxes(tm, 1, 2)
    a = cov[:, 0, 0] + config.dilation
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + config.dilation
    det = a * c - b * b
    half_trace = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(half_trace * half_trace - det, 0.0))
    lam_max = half_trace + disc
    lam_min = half_trace - disc
    sane = (lam_min > 0) & (lam_max <= config.max_condition * np.maximum(lam_min, 0))
    skipped = int(np.count_nonzero(~sane))
    if skipped:
        log.debug("skipping %d Gaussians with singular screen-space covariance", skipped)

    z = pts[:, 2]
    u = fx * pts[:, 0] / z + cx
    v = fy * pts[:, 1] / z + cy
    with np.errstate(divide="ignore", invalid="ignore"):
        conic = np.stack([c / det, -b / det, a / det], -1)
        # region where opacity * gaussian >= alpha_min: d^T Q d <= q
        q = 2.0 * np.log(opacity / config.alpha_min)
        rx = np.sqrt(q * a)
        ry = np.sqrt(q * c)
    # one-pixel margin so rounding never drops a pixel the kernel would accept
    x0 = np.floor(u - rx - 0.5) - 1
    x1 = np.floor(u + rx - 0.5) + 2
    y0 = np.floor(v - ry - 0.5) - 1
    y1 = np.floor(v + ry - 0.5) + 2
    x0 = np.clip(x0, 0, cam.width)
    x1 = np.clip(x1, 0, cam.width)
    y0 = np.clip(y0, 0, cam.height)
    y1 = np.clip(y1, 0, cam.height)
    visible = sane & (x1 > x0) & (y1 > y0)

    sel = np.nonzero(visible)[0]
    sel = sel[depth_order(z[sel], idx[sel])]
    src = idx[sel]
    view_vec = cloud.positions[src] - cam.center
    dirs = view_vec / np.linalg.norm(view_vec, axis=1, keepdims=True)
    degree = cloud.sh_degree
    coeffs = np.concatenate([cloud.base_colors[src][:, None, :], cloud.sh_rest[src]], axis=1)
    raw_color = np.einsum("kb,kbc->kc", sh_basis(dirs, degree), coeffs) + 0.5
    color = np.maximum(raw_color, 0.0)

    bbox = np.stack([x0[sel], x1[sel], y0[sel], y1[sel]], -1).astype(np.int32)
    return Projection(
        source_index=src,
        depth=z[sel],
        mean2d=np.ascontiguousarray(np.stack([u[sel], v[sel]], -1)),
        cov2d=np.stack([a[sel], b[sel], c[sel]], -1),
        conic=np.ascontiguousarray(conic[sel]),
        opacity=np.ascontiguousarray(opacity[sel]),
        color=np.ascontiguousarray(color),
        bbox=np.ascontiguousarray(bbox),
        width=cam.width,
        height=cam.height,
        skipped_singular=skipped,
        cam_points=pts[sel],
        view_dirs=dirs,
        view_vectors=view_vec,
        color_active=raw_color > 0.0,
    )


def project_gaussian(cloud: GaussianCloud, cam: CameraView, index: int = 0,
                     config: RenderConfig = DEFAULT_CONFIG) -> ProjectedGaussian | None:
    """Project one Gaussian of ``cloud``; ``None`` when it is culled."""
    proj = project_cloud(cloud.subset([index]), cam, config)
    if len(proj) == 0:
        return None
    a, b, c = proj.cov2d[0]
    return ProjectedGaussian(
        mean2d=proj.mean2d[0].copy(),
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(proj.depth[0]),
        view_color=proj.color[0].copy(),
        opacity=float(proj.opacity[0]),
        source_index=int(index),
        bbox=tuple(int(v) for v in proj.bbox[0]),
    )


def check_divisor(divisor: int) -> int:
    if divisor not in (1, 2, 4, 8):
        raise ValueError(f"divisor must be one of 1, 2, 4, 8; got {divisor}")
    return divisor


def render_view(cloud: GaussianCloud, cam: CameraView, divisor: int = 1,
                config: RenderConfig = DEFAULT_CONFIG, backend=None) -> RenderedImage:
    """Render ``cloud`` from ``cam`` at 1/divisor resolution."""
    check_divisor(divisor)
    cam = cam.scaled(divisor)
    kernels = _kernels.get_backend(backend)
    proj = project_cloud(cloud, cam, config)
    image, trans, hits = kernels.composite_forward(*proj.kernel_args(config))
    cloud_hits = np.zeros(len(cloud), dtype=np.int64)
    cloud_hits[proj.source_index] = hits
    return RenderedImage(
        rgb=np.clip(image, 0.0, 1.0),
        final_transmittance=trans,
        resolution_divisor=divisor,
        unclamped=image,
        hits=cloud_hits,
        skipped_singular=proj.skipped_singular,
    )


def save_png(image: np.ndarray, path, gamma: bool = False) -> None:
    """Write an HxWx3 (or HxW) image in [0,1] as 8-bit PNG; optional 1/2.2 encode."""
    import io

    from PIL import Image

    from .plyio import atomic_write

    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if gamma:
        img = img ** (1.0 / 2.2)
    buf = io.BytesIO()
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())
