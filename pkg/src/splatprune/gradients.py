"""Analytic derivatives of rendered pixels and of the fine-tuning loss.

The compositing kernels see every Gaussian through five screen-space
quantities, (u, v) and the packed 2D covariance (xx, xy, yy). This module
builds the per-view Jacobian of those quantities with respect to the stored
parameters (position, log-scale, raw quaternion) and chains kernel outputs
through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import _kernels
from .errors import PreconditionError, ShapeError
from .metrics import ssim_and_grad
from .raster import (
    DEFAULT_CONFIG,
    Projection,
    RenderConfig,
    RenderedImage,
    check_divisor,
    perspective_jacobian,
    project_cloud,
)
from .scene import (
    SH_C0,
    CameraView,
    GaussianCloud,
    quaternion_rotmat_derivatives,
    quaternion_to_rotmat,
    sh_basis,
    sh_basis_grad,
)

PARAM_SETS = {
    "mean_scale": 6,
    "mean_scale_rot": 10,
    "rgb": 3,
}

# (field, component) for every Jacobian column of each parameter set;
# "color" columns are the DC color offset measured in output color units.
PARAM_COLUMNS = {
    "mean_scale": [("positions", k) for k in range(3)] + [("log_scales", k) for k in range(3)],
    "mean_scale_rot": [("positions", k) for k in range(3)] + [("log_scales", k) for k in range(3)]
    + [("rotations", k) for k in range(4)],
    "rgb": [("color", k) for k in range(3)],
}


def canonical_param_set(name: str) -> str:
    key = name.replace("-", "_").lower()
    if key not in PARAM_SETS:
        raise ValueError(f"unknown parameter set {name!r}; choose from {sorted(PARAM_SETS)}")
    return key


@dataclass
class PixelJacobian:
    gaussian_index: int
    pixel: tuple[int, int]
    d_rgb_d_params: np.ndarray


@dataclass
class JacobianStream:
    """All (pixel, Gaussian) Jacobians of one render, ordered by pixel then depth."""

    rows: np.ndarray
    cols: np.ndarray
    gaussian_index: np.ndarray
    jacobians: np.ndarray      # (m, 3, d)
    param_set: str
    width: int
    height: int

    def __len__(self):
        return self.gaussian_index.shape[0]

    def __iter__(self) -> Iterator[PixelJacobian]:
        for r, c, g, jac in zip(self.rows, self.cols, self.gaussian_index, self.jacobians):
            yield PixelJacobian(int(g), (int(r), int(c)), jac)

    def dense(self, gaussian: int) -> np.ndarray:
        """(H, W, 3, d) Jacobian image of one Gaussian (zeros where it does not contribute)."""
        out = np.zeros((self.height, self.width, 3, self.jacobians.shape[2]))
        sel = self.gaussian_index == gaussian
        out[self.rows[sel], self.cols[sel]] = self.jacobians[sel]
        return out


@dataclass
class FullGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    base_colors: np.ndarray
    sh_rest: np.ndarray
    raw_opacities: np.ndarray

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "FullGradients":
        return cls(**{k: np.zeros_like(v) for k, v in cloud.arrays().items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(vars(self))

    def __iadd__(self, other: "FullGradients") -> "FullGradients":
        for k, v in other.arrays().items():
            getattr(self, k)[...] += v
        return self


def screen_space_jacobian(cloud: GaussianCloud, cam: CameraView, proj: Projection,
                          config: RenderConfig = DEFAULT_CONFIG) -> np.ndarray:
    """d(u, v, cov_xx, cov_xy, cov_yy) / d(position, log-scale, raw quaternion), (K, 5, 10)."""
    src = proj.source_index
    k = src.shape[0]
    fx, fy = cam.focal
    rot_w = cam.rotation
    pts = proj.cam_points
    jac = perspective_jacobian(pts, fx, fy)
    t_mat = jac @ rot_w                                    # d(u,v)/dx
    q_raw = cloud.rotations[src]
    q_norm = np.linalg.norm(q_raw, axis=1)
    qn = q_raw / q_norm[:, None]
    rot = quaternion_to_rotmat(qn)
    s2 = np.exp(2.0 * cloud.log_scales[src])
    sigma = (rot * s2[:, None, :]) @ np.swapaxes(rot, 1, 2)
    v_cam = rot_w @ sigma @ rot_w.T                        # camera-space covariance

    out = np.zeros((k, 5, 10))
    out[:, 0:2, 0:3] = t_mat

    def pack(m):
        return np.stack([m[..., 0, 0], m[..., 0, 1], m[..., 1, 1]], -1)

    # position: cov2d depends on the camera-space point through J
    x, y, z = pts.T
    iz2 = 1.0 / (z * z)
    iz3 = iz2 / z
    d_jac = np.zeros((k, 3, 2, 3))
    d_jac[:, 0, 0, 2] = -fx * iz2
    d_jac[:, 1, 1, 2] = -fy * iz2
    d_jac[:, 2, 0, 0] = -fx * iz2
    d_jac[:, 2, 0, 2] = 2.0 * fx * x * iz3
    d_jac[:, 2, 1, 1] = -fy * iz2
    d_jac[:, 2, 1, 2] = 2.0 * fy * y * iz3
    a_mat = d_jac @ (v_cam @ np.swapaxes(jac, 1, 2))[:, None]   # (K, 3, 2, 2)
    d_cov_d_cam = pack(a_mat + np.swapaxes(a_mat, -1, -2))      # (K, 3, 3): [cam axis, packed]
    out[:, 2:5, 0:3] = np.einsum("kap,am->kpm", d_cov_d_cam, rot_w)

    # log-scale: dSigma/dls_j = 2 s_j^2 r_j r_j^T
    tr = t_mat @ rot                                       # (K, 2, 3): columns T r_j
    for j in range(3):
        col = tr[:, :, j]
        out[:, 2:5, 3 + j] = 2.0 * s2[:, j, None] * pack(col[:, :, None] * col[:, None, :])

    # raw quaternion, through normalization
    d_rot = quaternion_rotmat_derivatives(qn)             # (K, 4, 3, 3)
    rd = rot * s2[:, None, :]                              # R D
    d_sigma = d_rot @ np.swapaxes(rd, 1, 2)[:, None]       # dR D R^T
    d_sigma = d_sigma + np.swapaxes(d_sigma, -1, -2)
    d_cov_d_qn = pack(t_mat[:, None] @ d_sigma @ np.swapaxes(t_mat, 1, 2)[:, None])  # (K, 4, 3)
    proj_qn = (np.eye(4)[None] - qn[:, :, None] * qn[:, None, :]) / q_norm[:, None, None]
    out[:, 2:5, 6:10] = np.einsum("kjp,kjm->kpm", d_cov_d_qn, proj_qn)
    return out


def color_position_jacobian(cloud: GaussianCloud, proj: Projection) -> np.ndarray:
    """d(view color)/d(position), (K, 3, 3); zero for degree-0 SH and clamped channels."""
    k = len(proj)
    degree = cloud.sh_degree
    if degree == 0 or k == 0:
        return np.zeros((k, 3, 3))
    src = proj.source_index
    coeffs = np.concatenate([cloud.base_colors[src][:, None, :], cloud.sh_rest[src]], axis=1)
    d_basis = sh_basis_grad(proj.view_dirs, degree)                 # (K, B, 3)
    d_color_d_dir = np.einsum("kbc,kbj->kcj", coeffs, d_basis)      # (K, 3 color, 3 dir)
    dirs = proj.view_dirs
    norm = np.linalg.norm(proj.view_vectors, axis=1)
    d_dir_d_x = (np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]) / norm[:, None, None]
    return (d_color_d_dir @ d_dir_d_x) * proj.color_active[:, :, None]


def param_jacobians(cloud: GaussianCloud, cam: CameraView, proj: Projection, param_set: str,
                    config: RenderConfig = DEFAULT_CONFIG) -> tuple[np.ndarray, np.ndarray]:
    """Kernel inputs for ``param_set``: screen-space (K, 5, d) and view-color (K, 3, d) Jacobians."""
    param_set = canonical_param_set(param_set)
    k = len(proj)
    d = PARAM_SETS[param_set]
    if param_set == "rgb":
        proj_jac = np.zeros((k, 5, 3))
        color_jac = np.eye(3)[None] * proj.color_active[:, :, None]
        return proj_jac, np.ascontiguousarray(color_jac, dtype=np.float64)
    proj_jac = np.ascontiguousarray(screen_space_jacobian(cloud, cam, proj, config)[:, :, :d])
    color_jac = np.zeros((k, 3, d))
    color_jac[:, :, 0:3] = color_position_jacobian(cloud, proj)
    return proj_jac, color_jac


def render_with_param_jacobians(cloud: GaussianCloud, cam: CameraView, divisor: int = 1,
                                param_set: str = "mean_scale",
                                config: RenderConfig = DEFAULT_CONFIG,
                                backend=None) -> tuple[RenderedImage, JacobianStream]:
    """Render and emit the Jacobian of each pixel's pre-clamp RGB per contributing Gaussian."""
    param_set = canonical_param_set(param_set)
    check_divisor(divisor)
    cam = cam.scaled(divisor)
    kernels = _kernels.get_backend(backend)
    proj = project_cloud(cloud, cam, config)
    args = proj.kernel_args(config)
    image, trans, hits = kernels.composite_forward(*args)
    proj_jac, color_jac = param_jacobians(cloud, cam, proj, param_set, config)
    pix, gid, jac = kernels.pixel_jacobians(*args, proj_jac, color_jac)
    cloud_hits = np.zeros(len(cloud), dtype=np.int64)
    cloud_hits[proj.source_index] = hits
    rendered = RenderedImage(np.clip(image, 0.0, 1.0), trans, divisor, image, cloud_hits,
                             proj.skipped_singular)
    stream = JacobianStream(pix // cam.width, pix % cam.width, proj.source_index[gid], jac,
                            param_set, cam.width, cam.height)
    return rendered, stream


def image_loss_and_grad(image: np.ndarray, gt: np.ndarray, lambda_ssim: float) -> tuple[float, np.ndarray]:
    """(1 - lambda) * mean|I - gt| + lambda * (1 - SSIM(I, gt)) and its gradient w.r.t. I."""
    if image.shape != gt.shape:
        raise ShapeError(f"render {image.shape} and ground truth {gt.shape} differ")
    diff = image - gt
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    loss = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0.0:
        value, d_ssim = ssim_and_grad(image, gt)
        loss += lambda_ssim * (1.0 - value)
        grad = grad - lambda_ssim * d_ssim
    return loss, grad


def loss_and_gradients(cloud: GaussianCloud, cam: CameraView, lambda_ssim: float = 0.2,
                       config: RenderConfig = DEFAULT_CONFIG,
                       backend=None) -> tuple[float, FullGradients]:
    """Fine-tuning loss on the clamped render and its gradient w.r.t. every stored parameter."""
    if cam.gt_image is None:
        raise PreconditionError("loss_and_gradients needs a view with a ground-truth image")
    if not 0.0 <= lambda_ssim < 1.0:
        raise ValueError("lambda_ssim must be in [0, 1)")
    kernels = _kernels.get_backend(backend)
    proj = project_cloud(cloud, cam, config)
    args = proj.kernel_args(config)
    image, _, _ = kernels.composite_forward(*args)
    loss, grad_img = image_loss_and_grad(np.clip(image, 0.0, 1.0), cam.gt_image, lambda_ssim)
    grad_img = np.ascontiguousarray(np.where((image > 0.0) & (image < 1.0), grad_img, 0.0))
    grads = FullGradients.zeros_like(cloud)
    if len(proj) == 0:
        return loss, grads
    g_mean, g_cov, g_opacity, g_color = kernels.composite_backward(*args, grad_img)

    src = proj.source_index
    screen = screen_space_jacobian(cloud, cam, proj, config)
    g_geo = np.einsum("kp,kpm->km", np.concatenate([g_mean, g_cov], axis=1), screen)
    g_color = g_color * proj.color_active
    g_pos = g_geo[:, 0:3] + np.einsum("kc,kcj->kj", g_color, color_position_jacobian(cloud, proj))
    grads.positions[src] = g_pos
    grads.log_scales[src] = g_geo[:, 3:6]
    grads.rotations[src] = g_geo[:, 6:10]
    grads.base_colors[src] = SH_C0 * g_color
    if cloud.sh_degree > 0:
        basis = sh_basis(proj.view_dirs, cloud.sh_degree)[:, 1:]
        grads.sh_rest[src] = basis[:, :, None] * g_color[:, None, :]
    op = proj.opacity
    grads.raw_opacities[src, 0] = g_opacity * op * (1.0 - op)
    return loss, grads


def perturbed(cloud: GaussianCloud, field: str, index: int, component: int, delta: float) -> GaussianCloud:
    """Copy of ``cloud`` with one stored scalar shifted by ``delta``.

    ``field="color"`` shifts the DC color so the view color moves by ``delta``.
    """
    out = cloud.copy()
    if field == "color":
        out.base_colors[index, component] += delta / SH_C0
    elif field == "sh_rest":
        b, c = divmod(component, 3)
        out.sh_rest[index, b, c] += delta
    else:
        getattr(out, field).reshape(len(out), -1)[index, component] += delta
    return out


def finite_difference_oracle(cloud: GaussianCloud, cam: CameraView, selector: tuple[str, int, int],
                             step: float = 1e-4, divisor: int = 1,
                             config: RenderConfig = DEFAULT_CONFIG, backend=None) -> np.ndarray:
    """Central difference of the pre-clamp render w.r.t. one stored scalar, (H, W, 3)."""
    from .raster import render_view

    if step <= 0:
        raise ValueError("step must be positive")
    field, index, component = selector
    cam_s = cam.scaled(divisor)
    if len(cloud) == 0:
        return np.zeros((cam_s.height, cam_s.width, 3))
    plus = render_view(perturbed(cloud, field, index, component, step), cam, divisor, config, backend)
    minus = render_view(perturbed(cloud, field, index, component, -step), cam, divisor, config, backend)
    return (plus.unclamped - minus.unclamped) / (2.0 * step)


def finite_difference_jacobian(cloud: GaussianCloud, cam: CameraView, gaussian: int, param_set: str,
                               step: float = 1e-4, divisor: int = 1,
                               config: RenderConfig = DEFAULT_CONFIG, backend=None) -> np.ndarray:
    """(H, W, 3, d) numeric Jacobian of one Gaussian for every column of ``param_set``."""
    cols = PARAM_COLUMNS[canonical_param_set(param_set)]
    return np.stack([
        finite_difference_oracle(cloud, cam, (f, gaussian, c), step, divisor, config, backend)
        for f, c in cols
    ], axis=-1)
