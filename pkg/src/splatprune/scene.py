"""Gaussian cloud and camera types, parameter activations, covariance and SH evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, ShapeError

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


def sh_rest_count(degree: int) -> int:
    """Number of non-DC SH coefficients per channel for ``degree``."""
    if degree not in (0, 1, 2, 3):
        raise ShapeError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2 - 1


def sh_degree_from_count(count: int) -> int:
    for deg in range(4):
        if (deg + 1) ** 2 - 1 == count:
            return deg
    raise ShapeError(f"{count} higher-order SH coefficients does not match any degree in 0..3")


def sigmoid(x):
    # exp overflow for very negative logits correctly yields 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    """Struct-of-arrays storage for N Gaussians in raw (optimizer) parameterization.

    ``sh_rest`` has shape (N, B, 3) with B = (deg+1)^2 - 1 coefficients per channel.
    Rotations are (w, x, y, z) quaternions.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    base_colors: np.ndarray
    sh_rest: np.ndarray
    raw_opacities: np.ndarray

    def __post_init__(self):
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "base_colors": (n, 3),
            "raw_opacities": (n, 1),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
        if self.sh_rest.ndim != 3 or self.sh_rest.shape[0] != n or self.sh_rest.shape[2] != 3:
            raise ShapeError(f"sh_rest has shape {self.sh_rest.shape}, expected ({n}, B, 3)")
        sh_degree_from_count(self.sh_rest.shape[1])

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianCloud":
        return cls.from_arrays(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
            np.zeros((0, sh_rest_count(sh_degree), 3)), np.zeros((0, 1)),
        )

    @classmethod
    def from_arrays(cls, positions, log_scales, rotations, base_colors, sh_rest, raw_opacities,
                    dtype=np.float64) -> "GaussianCloud":
        def arr(a):
            return np.ascontiguousarray(np.asarray(a, dtype=dtype))
        return cls(arr(positions), arr(log_scales), arr(rotations), arr(base_colors),
                   arr(sh_rest), arr(np.reshape(raw_opacities, (-1, 1))))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh_rest.shape[1])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        """Activated opacities, shape (N,)."""
        return sigmoid(self.raw_opacities[:, 0])

    def unit_rotations(self) -> np.ndarray:
        return normalize_quaternions(self.rotations)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.arrays().items()})

    def subset(self, index) -> "GaussianCloud":
        """Select Gaussians by integer index array or boolean mask, preserving order."""
        return GaussianCloud(**{k: np.ascontiguousarray(v[index]) for k, v in self.arrays().items()})

    def validate(self) -> None:
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                bad = int(np.argwhere(~np.isfinite(arr.reshape(len(self), -1)))[0, 0])
                raise InvalidParameterError(f"non-finite {name} at Gaussian {bad}")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise InvalidParameterError(f"rotation {bad} is not unit norm (|q|={norms[bad]:.9g})")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise InvalidParameterError("exp(log_scales) must be finite and positive")

    def equals(self, other: "GaussianCloud") -> bool:
        """Bitwise equality of every parameter array."""
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays().values(), other.arrays().values())
        )


PARAM_FIELDS = ("positions", "log_scales", "rotations", "base_colors", "sh_rest", "raw_opacities")


@dataclass
class CameraView:
    """Pinhole camera. ``pose`` maps world to camera coordinates: x_cam = R x + t.

    Pixel (row r, col c) samples the image plane at (c + 0.5, r + 0.5).
    """

    pose: np.ndarray
    focal: tuple[float, float]
    principal_point: tuple[float, float]
    width: int
    height: int
    gt_image: np.ndarray | None = field(default=None, repr=False)
    name: str = ""

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        self.focal = (float(self.focal[0]), float(self.focal[1]))
        self.principal_point = (float(self.principal_point[0]), float(self.principal_point[1]))
        self.width, self.height = int(self.width), int(self.height)
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError(f"image size must be positive, got {self.width}x{self.height}")
        rot = self.pose[:, :3]
        if not np.all(np.isfinite(self.pose)) or np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise InvalidParameterError("pose rotation is not orthonormal")
        if self.gt_image is not None:
            self.gt_image = np.asarray(self.gt_image, dtype=np.float64)
            if self.gt_image.shape != (self.height, self.width, 3):
                raise ShapeError(
                    f"gt_image shape {self.gt_image.shape} does not match ({self.height}, {self.width}, 3)"
                )

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.pose[:, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, divisor: int) -> "CameraView":
        """Camera rendering at 1/divisor resolution; the ground-truth image is dropped."""
        if divisor == 1:
            return self
        return CameraView(
            self.pose,
            (self.focal[0] / divisor, self.focal[1] / divisor),
            (self.principal_point[0] / divisor, self.principal_point[1] / divisor),
            -(-self.width // divisor),
            -(-self.height // divisor),
            name=self.name,
        )

    def without_image(self) -> "CameraView":
        return CameraView(self.pose, self.focal, self.principal_point, self.width, self.height,
                          name=self.name)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera 3x4 pose with +z forward, +y down (OpenCV convention)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return np.hstack([rot, (-rot @ eye)[:, None]])


@dataclass(frozen=True)
class CovarianceDecomposition:
    R: np.ndarray
    S: np.ndarray
    Sigma: np.ndarray


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions in (w, x, y, z) order."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quaternion_rotmat_derivatives(q: np.ndarray) -> np.ndarray:
    """d R / d q_k for (..., 4) quaternions, returned with shape (..., 4, 3, 3).

    Derivative of the polynomial map, evaluated at ``q`` as given (no normalization).
    """
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    zero = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, -1) for r in rows], -2)

    d_w = mat([(zero, -z, y), (z, zero, -x), (-y, x, zero)])
    d_x = mat([(zero, y, z), (y, -2 * x, -w), (z, w, -2 * x)])
    d_y = mat([(-2 * y, x, w), (x, zero, z), (-w, z, -2 * y)])
    d_z = mat([(-2 * z, -w, x), (w, -2 * z, y), (x, y, zero)])
    return np.stack([d_w, d_x, d_y, d_z], -3)


def covariances(log_scales: np.ndarray, quaternions: np.ndarray) -> np.ndarray:
    """Batched Sigma = R S S^T R^T for (N, 3) log-scales and (N, 4) quaternions."""
    rot = quaternion_to_rotmat(normalize_quaternions(quaternions))
    m = rot * np.exp(log_scales)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def build_covariance(log_scale, quaternion) -> CovarianceDecomposition:
    log_scale = np.asarray(log_scale, dtype=np.float64).reshape(3)
    quaternion = np.asarray(quaternion, dtype=np.float64).reshape(4)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(quaternion))):
        raise InvalidParameterError("log_scale and quaternion must be finite")
    norm = np.linalg.norm(quaternion)
    if norm == 0.0:
        raise InvalidParameterError("zero quaternion")
    R = quaternion_to_rotmat(quaternion / norm)
    S = np.diag(np.exp(log_scale))
    Sigma = R @ S @ S.T @ R.T
    return CovarianceDecomposition(R, S, Sigma)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis (3D-GS sign convention) at (..., 3) unit directions -> (..., (deg+1)^2)."""
    x, y, z = np.moveaxis(np.asarray(dirs, dtype=np.float64), -1, 0)
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, -1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Gradient of each basis polynomial w.r.t. the direction components -> (..., K, 3)."""
    x, y, z = np.moveaxis(np.asarray(dirs, dtype=np.float64), -1, 0)
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, -SH_C1 + zero, zero), (zero, zero, SH_C1 + zero), (-SH_C1 + zero, zero, zero)]
    if degree >= 2:
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z),
            (-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z),
            (2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, -1) for r in rows], -2)


def eval_sh(base_color, sh_rest, view_dir, degree: int) -> np.ndarray:
    """View-dependent RGB of one Gaussian: SH expansion + 0.5, clamped below at zero."""
    base_color = np.asarray(base_color, dtype=np.float64).reshape(3)
    sh_rest = np.asarray(sh_rest, dtype=np.float64).reshape(-1, 3)
    if sh_rest.shape[0] != sh_rest_count(degree):
        raise ShapeError(
            f"degree {degree} needs {sh_rest_count(degree)} higher-order coefficients, got {sh_rest.shape[0]}"
        )
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64), degree)
    coeffs = np.vstack([base_color[None], sh_rest])
    return np.maximum(basis @ coeffs + 0.5, 0.0)
