"""Scene bundles on disk: PLY cloud, JSON cameras, PNG ground-truth images."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PreconditionError, ShapeError
from .plyio import atomic_write, load_ply, save_ply
from .scene import CameraView, GaussianCloud

SCHEMA_VERSION = 1
PLY_NAME = "point_cloud.ply"
CAMERAS_NAME = "cameras.json"
META_NAME = "scene.json"


@dataclass
class SceneBundle:
    cloud: GaussianCloud
    views: list[CameraView]
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sh_degree: int = 0
    scene_extent: float = 1.0
    clutter_kinds: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.sh_degree != self.cloud.sh_degree:
            raise ShapeError(f"sh_degree {self.sh_degree} does not match cloud degree {self.cloud.sh_degree}")
        if not self.scene_extent > 0:
            raise ValueError("scene_extent must be positive")


def camera_extent(views) -> float:
    """1.1 x the largest distance of a camera center from the mean center (1.0 if degenerate)."""
    if not views:
        return 1.0
    centers = np.array([cam.center for cam in views])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) * 1.1
    return radius if radius > 0 else 1.0


def load_image(path, gamma: bool = False) -> np.ndarray:
    from PIL import Image

    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img ** 2.2 if gamma else img


def save_image(image: np.ndarray, path, gamma: bool = False) -> None:
    from .raster import save_png

    save_png(image, path, gamma)


def cameras_to_json(views, image_names=None) -> list[dict]:
    out = []
    for k, cam in enumerate(views):
        out.append({
            "pose": cam.pose.tolist(),
            "fx": cam.focal[0],
            "fy": cam.focal[1],
            "cx": cam.principal_point[0],
            "cy": cam.principal_point[1],
            "width": cam.width,
            "height": cam.height,
            "image": None if image_names is None else image_names[k],
        })
    return out


def load_cameras(path, gamma: bool = False) -> list[CameraView]:
    path = Path(path)
    entries = json.loads(path.read_text())
    views = []
    for k, entry in enumerate(entries):
        gt = None
        if entry.get("image"):
            gt = load_image(path.parent / entry["image"], gamma)
        views.append(CameraView(
            np.array(entry["pose"], dtype=np.float64),
            (entry["fx"], entry["fy"]),
            (entry["cx"], entry["cy"]),
            entry["width"],
            entry["height"],
            gt_image=gt,
            name=entry.get("image") or f"view_{k:03d}",
        ))
    return views


def save_bundle(bundle: SceneBundle, directory, gamma: bool = False) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    save_ply(bundle.cloud, directory / PLY_NAME)
    names = []
    for k, cam in enumerate(bundle.views):
        if cam.gt_image is None:
            names.append(None)
            continue
        name = f"images/{k:03d}.png"
        save_image(cam.gt_image, directory / name, gamma)
        names.append(name)
    atomic_write(directory / CAMERAS_NAME,
                 json.dumps(cameras_to_json(bundle.views, names), indent=1).encode())
    meta = {
        "schema_version": SCHEMA_VERSION,
        "background": list(bundle.background),
        "sh_degree": bundle.sh_degree,
        "scene_extent": bundle.scene_extent,
    }
    atomic_write(directory / META_NAME, json.dumps(meta, indent=1).encode())
    return directory


def load_bundle(directory, gamma: bool = False, ply_path=None) -> SceneBundle:
    directory = Path(directory)
    cloud = load_ply(ply_path or directory / PLY_NAME)
    views = load_cameras(directory / CAMERAS_NAME, gamma)
    meta_path = directory / META_NAME
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return SceneBundle(
        cloud,
        views,
        tuple(meta.get("background", (0.0, 0.0, 0.0))),
        cloud.sh_degree,
        float(meta.get("scene_extent", camera_extent(views))),
    )


def require_images(views) -> None:
    missing = [k for k, cam in enumerate(views) if cam.gt_image is None]
    if missing:
        raise PreconditionError(f"views {missing[:5]} have no ground-truth image")
