"""Binary little-endian PLY in the 3D-GS property layout."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import PlyParseError
from .scene import GaussianCloud, sh_degree_from_count


def property_names(sh_degree: int) -> list[str]:
    n_rest = 3 * ((sh_degree + 1) ** 2 - 1)
    return (
        ["x", "y", "z", "nx", "ny", "nz"]
        + [f"f_dc_{i}" for i in range(3)]
        + [f"f_rest_{i}" for i in range(n_rest)]
        + ["opacity"]
        + [f"scale_{i}" for i in range(3)]
        + [f"rot_{i}" for i in range(4)]
    )


def ply_bytes(cloud: GaussianCloud) -> bytes:
    names = property_names(cloud.sh_degree)
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    # f_rest is channel-major: all coefficients of R, then G, then B
    rest = np.swapaxes(cloud.sh_rest, 1, 2).reshape(n, 3 * cloud.sh_rest.shape[1])
    data = np.concatenate([
        cloud.positions, np.zeros((n, 3)), cloud.base_colors, rest,
        cloud.raw_opacities, cloud.log_scales, cloud.rotations,
    ], axis=1).astype("<f4")
    return ("\n".join(header) + "\n").encode("ascii") + data.tobytes()


def atomic_write(path, payload: bytes) -> int:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(payload)


def save_ply(cloud: GaussianCloud, path) -> int:
    """Write ``cloud``; returns the number of bytes written."""
    return atomic_write(path, ply_bytes(cloud))


def _parse_header(raw: bytes) -> tuple[int, list[str], int]:
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise PlyParseError("not a PLY file (missing magic or end_header)")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()[1:]
    count = None
    names: list[str] = []
    fmt = None
    for line in lines:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = " ".join(parts[1:])
        elif parts[0] == "element":
            if parts[1] != "vertex" or count is not None:
                raise PlyParseError(f"unsupported element {parts[1]!r}")
            count = int(parts[2])
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] not in ("float", "float32"):
                raise PlyParseError(f"property {parts[-1]!r} must be float32", prop=parts[-1])
            names.append(parts[2])
        else:
            raise PlyParseError(f"unexpected header line {line!r}")
    if fmt != "binary_little_endian 1.0":
        raise PlyParseError(f"unsupported encoding {fmt!r}; expected binary_little_endian 1.0")
    if count is None:
        raise PlyParseError("missing vertex element")
    return count, names, end + len(b"end_header\n")


def load_ply(path) -> GaussianCloud:
    raw = Path(path).read_bytes()
    count, names, offset = _parse_header(raw)
    n_rest = sum(1 for name in names if name.startswith("f_rest_"))
    if n_rest % 3:
        raise PlyParseError(f"f_rest property count {n_rest} is not a multiple of 3", prop="f_rest")
    try:
        degree = sh_degree_from_count(n_rest // 3)
    except ValueError as exc:
        raise PlyParseError(str(exc), prop="f_rest") from None
    expected = property_names(degree)
    missing = [name for name in expected if name not in names]
    if missing:
        raise PlyParseError(f"missing property {missing[0]!r}", prop=missing[0])
    unknown = [name for name in names if name not in expected]
    if unknown:
        raise PlyParseError(f"unknown property {unknown[0]!r}", prop=unknown[0])
    if len(set(names)) != len(names):
        raise PlyParseError("duplicate property names")
    payload = raw[offset:]
    need = count * len(names) * 4
    if len(payload) != need:
        raise PlyParseError(f"payload has {len(payload)} bytes, expected {need}")
    table = np.frombuffer(payload, dtype="<f4").reshape(count, len(names)).astype(np.float64)
    col = {name: table[:, names.index(name)] for name in expected}

    bad = ~np.isfinite(table)
    if bad.any():
        rows, cols = np.nonzero(bad)
        first = int(np.argmin(rows * len(names) + cols))
        element, prop = int(rows[first]), names[int(cols[first])]
        raise PlyParseError(f"non-finite value for {prop!r} at element {element}", prop=prop, element=element)

    def stack(keys):
        if count == 0 or not keys:
            return np.zeros((count, len(keys)))
        return np.stack([col[k] for k in keys], axis=1)

    rest = stack([f"f_rest_{i}" for i in range(n_rest)]).reshape(count, 3, n_rest // 3)
    rotations = stack([f"rot_{i}" for i in range(4)])
    norms = np.linalg.norm(rotations, axis=1)
    if np.any(norms == 0):
        element = int(np.nonzero(norms == 0)[0][0])
        raise PlyParseError(f"zero quaternion at element {element}", prop="rot_0", element=element)
    off = np.abs(norms - 1.0) > 1e-6
    rotations[off] /= norms[off, None]
    return GaussianCloud.from_arrays(
        stack(["x", "y", "z"]),
        stack([f"scale_{i}" for i in range(3)]),
        rotations,
        stack([f"f_dc_{i}" for i in range(3)]),
        np.swapaxes(rest, 1, 2),
        stack(["opacity"]),
    )
