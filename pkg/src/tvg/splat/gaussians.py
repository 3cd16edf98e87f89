"""Gaussian primitives, the map container and PLY serialization."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def quat_to_rot(q):
    """Unit quaternions (..., 4) ordered (w, x, y, z) -> rotation matrices."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_grad_to_quat_grad(q, G):
    """Pull dL/dR (..., 3, 3) back to dL/dq through normalization."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = lambda i, j: G[..., i, j]  # noqa: E731
    gw = 2 * (-g(0, 1) * z + g(0, 2) * y + g(1, 0) * z - g(1, 2) * x - g(2, 0) * y + g(2, 1) * x)
    gx = 2 * (g(0, 1) * y + g(0, 2) * z + g(1, 0) * y - 2 * g(1, 1) * x
              - g(1, 2) * w + g(2, 0) * z + g(2, 1) * w - 2 * g(2, 2) * x)
    gy = 2 * (-2 * g(0, 0) * y + g(0, 1) * x + g(0, 2) * w + g(1, 0) * x
              + g(1, 2) * z - g(2, 0) * w + g(2, 1) * z - 2 * g(2, 2) * y)
    gz = 2 * (-2 * g(0, 0) * z - g(0, 1) * w + g(0, 2) * x + g(1, 0) * w
              - 2 * g(1, 1) * z + g(1, 2) * y + g(2, 0) * x + g(2, 1) * y)
    gq = np.stack([gw, gx, gy, gz], axis=-1)
    gq = gq - qn * np.sum(gq * qn, axis=-1, keepdims=True)
    return gq / norm


def covariance(scales, quats):
    """World covariance R^T S^T S R for each primitive (rows of R are the axes)."""
    R = quat_to_rot(quats)
    s2 = np.asarray(scales, dtype=float) ** 2
    return np.einsum("nki,nk,nkj->nij", R, s2, R)


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    color: np.ndarray
    opacity_logit: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(4)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"rotation quaternion must be unit norm, got |q|={n}")

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self):
        return covariance(self.scale[None], self.rotation[None])[0]


_FIELDS = ("means", "scales", "quats", "colors", "opacity_logits")


class GaussianMap:
    """Ordered primitive collection stored as parallel arrays.

    ``ids`` record insertion order and break depth ties during rendering, so
    storage order never affects the image. ``revision`` increases on every
    structural or parametric change.
    """

    def __init__(self, means=None, scales=None, quats=None, colors=None,
                 opacity_logits=None, ids=None, revision=0):
        self.means = np.zeros((0, 3)) if means is None else np.array(means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.zeros((0, 3)) if scales is None else np.array(scales, dtype=float).reshape(-1, 3)
        self.quats = np.zeros((0, 4)) if quats is None else np.array(quats, dtype=float).reshape(-1, 4)
        self.colors = np.zeros((0, 3)) if colors is None else np.array(colors, dtype=float).reshape(-1, 3)
        self.opacity_logits = (np.zeros(0) if opacity_logits is None
                               else np.array(opacity_logits, dtype=float).reshape(-1))
        if ids is None:
            ids = np.arange(n)
        self.ids = np.array(ids, dtype=np.int64).reshape(-1)
        for name in _FIELDS + ("ids",):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        self.revision = int(revision)

    def __len__(self):
        return len(self.means)

    @classmethod
    def from_primitives(cls, prims):
        prims = list(prims)
        if not prims:
            return cls()
        return cls(np.stack([p.mean for p in prims]), np.stack([p.scale for p in prims]),
                   np.stack([p.rotation for p in prims]), np.stack([p.color for p in prims]),
                   np.array([p.opacity_logit for p in prims]))

    def primitive(self, i):
        return GaussianPrimitive(self.means[i], self.scales[i], self.quats[i] / np.linalg.norm(self.quats[i]),
                                 self.colors[i], self.opacity_logits[i])

    def __iter__(self):
        return (self.primitive(i) for i in range(len(self)))

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def next_id(self):
        return int(self.ids.max()) + 1 if len(self.ids) else 0

    def append(self, means, scales, quats, colors, opacity_logits):
        means = np.asarray(means, dtype=float).reshape(-1, 3)
        k = len(means)
        if k == 0:
            return 0
        start = self.next_id
        self.means = np.concatenate([self.means, means])
        self.scales = np.concatenate([self.scales, np.asarray(scales, float).reshape(-1, 3)])
        self.quats = np.concatenate([self.quats, np.asarray(quats, float).reshape(-1, 4)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, float).reshape(-1, 3)])
        self.opacity_logits = np.concatenate([self.opacity_logits,
                                              np.asarray(opacity_logits, float).reshape(-1)])
        self.ids = np.concatenate([self.ids, np.arange(start, start + k)])
        self.revision += 1
        return k

    def add(self, prim):
        return self.append(prim.mean, prim.scale, prim.rotation, prim.color, [prim.opacity_logit])

    def set_params(self, **arrays):
        for name, value in arrays.items():
            if name not in _FIELDS:
                raise KeyError(name)
            value = np.array(value, dtype=float)
            if value.shape != getattr(self, name).shape:
                raise ValueError(f"shape mismatch for {name}")
            setattr(self, name, value)
        self.revision += 1

    def copy(self):
        return GaussianMap(self.means.copy(), self.scales.copy(), self.quats.copy(), self.colors.copy(),
                           self.opacity_logits.copy(), self.ids.copy(), self.revision)

    def snapshot(self):
        """Read-only copy pinned to the current revision."""
        snap = self.copy()
        for name in _FIELDS + ("ids",):
            getattr(snap, name).setflags(write=False)
        return snap

    def permuted(self, order):
        order = np.asarray(order)
        return GaussianMap(self.means[order], self.scales[order], self.quats[order], self.colors[order],
                           self.opacity_logits[order], self.ids[order], self.revision)


PLY_PROPS = ("x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
             "r", "g", "b", "opacity_logit")


def atomic_write_text(path, text):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_ply(gmap, path):
    """ASCII PLY; floats use repr so the round trip is exact."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(gmap)}"]
    lines += [f"property double {p}" for p in PLY_PROPS]
    lines.append("end_header")
    data = np.concatenate([gmap.means, gmap.scales, gmap.quats, gmap.colors,
                           gmap.opacity_logits[:, None]], axis=1)
    for row in data:
        lines.append(" ".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_ply(path):
    with open(path) as fh:
        text = fh.read().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    props, count, i = [], None, 1
    while i < len(text) and text[i].strip() != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
        elif parts and parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        i += 1
    if count is None or i == len(text):
        raise ValueError(f"{path}: malformed PLY header")
    missing = [p for p in PLY_PROPS if p not in props]
    if missing:
        raise ValueError(f"{path}: missing vertex properties {missing}")
    rows = text[i + 1:i + 1 + count]
    if len(rows) != count:
        raise ValueError(f"{path}: expected {count} vertices, found {len(rows)}")
    data = np.array([[float(v) for v in r.split()] for r in rows]).reshape(count, len(props))
    col = {p: data[:, props.index(p)] for p in PLY_PROPS}
    st = lambda *names: np.stack([col[n] for n in names], axis=1)  # noqa: E731
    return GaussianMap(st("x", "y", "z"), st("scale_0", "scale_1", "scale_2"),
                       st("rot_0", "rot_1", "rot_2", "rot_3"), st("r", "g", "b"), col["opacity_logit"])
