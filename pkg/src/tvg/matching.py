"""Pairwise dense match sets, tri-view bridging and the match file format."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import MatchFileError
from .splat.gaussians import atomic_write_text

DEFAULT_JOIN_TOL = 1.0
DEFAULT_MIN_PARALLAX = 1.0
DEFAULT_MIN_CONFIDENCE = 0.3
MAGIC = "TVGM1"


def _rows(x, width):
    return np.array(x, dtype=float).reshape(-1, width) if np.size(x) else np.zeros((0, width))


class PairwiseMatchSet:
    """Correspondences between frames ``a`` and ``b`` with per-frame pointmaps.

    Row ``i`` holds pixel_a, pixel_b, the 3D point in each camera's own frame
    and a confidence in [0, 1]. ``pair_scale`` is the reconstruction scale of
    this pair relative to the global frame (1.0 until estimated).
    """

    def __init__(self, a, b, pixel_a=(), pixel_b=(), point_in_a=(), point_in_b=(), confidence=(),
                 pair_scale=1.0):
        self.a, self.b = int(a), int(b)
        self.pixel_a = _rows(pixel_a, 2)
        self.pixel_b = _rows(pixel_b, 2)
        self.point_in_a = _rows(point_in_a, 3)
        self.point_in_b = _rows(point_in_b, 3)
        self.confidence = np.array(confidence, dtype=float).reshape(-1)
        self.pair_scale = float(pair_scale)
        n = len(self.pixel_a)
        for name in ("pixel_b", "point_in_a", "point_in_b", "confidence"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        self._validate()

    def _validate(self):
        arrays = (self.pixel_a, self.pixel_b, self.point_in_a, self.point_in_b, self.confidence)
        for arr in arrays:
            bad = ~np.all(np.isfinite(arr if arr.ndim == 2 else arr[:, None]), axis=1)
            if bad.any():
                raise ValueError(f"non-finite value in record {int(np.argmax(bad))}")
        bad = (self.point_in_a[:, 2] <= 0) | (self.point_in_b[:, 2] <= 0)
        if bad.any():
            raise ValueError(f"record {int(np.argmax(bad))} has non-positive depth")
        bad = (self.confidence < 0) | (self.confidence > 1)
        if bad.any():
            raise ValueError(f"record {int(np.argmax(bad))} has confidence outside [0, 1]")
        if not (math.isfinite(self.pair_scale) and self.pair_scale > 0):
            raise ValueError(f"pair_scale must be positive, got {self.pair_scale}")

    def __len__(self):
        return len(self.pixel_a)

    def __eq__(self, other):
        if not isinstance(other, PairwiseMatchSet):
            return NotImplemented
        return (self.a == other.a and self.b == other.b and self.pair_scale == other.pair_scale
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("pixel_a", "pixel_b", "point_in_a", "point_in_b", "confidence")))

    def subset(self, idx):
        idx = np.asarray(idx)
        return PairwiseMatchSet(self.a, self.b, self.pixel_a[idx], self.pixel_b[idx], self.point_in_a[idx],
                                self.point_in_b[idx], self.confidence[idx], self.pair_scale)

    def in_bounds(self, K_a, K_b):
        return K_a.in_bounds(self.pixel_a) & K_b.in_bounds(self.pixel_b)


@dataclass(frozen=True)
class TriViewMatch:
    p_prev: np.ndarray
    p_key: np.ndarray
    p_cur: np.ndarray
    point_from_prev_pair: np.ndarray  # key-frame coordinates, prev pair units
    point_from_cur_pair: np.ndarray  # current-frame coordinates, current pair units
    confidence: float


class TriViewSet:
    """Struct-of-arrays tri-view correspondences.

    ``src_prev`` and ``src_cur`` index the source records so callers can
    reach the remaining pointmap entries (e.g. the key-frame point of the
    current pair).
    """

    def __init__(self, key_id, p_prev, p_key, p_cur, point_from_prev_pair, point_from_cur_pair, confidence,
                 src_prev, src_cur, point_key_from_cur_pair=None):
        self.key_id = key_id
        self.p_prev = _rows(p_prev, 2)
        self.p_key = _rows(p_key, 2)
        self.p_cur = _rows(p_cur, 2)
        self.point_from_prev_pair = _rows(point_from_prev_pair, 3)
        self.point_from_cur_pair = _rows(point_from_cur_pair, 3)
        self.point_key_from_cur_pair = (np.zeros((len(self.p_key), 3)) if point_key_from_cur_pair is None
                                        else _rows(point_key_from_cur_pair, 3))
        self.confidence = np.array(confidence, dtype=float).reshape(-1)
        self.src_prev = np.array(src_prev, dtype=np.int64).reshape(-1)
        self.src_cur = np.array(src_cur, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.p_key)

    def __getitem__(self, i):
        return TriViewMatch(self.p_prev[i], self.p_key[i], self.p_cur[i], self.point_from_prev_pair[i],
                            self.point_from_cur_pair[i], float(self.confidence[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.nonzero(idx)[0]
        return TriViewSet(self.key_id, self.p_prev[idx], self.p_key[idx], self.p_cur[idx],
                          self.point_from_prev_pair[idx], self.point_from_cur_pair[idx], self.confidence[idx],
                          self.src_prev[idx], self.src_cur[idx], self.point_key_from_cur_pair[idx])


def bridge_triplets(m_prev_key, m_key_cur, join_tol=DEFAULT_JOIN_TOL):
    """Join ``M_{k-1,k}`` and ``M_{k,t}`` on their shared frame ``k``.

    Records of the current pair are visited by descending confidence (ties by
    index); each takes the nearest still-unused key-frame pixel of the
    previous pair within ``join_tol``. Output is sorted row-major by the key
    pixel.
    """
    if m_prev_key.b != m_key_cur.a:
        raise ValueError(f"bridge frame mismatch: previous pair ends at {m_prev_key.b}, "
                         f"current pair starts at {m_key_cur.a}")
    if join_tol < 0:
        raise ValueError("join_tol must be non-negative")
    key = m_key_cur.a
    empty = TriViewSet(key, [], [], [], [], [], [], [], [])
    if len(m_prev_key) == 0 or len(m_key_cur) == 0:
        return empty
    prev_px, cur_px = m_prev_key.pixel_b, m_key_cur.pixel_a
    tree = cKDTree(prev_px)
    cands = tree.query_ball_point(cur_px, r=join_tol)
    order = np.lexsort((np.arange(len(m_key_cur)), -m_key_cur.confidence))
    used = np.zeros(len(m_prev_key), dtype=bool)
    pairs = []
    for i in order:
        js = cands[i]
        if not js:
            continue
        js = np.asarray(js)
        js = js[~used[js]]
        if not len(js):
            continue
        d = np.sum((prev_px[js] - cur_px[i]) ** 2, axis=1)
        j = int(js[np.lexsort((js, d))[0]])
        used[j] = True
        pairs.append((j, i))
    if not pairs:
        return empty
    jp, ic = np.array(pairs).T
    p_key = cur_px[ic]
    srt = np.lexsort((ic, p_key[:, 0], p_key[:, 1]))
    jp, ic = jp[srt], ic[srt]
    return TriViewSet(key, m_prev_key.pixel_a[jp], cur_px[ic], m_key_cur.pixel_b[ic],
                      m_prev_key.point_in_b[jp], m_key_cur.point_in_b[ic],
                      np.minimum(m_prev_key.confidence[jp], m_key_cur.confidence[ic]), jp, ic,
                      m_key_cur.point_in_a[ic])


def parallax_angles(points_key, pose_prev, pose_key, pose_cur, scale=1.0):
    """Angle (degrees) between the previous-frame and current-frame rays of each point.

    Points live in key-frame coordinates; poses are camera-from-world.
    """
    X = pose_key.inverse().apply(np.asarray(points_key, float).reshape(-1, 3) * scale)
    r1 = X - pose_prev.inverse().t
    r2 = X - pose_cur.inverse().t
    n1 = np.linalg.norm(r1, axis=1)
    n2 = np.linalg.norm(r2, axis=1)
    cross = np.linalg.norm(np.cross(r1, r2), axis=1)
    dot = np.sum(r1 * r2, axis=1)
    ang = np.degrees(np.arctan2(cross, dot))
    return np.where((n1 > 0) & (n2 > 0), ang, 0.0)


def filter_parallax(triplets, pose_prev, pose_key, pose_cur, min_parallax=DEFAULT_MIN_PARALLAX,
                    min_confidence=DEFAULT_MIN_CONFIDENCE, scale=1.0, key_parallax=False):
    """Keep triplets with enough parallax between I_{k-1} and I_t and enough confidence.

    With ``key_parallax`` the I_{k-1} / I_k ray angle must clear the same
    threshold; point transfer triangulates from those two views.
    """
    if len(triplets) == 0:
        return triplets
    P = triplets.point_from_prev_pair
    ang = parallax_angles(P, pose_prev, pose_key, pose_cur, scale)
    keep = (ang >= min_parallax) & (triplets.confidence >= min_confidence)
    if key_parallax:
        keep &= parallax_angles(P, pose_prev, pose_key, pose_key, scale) >= min_parallax
    return triplets.subset(keep)


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def save_matches(mset, path):
    lines = [f"{MAGIC} {mset.a} {mset.b} {len(mset)} {mset.pair_scale!r}"]
    data = np.concatenate([mset.pixel_a, mset.pixel_b, mset.point_in_a, mset.point_in_b,
                           mset.confidence[:, None]], axis=1)
    for row in data:
        lines.append(",".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_matches(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatchFileError("empty file, expected header", line=1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != MAGIC:
        raise MatchFileError(f"bad header {lines[0]!r}, expected '{MAGIC} frame_a frame_b count pair_scale'",
                             line=1)
    try:
        a, b, count = int(head[1]), int(head[2]), int(head[3])
        scale = float(head[4])
    except ValueError as exc:
        raise MatchFileError(f"bad header field: {exc}", line=1) from None
    if count < 0 or not (math.isfinite(scale) and scale > 0):
        raise MatchFileError("count must be >= 0 and pair_scale positive", line=1)
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != count:
        raise MatchFileError(f"header declares {count} rows, found {len(body)}", line=len(lines))
    data = np.zeros((count, 11))
    for r, ln in enumerate(body):
        lineno = r + 2
        parts = ln.split(",")
        if len(parts) != 11:
            raise MatchFileError(f"row {r} has {len(parts)} fields, expected 11", line=lineno)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise MatchFileError(f"row {r} has a non-numeric field", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise MatchFileError(f"row {r} contains NaN or Inf", line=lineno)
        if vals[6] <= 0 or vals[9] <= 0:
            raise MatchFileError(f"row {r} has non-positive depth", line=lineno)
        if not 0 <= vals[10] <= 1:
            raise MatchFileError(f"row {r} has confidence outside [0, 1]", line=lineno)
        data[r] = vals
    return PairwiseMatchSet(a, b, data[:, 0:2], data[:, 2:4], data[:, 4:7], data[:, 7:10], data[:, 10], scale)
