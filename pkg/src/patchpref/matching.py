"""Max-cosine patch matching: quality maps, matching scores, heatmaps.

The quality of a query patch is its best cosine similarity against every
patch of the counterpart image. The blocked path row-normalizes both feature
grids and reduces a single similarity matrix; the naive double-loop path is
kept as the oracle it is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, upsample_nearest

NORM_EPS = 1e-12


def cosine(u, v) -> float:
    """Cosine similarity with a zero-norm guard; result in [-1, 1]."""
    u = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ContractError(f"cosine: vector shapes {u.shape} vs {v.shape}")
    nu = max(float(np.linalg.norm(u)), NORM_EPS)
    nv = max(float(np.linalg.norm(v)), NORM_EPS)
    return float(u @ v) / (nu * nv)


def _cells(feature_map) -> tuple:
    """[D,H,W] feature map -> ((H*W, D) row matrix, H, W)."""
    fm = feature_map.data if isinstance(feature_map, Tensor) else np.asarray(feature_map)
    if fm.ndim != 3:
        raise ContractError(f"feature map must be [D,H,W], got {fm.shape}")
    d, h, w = fm.shape
    return fm.reshape(d, h * w).T.copy(), h, w


@dataclass
class PatchQualityMap:
    raw: Tensor            # [H,W] max cosine per query patch, in [-1,1]
    argmax: np.ndarray     # [H,W] linear cell index into the reference grid
    direction: str = ""
    source_layer: int = 0


def patch_quality(query, reference, direction: str = "",
                  source_layer: int = 0) -> PatchQualityMap:
    """Best cosine match for every query patch over all reference patches.

    Blocked path: normalize rows once, one matmul, row-wise max. Ties break
    to the smallest row-major reference index.
    """
    q, qh, qw = _cells(query)
    r, _, _ = _cells(reference)
    if q.shape[1] != r.shape[1]:
        raise ContractError(
            f"feature dims differ: {q.shape[1]} vs {r.shape[1]}")
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), NORM_EPS)
    rn = r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), NORM_EPS)
    sim = qn @ rn.T
    raw = sim.max(axis=1).reshape(qh, qw)
    arg = sim.argmax(axis=1).reshape(qh, qw)
    return PatchQualityMap(raw=Tensor(raw), argmax=arg, direction=direction,
                           source_layer=source_layer)


def patch_quality_naive(query, reference, direction: str = "",
                        source_layer: int = 0) -> PatchQualityMap:
    """Double-loop oracle for patch_quality; O(H^2 W^2 D)."""
    q, qh, qw = _cells(query)
    r, _, _ = _cells(reference)
    if q.shape[1] != r.shape[1]:
        raise ContractError(
            f"feature dims differ: {q.shape[1]} vs {r.shape[1]}")
    raw = np.empty((qh * qw,))
    arg = np.empty((qh * qw,), dtype=np.int64)
    for i in range(q.shape[0]):
        best, best_j = -2.0, 0
        for j in range(r.shape[0]):
            s = cosine(q[i], r[j])
            if s > best:
                best, best_j = s, j
        raw[i] = best
        arg[i] = best_j
    return PatchQualityMap(raw=Tensor(raw.reshape(qh, qw)),
                           argmax=arg.reshape(qh, qw),
                           direction=direction, source_layer=source_layer)


def s_patch(corpus, state, layer: int) -> float:
    """Mean patch-matching accuracy over all ordered image pairs per group.

    The prediction for each patch is its max-cosine match in the other image;
    a hit means the prediction equals the analytic ground-truth index.
    """
    hits = 0
    total = 0
    for g, group in enumerate(corpus.groups):
        feats = [state.encode(img).layer(layer) for img in group.images]
        n = len(group.images)
        for a in range(n):
            for b in range(n):
                if a == b:
                    continue
                pred = patch_quality(feats[a], feats[b]).argmax.reshape(-1)
                gt = corpus.gt_map(g, a, b)
                hits += int((pred == gt).sum())
                total += gt.size
    return hits / total


@dataclass
class WeightMap:
    values: Tensor  # [imageH, imageW] in [0,1], constant on patch blocks


def normalize_quality(raw: Tensor, invert: bool = False,
                      mode: str = "affine") -> Tensor:
    """Map raw cosines to [0,1]; affine (p+1)/2 by default, or per-map minmax."""
    if mode == "affine":
        n = np.clip((raw.data + 1.0) / 2.0, 0.0, 1.0)
    elif mode == "minmax":
        lo, hi = raw.data.min(), raw.data.max()
        n = np.full_like(raw.data, 0.5) if hi <= lo else (raw.data - lo) / (hi - lo)
    else:
        raise ConfigError(f"unknown normalization mode {mode!r}")
    if invert:
        n = 1.0 - n
    return Tensor(n)


def normalize_upsample(qmap: PatchQualityMap, image_h: int, image_w: int,
                       invert: bool = False, mode: str = "affine") -> WeightMap:
    """Normalized quality map upsampled to pixel resolution."""
    n = normalize_quality(qmap.raw, invert=invert, mode=mode)
    return WeightMap(values=upsample_nearest(n, image_h, image_w))


def heatmap(query, target_patch: tuple, reference) -> Tensor:
    """Similarity of one query patch against every reference patch."""
    q, qh, qw = _cells(query)
    r, rh, rw = _cells(reference)
    h, w = target_patch
    if not (0 <= h < qh and 0 <= w < qw):
        raise ContractError(f"patch {target_patch} outside grid {qh}x{qw}")
    vec = q[h * qw + w]
    out = np.array([cosine(vec, r[j]) for j in range(r.shape[0])])
    return Tensor(out.reshape(rh, rw))


def write_pgm(values, path) -> None:
    """Binary 8-bit PGM; input values are clamped scores in [0,1]."""
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    if arr.ndim != 2:
        raise ContractError(f"PGM export needs a 2-D map, got shape {arr.shape}")
    pixels = np.round(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + pixels.tobytes(order="C"))


def heatmap_to_unit(z: Tensor) -> Tensor:
    """Affine rescale of a cosine heatmap from [-1,1] to [0,1] for export."""
    return Tensor(np.clip((z.data + 1.0) / 2.0, 0.0, 1.0))
