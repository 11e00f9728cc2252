"""Correlation of normalized feature maps across translation offsets.

The similarity of two scans is the maximum over integer feature-map offsets
of the mean per-location cosine between the overlapping regions. Computed via
FFT cross-correlation (matches the direct sliding-window sum to ~1e-6);
offsets with too little overlap are masked out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .encoder import FeatureMap

DEFAULT_MIN_OVERLAP = 0.25


class SimilarityError(ValueError):
    pass


@dataclass
class CorrelationMap:
    values: np.ndarray  # (Hd, Wd) mean cosine per offset
    offset_origin: tuple  # offset (dy, dx) at index (0, 0)
    overlap_counts: np.ndarray  # (Hd, Wd) int
    valid: np.ndarray  # (Hd, Wd) bool, False where overlap below threshold


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (N, N); row i = A index, column j = B index
    offsets: np.ndarray  # (N, N, 2) argmax (dy, dx) per entry
    counts: np.ndarray  # (N, N) overlap count at the argmax


def _require_normalized(f: FeatureMap, name: str):
    if not f.normalized:
        raise SimilarityError(f"{name} must be L2-normalized per location")


def _overlap_counts(ha, wa, hb, wb):
    dys = np.arange(-(hb - 1), ha)
    dxs = np.arange(-(wb - 1), wa)
    oh = np.minimum(ha, dys + hb) - np.maximum(0, dys)
    ow = np.minimum(wa, dxs + wb) - np.maximum(0, dxs)
    return np.outer(oh, ow)


def _fft_shapes(ha, wa, hb, wb):
    return sfft.next_fast_len(ha + hb - 1), sfft.next_fast_len(wa + wb - 1)


def _reorder(circ: np.ndarray, ha, wa, hb, wb):
    # circular correlation -> linear offsets dy in [-(hb-1), ha-1], same for dx
    s0, s1 = circ.shape[-2], circ.shape[-1]
    iy = np.arange(-(hb - 1), ha) % s0
    ix = np.arange(-(wb - 1), wa) % s1
    return circ[..., iy[:, None], ix[None, :]]


def _raw_correlation_fft(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    # va: (C, ha, wa), vb: (C, hb, wb) -> raw dot-product sums per offset
    c, ha, wa = va.shape
    _, hb, wb = vb.shape
    s0, s1 = _fft_shapes(ha, wa, hb, wb)
    fa = sfft.rfft2(va, s=(s0, s1))
    fb = sfft.rfft2(vb, s=(s0, s1))
    circ = sfft.irfft2((fa * np.conj(fb)).sum(axis=0), s=(s0, s1))
    return _reorder(circ, ha, wa, hb, wb)


def _raw_correlation_direct(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    c, ha, wa = va.shape
    _, hb, wb = vb.shape
    out = np.zeros((ha + hb - 1, wa + wb - 1), dtype=np.float64)
    for i, dy in enumerate(range(-(hb - 1), ha)):
        for j, dx in enumerate(range(-(wb - 1), wa)):
            ay0, ay1 = max(0, dy), min(ha, dy + hb)
            ax0, ax1 = max(0, dx), min(wa, dx + wb)
            by0, bx0 = ay0 - dy, ax0 - dx
            a = va[:, ay0:ay1, ax0:ax1]
            b = vb[:, by0 : by0 + (ay1 - ay0), bx0 : bx0 + (ax1 - ax0)]
            out[i, j] = float((a.astype(np.float64) * b).sum())
    return out


def correlation_map(fa: FeatureMap, fb: FeatureMap,
                    min_overlap_frac: float = DEFAULT_MIN_OVERLAP,
                    method: str = "fft") -> CorrelationMap:
    """Mean-cosine correlation of ``fb`` slid over ``fa`` at every offset."""
    _require_normalized(fa, "fa")
    _require_normalized(fb, "fb")
    va, vb = fa.values, fb.values
    if va.shape[0] != vb.shape[0]:
        raise SimilarityError("feature maps have different channel counts")
    _, ha, wa = va.shape
    _, hb, wb = vb.shape
    raw = (_raw_correlation_fft if method == "fft" else _raw_correlation_direct)(va, vb)
    counts = _overlap_counts(ha, wa, hb, wb)
    min_count = max(1, int(np.ceil(min_overlap_frac * hb * wb)))
    valid = counts >= min_count
    if not valid.any():
        raise SimilarityError("no offset satisfies the minimum-overlap threshold")
    values = raw / counts
    return CorrelationMap(values=values.astype(np.float64),
                          offset_origin=(-(hb - 1), -(wb - 1)),
                          overlap_counts=counts, valid=valid)


def best_offset(cmap: CorrelationMap):
    """(score, (dy, dx), count) of the max over unmasked offsets; ties take
    the smallest (dy, dx) lexicographically."""
    masked = np.where(cmap.valid, cmap.values, -np.inf)
    flat = int(np.argmax(masked))
    i, j = np.unravel_index(flat, masked.shape)
    dy = int(i) + cmap.offset_origin[0]
    dx = int(j) + cmap.offset_origin[1]
    return float(masked[i, j]), (dy, dx), int(cmap.overlap_counts[i, j])


def similarity_score(fa: FeatureMap, fb: FeatureMap,
                     min_overlap_frac: float = DEFAULT_MIN_OVERLAP,
                     method: str = "fft") -> float:
    score, _, _ = best_offset(correlation_map(fa, fb, min_overlap_frac, method))
    return score


def similarity_matrix(fas: list, fbs: list,
                      min_overlap_frac: float = DEFAULT_MIN_OVERLAP) -> SimilarityMatrix:
    """All-pairs similarity; entry (i, j) equals similarity_score(fas[i], fbs[j])."""
    if len(fas) != len(fbs):
        raise SimilarityError(f"list lengths differ: {len(fas)} vs {len(fbs)}")
    n = len(fas)
    for f in fas + fbs:
        _require_normalized(f, "feature map")
    va = np.stack([f.values for f in fas]).astype(np.float32)
    vb = np.stack([f.values for f in fbs]).astype(np.float32)
    _, c, ha, wa = va.shape
    _, _, hb, wb = vb.shape
    s0, s1 = _fft_shapes(ha, wa, hb, wb)
    fa_hat = sfft.rfft2(va, s=(s0, s1)).astype(np.complex64)
    fb_hat = np.conj(sfft.rfft2(vb, s=(s0, s1))).astype(np.complex64)
    prod = np.einsum("icyx,jcyx->ijyx", fa_hat, fb_hat)
    circ = sfft.irfft2(prod, s=(s0, s1))
    raw = _reorder(circ, ha, wa, hb, wb)

    counts = _overlap_counts(ha, wa, hb, wb)
    min_count = max(1, int(np.ceil(min_overlap_frac * hb * wb)))
    valid = counts >= min_count
    if not valid.any():
        raise SimilarityError("no offset satisfies the minimum-overlap threshold")
    mean = raw / counts
    masked = np.where(valid, mean, -np.inf)
    flat = masked.reshape(n, n, -1)
    arg = flat.argmax(axis=2)
    iy, ix = np.unravel_index(arg, masked.shape[2:])
    offsets = np.stack([iy - (hb - 1), ix - (wb - 1)], axis=-1)
    values = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
    at_counts = counts[iy, ix]
    return SimilarityMatrix(values=values.astype(np.float64), offsets=offsets,
                            counts=at_counts)


def similarity_matrix_backward(fas: list, fbs: list, result: SimilarityMatrix,
                               grad_values: np.ndarray):
    """Gradients of the similarity matrix wrt the normalized feature values.

    The max over offsets is differentiated through its (deterministic) argmax;
    only the overlap region at that offset receives gradient.
    """
    n = len(fas)
    dfa = [np.zeros_like(f.values) for f in fas]
    dfb = [np.zeros_like(f.values) for f in fbs]
    _, ha, wa = fas[0].values.shape
    _, hb, wb = fbs[0].values.shape
    for i in range(n):
        for j in range(n):
            g = grad_values[i, j]
            if g == 0.0:
                continue
            dy, dx = int(result.offsets[i, j, 0]), int(result.offsets[i, j, 1])
            cnt = float(result.counts[i, j])
            ay0, ay1 = max(0, dy), min(ha, dy + hb)
            ax0, ax1 = max(0, dx), min(wa, dx + wb)
            by0, bx0 = ay0 - dy, ax0 - dx
            by1, bx1 = by0 + (ay1 - ay0), bx0 + (ax1 - ax0)
            scale = g / cnt
            dfa[i][:, ay0:ay1, ax0:ax1] += scale * fbs[j].values[:, by0:by1, bx0:bx1]
            dfb[j][:, by0:by1, bx0:bx1] += scale * fas[i].values[:, ay0:ay1, ax0:ax1]
    return dfa, dfb
