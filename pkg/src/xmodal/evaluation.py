"""Retrieval, verification, keypoint-transfer and mask-overlap metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import registration, rigid
from .phantom import KEYPOINT_NAMES, MASK_NAMES
from .rigid import RigidTransform2D

KEYPOINT_GROUPS = {
    "hip_joints": ("hip_left", "hip_right"),
    "shoulder_joints": ("shoulder_left", "shoulder_right"),
    "spine_base": ("spine_base",),
}


@dataclass
class RetrievalReport:
    recall_at_1: float  # percent
    recall_at_5: float
    recall_at_10: float
    mean_rank: float
    ranks: list


@dataclass
class VerificationReport:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    eer: float
    tpr_at_fpr1: float


@dataclass
class KeypointReport:
    errors_cm: dict  # keypoint name -> error
    mean_cm: float
    median_cm: float
    groups: dict  # group -> (mean, sd)


def retrieval_metrics(m: np.ndarray) -> RetrievalReport:
    """Rank of each row's true match among its columns (pessimal ties)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {m.shape}")
    n = m.shape[0]
    diag = np.diag(m)
    # true match ranked after every candidate scoring >= it (itself included once)
    ranks = (m >= diag[:, None]).sum(axis=1)
    ranks = np.maximum(ranks, 1)

    def recall(k):
        return float((ranks <= k).mean() * 100.0)

    return RetrievalReport(recall_at_1=recall(1), recall_at_5=recall(5),
                           recall_at_10=recall(10), mean_rank=float(ranks.mean()),
                           ranks=ranks.tolist())


def roc_curve(pos: np.ndarray, neg: np.ndarray):
    """ROC points from sweeping the decision threshold over all scores."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for th in thresholds:
        tpr.append(float((pos >= th).mean()))
        fpr.append(float((neg >= th).mean()))
    return np.asarray(fpr), np.asarray(tpr)


def auc_trapezoid(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.trapezoid(tpr, fpr))


def auc_pairwise(pos: np.ndarray, neg: np.ndarray) -> float:
    """Fraction of (positive, negative) pairs ordered correctly, ties as 1/2."""
    pos = np.asarray(pos, dtype=np.float64)[:, None]
    neg = np.asarray(neg, dtype=np.float64)[None, :]
    wins = (pos > neg).sum() + 0.5 * (pos == neg).sum()
    return float(wins / (pos.size * neg.size))


def _interp_crossing(fpr, tpr):
    # EER: where TPR = 1 - FPR along the ROC polyline
    f = tpr - (1.0 - fpr)
    idx = int(np.argmax(f >= 0))
    if idx == 0:
        return float(fpr[0])
    f0, f1 = f[idx - 1], f[idx]
    w = 0.0 if f1 == f0 else -f0 / (f1 - f0)
    return float(fpr[idx - 1] + w * (fpr[idx] - fpr[idx - 1]))


def verification_metrics(m: np.ndarray) -> VerificationReport:
    """Diagonal entries are positives, off-diagonal negatives."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("similarity matrix must be square")
    if n < 2:
        raise ValueError("need at least 2 scans for verification metrics")
    pos = np.diag(m)
    neg = m[~np.eye(n, dtype=bool)]
    fpr, tpr = roc_curve(pos, neg)
    auc = auc_trapezoid(fpr, tpr)
    eer = _interp_crossing(fpr, tpr)
    tpr_at = float(np.interp(0.01, fpr, tpr))
    return VerificationReport(fpr=fpr, tpr=tpr, auc=auc, eer=eer, tpr_at_fpr1=tpr_at)


def keypoint_transfer_error(t: RigidTransform2D, kps_b: dict, kps_a: dict,
                            spacing_mm: float) -> KeypointReport:
    """Per-keypoint L2 error in cm after mapping B keypoints into the A frame."""
    if set(kps_b) != set(kps_a):
        raise ValueError("keypoint label sets differ")
    if t.frame != "pixel":
        raise rigid.FrameError("transform must be in the pixel frame")
    errors = {}
    for name in KEYPOINT_NAMES:
        pb = np.asarray(kps_b[name], dtype=np.float64)
        pa = np.asarray(kps_a[name], dtype=np.float64)
        err_px = float(np.linalg.norm(rigid.apply(t, pb) - pa))
        errors[name] = err_px * spacing_mm / 10.0
    vals = np.array([errors[n] for n in KEYPOINT_NAMES])
    groups = {}
    for gname, members in KEYPOINT_GROUPS.items():
        g = np.array([errors[n] for n in members])
        groups[gname] = (float(g.mean()), float(g.std()))
    return KeypointReport(errors_cm=errors, mean_cm=float(vals.mean()),
                          median_cm=float(np.median(vals)), groups=groups)


def best_possible(kps_b: dict, kps_a: dict, spacing_mm: float):
    """Least-squares rigid transform over the keypoints and its error report."""
    names = [n for n in KEYPOINT_NAMES if n in kps_b]
    src = np.array([kps_b[n] for n in names], dtype=np.float64)
    tgt = np.array([kps_a[n] for n in names], dtype=np.float64)
    t = registration.fit_rigid_procrustes(src, tgt, frame="pixel")
    return t, keypoint_transfer_error(t, kps_b, kps_a, spacing_mm)


def dice(mask_p: np.ndarray, mask_q: np.ndarray) -> float:
    """2|P&Q| / (|P|+|Q|); defined as 1.0 when both masks are empty."""
    p = np.asarray(mask_p) > 0.5
    q = np.asarray(mask_q) > 0.5
    if p.shape != q.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {q.shape}")
    denom = int(p.sum()) + int(q.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & q).sum()) / denom


def transfer_mask(mask_b: np.ndarray, t: RigidTransform2D, out_shape) -> np.ndarray:
    """Warp a B-frame binary mask into the A frame (nearest neighbour)."""
    out = rigid.resample_rigid(mask_b.astype(np.float32), t, out_shape,
                               interp="nearest", fill=0.0)
    return (out > 0.5).astype(np.float32)


# ---------------------------------------------------------------------------
# Aggregation over a split (the keypoint-transfer benchmark table)
# ---------------------------------------------------------------------------


@dataclass
class MethodSummary:
    method: str
    group_stats: dict  # group -> (mean, sd) in cm
    median_cm: float
    mean_cm: float
    sd_cm: float
    runtime_s: float
    n_pairs: int


def summarize_keypoint_reports(method: str, reports: list,
                               runtimes=None) -> MethodSummary:
    all_errors = []
    per_group = {g: [] for g in KEYPOINT_GROUPS}
    for rep in reports:
        for g, members in KEYPOINT_GROUPS.items():
            per_group[g].extend(rep.errors_cm[n] for n in members)
        all_errors.extend(rep.errors_cm[n] for n in KEYPOINT_NAMES)
    arr = np.asarray(all_errors)
    return MethodSummary(
        method=method,
        group_stats={g: (float(np.mean(v)), float(np.std(v))) for g, v in per_group.items()},
        median_cm=float(np.median(arr)),
        mean_cm=float(arr.mean()),
        sd_cm=float(arr.std()),
        runtime_s=float(np.mean(runtimes)) if runtimes else 0.0,
        n_pairs=len(reports),
    )
