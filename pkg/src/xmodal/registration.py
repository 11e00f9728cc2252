"""Unsupervised rigid registration between the two modalities.

Four estimators, all producing a transform that maps modality-B pixel
coordinates into modality-A pixel coordinates:

* dense: correlation argmax over translations, swept over a range of angles;
* salient: ratio-tested feature correspondences + RANSAC + LMEDS + rigid refit;
* refined: a small regression network correcting an initial estimate;
* mi: mutual-information maximization over a coarse-to-fine parameter grid.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc_mod
from . import nn, rigid, similarity
from .encoder import FeatureMap
from .phantom import Scan
from .rigid import RigidTransform2D
from .tensorio import read_tensor, write_tensor


@dataclass
class CorrespondenceSet:
    src: np.ndarray  # (M, 2) (x, y) in source (B) feature coords
    tgt: np.ndarray  # (M, 2) (x, y) in target (A) feature coords
    first_sim: np.ndarray  # (M,)
    second_sim: np.ndarray  # (M,)

    def __len__(self):
        return len(self.src)


class RegistrationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Closed-form and robust rigid fitting
# ---------------------------------------------------------------------------


def fit_rigid_procrustes(src: np.ndarray, tgt: np.ndarray,
                         weights: np.ndarray | None = None,
                         frame: str = "pixel") -> RigidTransform2D:
    """Least-squares rigid fit (rotation + translation, no scale)."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if len(src) < 2:
        raise RegistrationError("need at least 2 points")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cs = (src * w[:, None]).sum(axis=0)
    ct = (tgt * w[:, None]).sum(axis=0)
    s = src - cs
    t = tgt - ct
    if float((w * (s ** 2).sum(axis=1)).sum()) < 1e-12:
        raise RegistrationError("coincident source points")
    dot = float((w * (s * t).sum(axis=1)).sum())
    cross = float((w * (s[:, 0] * t[:, 1] - s[:, 1] * t[:, 0])).sum())
    theta = np.arctan2(cross, dot)
    r = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    trans = ct - r @ cs
    return RigidTransform2D(tx=float(trans[0]), ty=float(trans[1]),
                            theta=float(np.rad2deg(theta)), frame=frame)


@dataclass
class RobustFitConfig:
    ransac_iters: int = 1000
    inlier_thresh: float = 1.5  # feature px
    lmeds_samples: int = 500
    seed: int = 0


def _minimal_fits(zs: np.ndarray, zt: np.ndarray, idx: np.ndarray):
    """Vectorized 2-point rigid fits in complex form; returns (rot, trans)."""
    s0, s1 = zs[idx[:, 0]], zs[idx[:, 1]]
    t0, t1 = zt[idx[:, 0]], zt[idx[:, 1]]
    ds, dt = s1 - s0, t1 - t0
    ok = np.abs(ds) > 1e-9
    rot = np.where(ok, dt * np.conj(ds) / np.maximum(np.abs(dt * np.conj(ds)), 1e-30), 1.0)
    # pure rotation: unit modulus
    rot = rot / np.maximum(np.abs(rot), 1e-30)
    cs, ctr = (s0 + s1) / 2, (t0 + t1) / 2
    trans = ctr - rot * cs
    return rot, trans, ok


def fit_rigid_robust(corr: CorrespondenceSet, cfg: RobustFitConfig | None = None,
                     frame: str = "feature") -> RigidTransform2D:
    """RANSAC inlier selection, LMEDS model selection, then a rigid refit.

    Correspondences are canonically sorted first, so the result does not
    depend on the input ordering.
    """
    cfg = cfg or RobustFitConfig()
    if len(corr) < 2:
        raise RegistrationError("need at least 2 correspondences")
    order = np.lexsort((corr.tgt[:, 1], corr.tgt[:, 0], corr.src[:, 1], corr.src[:, 0]))
    src = np.asarray(corr.src, dtype=np.float64)[order]
    tgt = np.asarray(corr.tgt, dtype=np.float64)[order]
    zs = src[:, 0] + 1j * src[:, 1]
    zt = tgt[:, 0] + 1j * tgt[:, 1]
    n = len(zs)
    rng = np.random.default_rng(np.random.SeedSequence([0x7AB5AC, cfg.seed]))

    idx = rng.integers(0, n, size=(cfg.ransac_iters, 2))
    idx = idx[idx[:, 0] != idx[:, 1]]
    if len(idx) == 0:
        raise RegistrationError("all samples degenerate")
    rot, trans, ok = _minimal_fits(zs, zt, idx)
    resid = np.abs(rot[:, None] * zs[None, :] + trans[:, None] - zt[None, :])
    counts = np.where(ok, (resid < cfg.inlier_thresh).sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < 2:
        raise RegistrationError("no consistent sample found")
    inliers = resid[best] < cfg.inlier_thresh
    zi_s, zi_t = zs[inliers], zt[inliers]
    ni = int(inliers.sum())

    # LMEDS over minimal samples of the inlier set
    idx2 = rng.integers(0, ni, size=(cfg.lmeds_samples, 2))
    idx2 = idx2[idx2[:, 0] != idx2[:, 1]]
    if len(idx2) == 0:
        idx2 = np.array([[0, 1]])
    rot2, trans2, ok2 = _minimal_fits(zi_s, zi_t, idx2)
    res2 = np.abs(rot2[:, None] * zi_s[None, :] + trans2[:, None] - zi_t[None, :]) ** 2
    med = np.where(ok2, np.median(res2, axis=1), np.inf)
    pick = int(np.argmin(med))
    sigma = 1.4826 * (1 + 5.0 / max(ni - 2, 1)) * np.sqrt(max(med[pick], 0.0))
    keep = np.sqrt(res2[pick]) <= max(2.5 * sigma, 1e-6)
    if keep.sum() < 2:
        keep = np.ones(ni, dtype=bool)
    pts_s = np.stack([zi_s.real, zi_s.imag], axis=1)[keep]
    pts_t = np.stack([zi_t.real, zi_t.imag], axis=1)[keep]
    return fit_rigid_procrustes(pts_s, pts_t, frame=frame)


# ---------------------------------------------------------------------------
# Salient point matching
# ---------------------------------------------------------------------------


def match_salient(fa: FeatureMap, fb: FeatureMap, ratio: float = 0.8,
                  direction: str = "standard", subcell: bool = False) -> CorrespondenceSet:
    """Second-nearest-neighbour ratio-tested correspondences (B -> A).

    ``direction="standard"`` keeps a match iff second < ratio * first (the
    usual ambiguity test); ``direction="inverted"`` implements the opposite
    inequality. ``subcell`` refines each kept target location by a parabolic
    fit of the similarity profile around the peak.
    """
    if not (0 < ratio <= 1):
        raise RegistrationError("ratio must be in (0, 1]")
    if not (fa.normalized and fb.normalized):
        raise RegistrationError("feature maps must be normalized")
    c, ha, wa = fa.values.shape
    _, hb, wb = fb.values.shape
    va = fa.values.reshape(c, ha * wa).T  # (Na, C)
    vb = fb.values.reshape(c, hb * wb).T  # (Nb, C)
    sims = vb @ va.T  # (Nb, Na)
    top2 = np.argpartition(-sims, 1, axis=1)[:, :2]
    s_pair = np.take_along_axis(sims, top2, axis=1)
    swap = s_pair[:, 0] < s_pair[:, 1]
    top2[swap] = top2[swap][:, ::-1]
    s_pair[swap] = s_pair[swap][:, ::-1]
    s1, s2 = s_pair[:, 0], s_pair[:, 1]
    if direction == "standard":
        keep = s2 < ratio * s1
    elif direction == "inverted":
        keep = ratio * s1 < s2
    else:
        raise RegistrationError(f"unknown ratio-test direction {direction!r}")

    kept = np.nonzero(keep)[0]
    src = np.stack([kept % wb, kept // wb], axis=1).astype(np.float64)
    best = top2[kept, 0]
    ty, tx = best // wa, best % wa
    tgt = np.stack([tx, ty], axis=1).astype(np.float64)
    if subcell and len(kept):
        grid = sims[kept].reshape(-1, ha, wa)
        for k in range(len(kept)):
            iy, ix = int(ty[k]), int(tx[k])
            if 0 < ix < wa - 1:
                sm, s0, sp = grid[k, iy, ix - 1], grid[k, iy, ix], grid[k, iy, ix + 1]
                den = sm - 2 * s0 + sp
                if den < -1e-12:
                    tgt[k, 0] += float(np.clip(0.5 * (sm - sp) / den, -0.5, 0.5))
            if 0 < iy < ha - 1:
                sm, s0, sp = grid[k, iy - 1, ix], grid[k, iy, ix], grid[k, iy + 1, ix]
                den = sm - 2 * s0 + sp
                if den < -1e-12:
                    tgt[k, 1] += float(np.clip(0.5 * (sm - sp) / den, -0.5, 0.5))
    return CorrespondenceSet(src=src, tgt=tgt, first_sim=s1[kept], second_sim=s2[kept])


def estimate_salient(fa: FeatureMap, fb: FeatureMap, ratio: float = 0.8,
                     robust_cfg: RobustFitConfig | None = None,
                     subcell: bool = True) -> RigidTransform2D:
    """Full salient-point pipeline, returning a pixel-frame transform."""
    corr = match_salient(fa, fb, ratio=ratio, subcell=subcell)
    t_feat = fit_rigid_robust(corr, robust_cfg, frame="feature")
    return rigid.to_pixel_coords(t_feat)


# ---------------------------------------------------------------------------
# Dense correlation sweep
# ---------------------------------------------------------------------------


def _parabolic_peak(y_prev: float, y_best: float, y_next: float) -> float:
    """Sub-sample offset of the vertex of the parabola through three samples."""
    denom = y_prev - 2.0 * y_best + y_next
    if denom >= 0 or not np.isfinite(denom):
        return 0.0
    return float(np.clip(0.5 * (y_prev - y_next) / denom, -0.5, 0.5))


def _subcell_offset(cmap, dy: int, dx: int) -> tuple:
    """Parabolic sub-cell refinement of a correlation-map argmax."""
    i = dy - cmap.offset_origin[0]
    j = dx - cmap.offset_origin[1]
    vals = np.where(cmap.valid, cmap.values, -np.inf)
    fy = fx = 0.0
    if 0 < i < vals.shape[0] - 1 and np.isfinite(vals[i - 1, j]) and np.isfinite(vals[i + 1, j]):
        fy = _parabolic_peak(vals[i - 1, j], vals[i, j], vals[i + 1, j])
    if 0 < j < vals.shape[1] - 1 and np.isfinite(vals[i, j - 1]) and np.isfinite(vals[i, j + 1]):
        fx = _parabolic_peak(vals[i, j - 1], vals[i, j], vals[i, j + 1])
    return dy + fy, dx + fx


def estimate_dense(fa: FeatureMap, fb: FeatureMap, angle_range: float = 10.0,
                   angle_step: float = 1.0, model: enc_mod.DualEncoder | None = None,
                   scan_b: Scan | None = None,
                   min_overlap_frac: float = similarity.DEFAULT_MIN_OVERLAP,
                   subcell: bool = True,
                   return_score: bool = False):
    """Correlation argmax over translations, swept over rotation angles.

    With ``model`` and ``scan_b`` the source scan is resampled and re-encoded
    per angle (the accurate mode); otherwise the feature map itself is rotated
    and renormalized (cheap, approximate). Returns a feature-frame transform.
    """
    if not (fa.normalized and fb.normalized):
        raise RegistrationError("feature maps must be normalized")
    angles = [0.0] if angle_range == 0 else \
        list(np.arange(-angle_range, angle_range + angle_step / 2, angle_step))
    hb_img, wb_img = fb.source_shape
    best = None
    angle_scores = {}
    for theta in angles:
        if model is not None and scan_b is not None:
            rot = RigidTransform2D(theta=theta, cx=(wb_img - 1) / 2, cy=(hb_img - 1) / 2)
            img = rigid.resample_rigid(scan_b.image, rot, (hb_img, wb_img))
            fb_t = enc_mod.encode(
                Scan(img, scan_b.modality, scan_b.spacing_mm, scan_b.channels),
                model).normalize()
        elif theta == 0.0:
            fb_t = fb
        else:
            _, hf, wf = fb.values.shape
            rot = RigidTransform2D(theta=theta, cx=(wf - 1) / 2, cy=(hf - 1) / 2)
            vals = rigid.resample_rigid(fb.values, rot, (hf, wf))
            fb_t = FeatureMap(nn.l2_normalize_locations(vals), fb.modality,
                              fb.source_shape, normalized=True)
        try:
            cmap = similarity.correlation_map(fa, fb_t, min_overlap_frac)
        except similarity.SimilarityError:
            continue
        score, (dy, dx), _ = similarity.best_offset(cmap)
        angle_scores[round(float(theta), 6)] = score
        if best is None or score > best[0]:
            best = (score, theta, dy, dx, cmap)
    if best is None:
        raise RegistrationError("no valid offset at any angle")
    score, theta, dy, dx = best[:4]
    dy, dx, theta = float(dy), float(dx), float(theta)
    if subcell:
        dy, dx = _subcell_offset(best[4], int(dy), int(dx))
        mid = round(theta, 6)
        lo, hi = round(theta - angle_step, 6), round(theta + angle_step, 6)
        if lo in angle_scores and hi in angle_scores:
            theta += angle_step * _parabolic_peak(
                angle_scores[lo], angle_scores[mid], angle_scores[hi])
    stride = rigid.FEATURE_STRIDE
    t = RigidTransform2D(tx=dx, ty=dy, theta=theta,
                         cx=(wb_img - 1) / 2 / stride, cy=(hb_img - 1) / 2 / stride,
                         frame="feature")
    return (t, score) if return_score else t


# ---------------------------------------------------------------------------
# Refinement regressor
# ---------------------------------------------------------------------------


@dataclass
class PerturbConfig:
    max_shift_px: float = 10.0
    max_rot_deg: float = 3.0
    copies: int = 16


class Refiner:
    """Small conv + FC network regressing a normalized (tx, ty, theta)."""

    def __init__(self, in_channels: int = 2 * enc_mod.EMBED_DIM, seed: int = 0,
                 perturb: PerturbConfig | None = None):
        rng = np.random.default_rng(np.random.SeedSequence([0x2EF1, int(seed)]))
        self.conv1 = nn.ConvLayer(in_channels, 64, 3, stride=2, rng=rng)
        self.relu1 = nn.ReLULayer()
        self.conv2 = nn.ConvLayer(64, 64, 3, stride=2, rng=rng)
        self.relu2 = nn.ReLULayer()
        self.fc1 = nn.LinearLayer(64, 128, rng=rng)
        self.relu3 = nn.ReLULayer()
        self.fc2 = nn.LinearLayer(128, 3, rng=rng)
        self.perturb = perturb or PerturbConfig()
        self.in_channels = in_channels

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        h = self.relu2.forward(self.conv2.forward(
            self.relu1.forward(self.conv1.forward(x, mode), mode), mode), mode)
        self._gap_shape = h.shape
        pooled = h.mean(axis=(2, 3))
        return self.fc2.forward(self.relu3.forward(self.fc1.forward(pooled, mode), mode), mode)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dpool = self.fc1.backward(self.relu3.backward(self.fc2.backward(dy)))
        n, c, h, w = self._gap_shape
        dh = np.broadcast_to(dpool[:, :, None, None], self._gap_shape) / (h * w)
        return self.conv1.backward(self.relu1.backward(
            self.conv2.backward(self.relu2.backward(dh.astype(dy.dtype)))))

    def _layers(self):
        return [("conv1", self.conv1), ("conv2", self.conv2),
                ("fc1", self.fc1), ("fc2", self.fc2)]

    def params(self):
        return [(f"{ln}.{n}", a) for ln, l in self._layers() for n, a in l.params()]

    def grads(self):
        return [(f"{ln}.{n}", a) for ln, l in self._layers() for n, a in l.grads()]

    def zero_grads(self):
        for _, l in self._layers():
            l.zero_grads()

    def cast(self, dtype):
        for _, l in self._layers():
            l.cast(dtype)


def _perturbed_features(scan_b: Scan, transform: RigidTransform2D, delta: RigidTransform2D,
                        model: enc_mod.DualEncoder, shape_a) -> np.ndarray:
    warp_t = rigid.compose(delta, transform)
    img = rigid.resample_rigid(scan_b.image, warp_t, shape_a)
    fm = enc_mod.encode(Scan(img, scan_b.modality, scan_b.spacing_mm, scan_b.channels),
                        model).normalize()
    return fm.values


def make_refiner_dataset(aligned, model: enc_mod.DualEncoder,
                         perturb: PerturbConfig, seed: int):
    """Self-generated training set: (target || perturbed-source) feature stacks
    with the known perturbation as the regression label.

    ``aligned`` is a list of (scan_a, scan_b, transform) with pixel-frame
    transforms mapping B into A.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xDA7A, int(seed)]))
    inputs, labels = [], []
    for scan_a, scan_b, transform in aligned:
        shape_a = scan_a.image.shape[1:]
        ca = rigid.image_center(shape_a)
        fa = enc_mod.encode(scan_a, model).normalize()
        for _ in range(perturb.copies):
            dtx = float(rng.uniform(-perturb.max_shift_px, perturb.max_shift_px))
            dty = float(rng.uniform(-perturb.max_shift_px, perturb.max_shift_px))
            dth = float(rng.uniform(-perturb.max_rot_deg, perturb.max_rot_deg))
            delta = RigidTransform2D(tx=dtx, ty=dty, theta=dth, cx=ca[0], cy=ca[1])
            fw = _perturbed_features(scan_b, transform, delta, model, shape_a)
            inputs.append(np.concatenate([fa.values, fw], axis=0))
            labels.append([dtx / perturb.max_shift_px, dty / perturb.max_shift_px,
                           dth / perturb.max_rot_deg])
    return np.stack(inputs).astype(np.float32), np.asarray(labels, dtype=np.float32)


def train_refiner(aligned, model: enc_mod.DualEncoder,
                  perturb: PerturbConfig | None = None, seed: int = 0,
                  steps: int = 1500, lr: float = 1e-3, batch_size: int = 16):
    """Train the refinement regressor; returns (Refiner, list of losses)."""
    from .train import adam_init, adam_step  # local import avoids a cycle

    if not aligned:
        raise RegistrationError("no aligned pairs given")
    perturb = perturb or PerturbConfig()
    inputs, labels = make_refiner_dataset(aligned, model, perturb, seed)
    net = Refiner(in_channels=inputs.shape[1], seed=seed, perturb=perturb)
    state = adam_init(net.params())
    rng = np.random.default_rng(np.random.SeedSequence([0x2EF17A, int(seed)]))
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(inputs), size=min(batch_size, len(inputs)))
        x, y = inputs[idx], labels[idx]
        net.zero_grads()
        pred = net.forward(x, "train")
        diff = pred - y
        loss = float((diff ** 2).mean())
        net.backward((2.0 * diff / diff.size).astype(np.float32))
        adam_step(net.params(), net.grads(), state, lr)
        losses.append(loss)
    return net, losses


def refine(initial: RigidTransform2D, scan_a: Scan, scan_b: Scan,
           model: enc_mod.DualEncoder, net: Refiner) -> RigidTransform2D:
    """Compose ``initial`` with the regressed correction (clamped to the
    perturbation bounds the network was trained with)."""
    if initial.frame != "pixel":
        raise rigid.FrameError("initial transform must be in the pixel frame")
    shape_a = scan_a.image.shape[1:]
    ca = rigid.image_center(shape_a)
    fa = enc_mod.encode(scan_a, model).normalize()
    img = rigid.resample_rigid(scan_b.image, initial, shape_a)
    fw = enc_mod.encode(Scan(img, scan_b.modality, scan_b.spacing_mm, scan_b.channels),
                        model).normalize()
    x = np.concatenate([fa.values, fw.values], axis=0)[None].astype(np.float32)
    pred = np.clip(net.forward(x, "eval")[0], -1.0, 1.0)
    delta = RigidTransform2D(tx=float(pred[0]) * net.perturb.max_shift_px,
                             ty=float(pred[1]) * net.perturb.max_shift_px,
                             theta=float(pred[2]) * net.perturb.max_rot_deg,
                             cx=ca[0], cy=ca[1])
    return rigid.compose(rigid.invert(delta), initial)


def save_refiner(path: str, net: Refiner) -> None:
    os.makedirs(path, exist_ok=True)
    header = {"in_channels": net.in_channels,
              "perturb": {"max_shift_px": net.perturb.max_shift_px,
                          "max_rot_deg": net.perturb.max_rot_deg,
                          "copies": net.perturb.copies}}
    entries = []
    for name, arr in net.params():
        fname = name.replace("/", "_") + ".ptn"
        write_tensor(os.path.join(path, fname), arr)
        entries.append({"tensor": name, "file": fname})
    tmp = os.path.join(path, "layers.jsonl.tmp")
    with open(tmp, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    os.replace(tmp, os.path.join(path, "layers.jsonl"))


def load_refiner(path: str) -> Refiner:
    index = os.path.join(path, "layers.jsonl")
    if not os.path.exists(index):
        raise enc_mod.CheckpointError(f"no refiner checkpoint at {path}")
    with open(index) as f:
        header = json.loads(f.readline())
        entries = [json.loads(line) for line in f]
    net = Refiner(in_channels=header["in_channels"],
                  perturb=PerturbConfig(**header["perturb"]))
    tensors = dict(net.params())
    for e in entries:
        arr = read_tensor(os.path.join(path, e["file"]))
        tensors[e["tensor"]][...] = arr
    return net


# ---------------------------------------------------------------------------
# Mutual-information baseline
# ---------------------------------------------------------------------------


@dataclass
class MIConfig:
    bins: int = 32
    trans_range: float = 18.0
    rot_range: float = 8.0
    trans_step: float = 6.0
    rot_step: float = 2.0
    levels: int = 4
    min_overlap_px: int = 200
    center: tuple | None = None  # search center (tx, ty); default = centered crop


@dataclass
class MIResult:
    transform: RigidTransform2D
    score: float
    low_confidence: bool


def _mi_score(img_a: np.ndarray, img_b: np.ndarray, t: RigidTransform2D,
              bins: int, ranges, min_overlap: int) -> float:
    ha, wa = img_a.shape
    hb, wb = img_b.shape
    yb, xb = np.meshgrid(np.arange(hb), np.arange(wb), indexing="ij")
    m = t.matrix()
    sx = m[0, 0] * xb + m[0, 1] * yb + m[0, 2]
    sy = m[1, 0] * xb + m[1, 1] * yb + m[1, 2]
    ok = (sx >= 0) & (sx <= wa - 1) & (sy >= 0) & (sy <= ha - 1)
    if ok.sum() < min_overlap:
        return -np.inf
    x0 = np.floor(sx[ok]).astype(int)
    y0 = np.floor(sy[ok]).astype(int)
    fx, fy = sx[ok] - x0, sy[ok] - y0
    x1 = np.minimum(x0 + 1, wa - 1)
    y1 = np.minimum(y0 + 1, ha - 1)
    vals_a = (img_a[y0, x0] * (1 - fy) * (1 - fx) + img_a[y0, x1] * (1 - fy) * fx
              + img_a[y1, x0] * fy * (1 - fx) + img_a[y1, x1] * fy * fx)
    vals_b = img_b[ok]
    hist, _, _ = np.histogram2d(vals_a, vals_b, bins=bins, range=ranges)
    p = hist / hist.sum()
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / (pa[:, None] * pb[None, :])[nz])).sum())


def register_mi(img_a: np.ndarray, img_b: np.ndarray, cfg: MIConfig | None = None) -> MIResult:
    """Rigid registration (B -> A) by joint-histogram MI maximization."""
    cfg = cfg or MIConfig()
    if img_a.ndim == 3:
        img_a = img_a[0]
    if img_b.ndim == 3:
        img_b = img_b[0]
    ha, wa = img_a.shape
    hb, wb = img_b.shape
    cbx, cby = rigid.image_center((hb, wb))
    if cfg.center is None:
        c0 = ((wa - wb) / 2.0, (ha - hb) / 2.0)
    else:
        c0 = cfg.center
    ranges = ((float(img_a.min()), float(img_a.max()) + 1e-6),
              (float(img_b.min()), float(img_b.max()) + 1e-6))

    def score(tx, ty, th):
        t = RigidTransform2D(tx=tx, ty=ty, theta=th, cx=cbx, cy=cby)
        return _mi_score(img_a, img_b, t, cfg.bins, ranges, cfg.min_overlap_px)

    best = (c0[0], c0[1], 0.0)
    tstep, rstep = cfg.trans_step, cfg.rot_step
    trange, rrange = cfg.trans_range, cfg.rot_range
    for level in range(cfg.levels):
        txs = best[0] + np.arange(-trange, trange + tstep / 2, tstep)
        tys = best[1] + np.arange(-trange, trange + tstep / 2, tstep)
        ths = best[2] + np.arange(-rrange, rrange + rstep / 2, rstep)
        scores = np.array([[[score(tx, ty, th) for th in ths] for ty in tys] for tx in txs])
        i, j, k = np.unravel_index(int(np.argmax(scores)), scores.shape)
        best = (float(txs[i]), float(tys[j]), float(ths[k]))
        trange, rrange = tstep, rstep
        tstep, rstep = tstep / 3.0, rstep / 3.0

    t = RigidTransform2D(tx=best[0], ty=best[1], theta=best[2], cx=cbx, cy=cby)
    peak = score(*best)

    # Permutation null: scoring the winning transform against pixel-shuffled
    # copies of B keeps the marginal histograms (and the small-overlap bias)
    # while destroying any spatial alignment. A peak that does not clear the
    # null by a margin carries no alignment evidence.
    rng = np.random.default_rng(np.random.SeedSequence([0x3141, cfg.bins]))
    null = []
    for _ in range(8):
        perm = img_b.ravel().copy()
        rng.shuffle(perm)
        null.append(_mi_score(img_a, perm.reshape(img_b.shape), t,
                              cfg.bins, ranges, cfg.min_overlap_px))
    null = np.asarray(null)
    low_conf = (not np.isfinite(peak)
                or (peak - float(null.mean())) < max(4.0 * float(null.std()), 0.1))
    return MIResult(transform=t, score=float(peak), low_confidence=low_conf)
