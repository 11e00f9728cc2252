"""Noise-contrastive training of the dual encoders, with the translation /
brightness / contrast augmentation and an Adam optimizer.

The loss for pair k is the sum of the row-wise and column-wise cross entropy
of the temperature-scaled similarity matrix at its diagonal entry, averaged
over the batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc_mod
from . import nn, rigid, similarity
from .phantom import PhantomPair, Scan


class TrainDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 10
    tau: float = 0.01
    lr: float = 1e-5
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps: int = 1000
    max_shift_px: int = 5
    intensity_range: float = 0.2
    channels: str = "BT+FW"
    baseline: bool = False
    min_overlap_frac: float = similarity.DEFAULT_MIN_OVERLAP
    seed: int = 0
    eval_every: int = 0  # 0 disables validation passes

    def validate(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for contrastive training")


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def add(self, **kw):
        self.entries.append(kw)

    def losses(self):
        return [e["loss"] for e in self.entries if "loss" in e]


def nce_loss(m: np.ndarray, tau: float):
    """Batch-mean contrastive loss and its exact gradient wrt ``m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {m.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = m.shape[0]
    logits = m / tau
    row = logits - logits.max(axis=1, keepdims=True)
    col = logits - logits.max(axis=0, keepdims=True)
    lse_row = np.log(np.exp(row).sum(axis=1)) + logits.max(axis=1)
    lse_col = np.log(np.exp(col).sum(axis=0)) + logits.max(axis=0)
    diag = np.diag(logits)
    loss = float(((lse_row - diag) + (lse_col - diag)).mean())
    p_row = np.exp(row)
    p_row /= p_row.sum(axis=1, keepdims=True)
    p_col = np.exp(col)
    p_col /= p_col.sum(axis=0, keepdims=True)
    eye = np.eye(n)
    grad = (p_row - eye + p_col - eye) / (n * tau)
    return loss, grad


def _shift_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape[-2], img.shape[-1]
    sy0, sy1 = max(0, -dy), min(h, h - dy)
    sx0, sx1 = max(0, -dx), min(w, w - dx)
    out[..., sy0 + dy : sy1 + dy, sx0 + dx : sx1 + dx] = img[..., sy0:sy1, sx0:sx1]
    return out


def _augment_scan(scan: Scan, dx: int, dy: int, contrast: float, brightness: float) -> Scan:
    img = _shift_image(scan.image, dx, dy)
    img = (img * contrast + brightness).astype(np.float32)
    return Scan(img, scan.modality, scan.spacing_mm, scan.channels)


def augment(pair: PhantomPair, cfg: TrainConfig, seed: int) -> PhantomPair:
    """Independent integer translation plus brightness/contrast per scan.

    Keypoints, masks and the ground-truth transform are shifted consistently.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xA06, int(seed)]))
    s = cfg.max_shift_px
    dxa, dya, dxb, dyb = (int(rng.integers(-s, s + 1)) for _ in range(4)) if s else (0, 0, 0, 0)
    out_scans = []
    for scan, dx, dy in ((pair.scan_a, dxa, dya), (pair.scan_b, dxb, dyb)):
        r = cfg.intensity_range
        contrast = float(rng.uniform(1 - r, 1 + r)) if r else 1.0
        span = float(scan.image.max() - scan.image.min())
        brightness = float(rng.uniform(-r, r)) * span if r else 0.0
        out_scans.append(_augment_scan(scan, dx, dy, contrast, brightness))
    gt = rigid.compose(
        rigid.compose(rigid.RigidTransform2D(tx=dxa, ty=dya), pair.gt_transform),
        rigid.RigidTransform2D(tx=-dxb, ty=-dyb))
    kps_a = {k: (v[0] + dxa, v[1] + dya) for k, v in pair.keypoints_a.items()}
    kps_b = {k: (v[0] + dxb, v[1] + dyb) for k, v in pair.keypoints_b.items()}
    return PhantomPair(
        scan_a=out_scans[0], scan_b=out_scans[1], gt_transform=gt,
        keypoints_a=kps_a, keypoints_b=kps_b,
        masks_a=_shift_image(pair.masks_a, dxa, dya),
        masks_b=_shift_image(pair.masks_b, dxb, dyb),
        pose_jitter=pair.pose_jitter, meta=dict(pair.meta),
    )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_init(params) -> dict:
    return {name: {"m": np.zeros_like(arr, dtype=np.float32),
                   "v": np.zeros_like(arr, dtype=np.float32), "t": 0}
            for name, arr in params}


def adam_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """In-place adaptive-moment update with bias correction."""
    b1, b2 = betas
    for (name, p), (_, g) in zip(params, grads):
        st = state[name]
        if st["m"].shape != g.shape:
            raise nn.ShapeError(f"gradient shape mismatch for {name}")
        st["t"] += 1
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * g * g
        mhat = st["m"] / (1 - b1 ** st["t"])
        vhat = st["v"] / (1 - b2 ** st["t"])
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _batch_images(pairs, config: enc_mod.EncoderConfig):
    xa = np.stack([enc_mod.select_channels(p.scan_a, config.channels_a) for p in pairs])
    xb = np.stack([enc_mod.select_channels(p.scan_b, config.channels_b) for p in pairs])
    return xa.astype(np.float32), xb.astype(np.float32)


def _trainable(model: enc_mod.DualEncoder):
    parts = [("enc_a", model.enc_a), ("enc_b", model.enc_b)]
    if model.head_a is not None:
        parts += [("head_a", model.head_a), ("head_b", model.head_b)]
    params, grads = [], []
    for prefix, part in parts:
        params.extend((f"{prefix}.{n}", a) for n, a in part.params())
        grads.extend((f"{prefix}.{n}", a) for n, a in part.grads())
    return params, grads


def _zero_grads(model):
    model.enc_a.zero_grads()
    model.enc_b.zero_grads()
    if model.head_a is not None:
        model.head_a.zero_grads()
        model.head_b.zero_grads()


def spatial_similarity_step(model, pairs, cfg, mode="train"):
    """Forward pass to the similarity matrix; returns tensors needed for backward."""
    xa, xb = _batch_images(pairs, model.config)
    fa_raw = model.enc_a.forward(xa, mode)
    fb_raw = model.enc_b.forward(xb, mode)
    fas = [enc_mod.FeatureMap(nn.l2_normalize_locations(fa_raw[i]), "A",
                              xa.shape[2:], normalized=True) for i in range(len(pairs))]
    fbs = [enc_mod.FeatureMap(nn.l2_normalize_locations(fb_raw[i]), "B",
                              xb.shape[2:], normalized=True) for i in range(len(pairs))]
    result = similarity.similarity_matrix(fas, fbs, cfg.min_overlap_frac)
    return result, fas, fbs, fa_raw, fb_raw


def train(config: TrainConfig, train_pairs: list, val_pairs: list | None = None,
          model: enc_mod.DualEncoder | None = None):
    """Run contrastive training; returns (model, TrainLog)."""
    config.validate()
    if len(train_pairs) < config.batch_size:
        raise ValueError("dataset smaller than one batch")
    enc_cfg = enc_mod.EncoderConfig.from_preset(config.channels)
    if model is None:
        model = enc_mod.init_params(enc_cfg, seed=config.seed, baseline=config.baseline)
    log = TrainLog()
    params, grads = _trainable(model)
    state = adam_init(params)
    order_rng = np.random.default_rng(np.random.SeedSequence([0x0 + 7, config.seed]))
    order = []
    t0 = time.monotonic()

    for step in range(config.steps):
        while len(order) < config.batch_size:
            order.extend(order_rng.permutation(len(train_pairs)).tolist())
        idx = [order.pop(0) for _ in range(config.batch_size)]
        batch = [augment(train_pairs[i], config, seed=config.seed * 1_000_003 + step * 64 + k)
                 for k, i in enumerate(idx)]
        _zero_grads(model)

        if config.baseline:
            xa, xb = _batch_images(batch, model.config)
            da = model.head_a.forward(model.enc_a.forward(xa, "train"), "train")
            db = model.head_b.forward(model.enc_b.forward(xb, "train"), "train")
            m = da.astype(np.float64) @ db.astype(np.float64).T
            loss, dm = nce_loss(m, config.tau)
            dda = (dm @ db.astype(np.float64)).astype(np.float32)
            ddb = (dm.T @ da.astype(np.float64)).astype(np.float32)
            model.enc_a.backward(model.head_a.backward(dda))
            model.enc_b.backward(model.head_b.backward(ddb))
        else:
            result, fas, fbs, fa_raw, fb_raw = spatial_similarity_step(
                model, batch, config, "train")
            loss, dm = nce_loss(result.values, config.tau)
            dfa_n, dfb_n = similarity.similarity_matrix_backward(fas, fbs, result, dm)
            dfa = np.stack([nn.l2_normalize_backward(dfa_n[i].astype(np.float32), fa_raw[i])
                            for i in range(len(batch))])
            dfb = np.stack([nn.l2_normalize_backward(dfb_n[i].astype(np.float32), fb_raw[i])
                            for i in range(len(batch))])
            model.enc_a.backward(dfa)
            model.enc_b.backward(dfb)

        if not np.isfinite(loss):
            raise TrainDivergence(f"non-finite loss at step {step}")
        adam_step(params, grads, state, config.lr, config.betas, config.adam_eps)
        log.add(step=step, loss=float(loss), wall=time.monotonic() - t0)

        if config.eval_every and val_pairs and (step + 1) % config.eval_every == 0:
            stats = validate(model, val_pairs, config)
            log.add(step=step, **stats)

    model.meta = dict(model.meta, channels=config.channels, tau=config.tau,
                      steps=config.steps, baseline=config.baseline, seed=config.seed)
    return model, log


def embed_pairs(model: enc_mod.DualEncoder, pairs: list, mode: str = "eval"):
    """Normalized feature maps (or descriptors in baseline mode) for a split."""
    if model.head_a is not None:
        da = np.stack([enc_mod.encode_pooled(p.scan_a, model, mode) for p in pairs])
        db = np.stack([enc_mod.encode_pooled(p.scan_b, model, mode) for p in pairs])
        return da, db
    fas = [enc_mod.encode(p.scan_a, model, mode).normalize() for p in pairs]
    fbs = [enc_mod.encode(p.scan_b, model, mode).normalize() for p in pairs]
    return fas, fbs


def model_similarity_matrix(model: enc_mod.DualEncoder, pairs: list,
                            min_overlap_frac: float = similarity.DEFAULT_MIN_OVERLAP) -> np.ndarray:
    a, b = embed_pairs(model, pairs)
    if model.head_a is not None:
        return a.astype(np.float64) @ b.astype(np.float64).T
    return similarity.similarity_matrix(a, b, min_overlap_frac).values


def validate(model, pairs, cfg: TrainConfig) -> dict:
    m = model_similarity_matrix(model, pairs, cfg.min_overlap_frac)
    n = m.shape[0]
    ranks = 1 + (m >= np.diag(m)[:, None]).sum(axis=1) - 1
    margin = float(np.diag(m).mean() - (m.sum() - np.trace(m)) / max(1, n * n - n))
    return {"val_recall1": float((ranks <= 1).mean() * 100.0), "val_margin": margin}
