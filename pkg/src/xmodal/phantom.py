"""Procedural paired-modality body phantoms with full ground truth.

Each record is a pair of 2-channel 2D scans of the same synthetic subject:
modality A is skeleton-dominant (bone, tissue channels), modality B is
soft-tissue-dominant (fat, water channels) with a smaller field of view
related to A by a known rigid transform plus a centering crop. Five joint
keypoints and three anatomy masks are recorded in both frames.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import rigid
from .rigid import RigidTransform2D
from .tensorio import read_tensor, write_tensor

KEYPOINT_NAMES = ("hip_left", "hip_right", "shoulder_left", "shoulder_right", "spine_base")
MASK_NAMES = ("spine", "pelvis", "pelvic_cavity")
LIMB_NAMES = ("arm_left", "arm_right", "leg_left", "leg_right")

MODALITY_A_CHANNELS = ("bone", "tissue")
MODALITY_B_CHANNELS = ("fat", "water")

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Scan:
    image: np.ndarray  # (C, H, W) float32
    modality: str  # "A" | "B"
    spacing_mm: float
    channels: tuple


@dataclass(frozen=True)
class SubjectLatent:
    seed: int
    torso_w: float
    torso_h: float
    torso_top: float
    center_x: float
    head_r: float
    arm_len: float
    leg_len: float
    arm_angle: float  # rest angle from vertical, degrees
    leg_angle: float
    arm_r: float
    leg_r: float
    bone_density: float
    fat_fraction: float
    water_fraction: float
    spine_segments: int


# Documented latent ranges for the default 200 x 76 A frame; geometry scales
# linearly with the configured A height.
LATENT_RANGES = {
    "torso_w": (26.0, 36.0),
    "torso_h": (72.0, 92.0),
    "torso_top": (38.0, 44.0),
    "center_dx": (-2.0, 2.0),
    "head_r": (8.0, 12.0),
    "arm_len": (40.0, 54.0),
    "leg_len": (48.0, 60.0),
    "arm_angle": (8.0, 18.0),
    "leg_angle": (4.0, 10.0),
    "arm_r": (3.0, 4.5),
    "leg_r": (4.5, 6.5),
    "bone_density": (0.7, 1.0),
    "fat_fraction": (0.3, 0.7),
    "water_fraction": (0.3, 0.7),
    "spine_segments": (5, 8),
}


@dataclass
class PhantomPair:
    scan_a: Scan
    scan_b: Scan
    gt_transform: RigidTransform2D  # maps scan_b pixel coords into scan_a pixel coords
    keypoints_a: dict  # name -> (x, y) in A pixel coords
    keypoints_b: dict
    masks_a: np.ndarray  # (3, Ha, Wa) binary float32, order = MASK_NAMES
    masks_b: np.ndarray
    pose_jitter: dict  # limb name -> angle delta (deg)
    meta: dict = field(default_factory=dict)


@dataclass
class GeneratorConfig:
    n_train: int = 8
    n_val: int = 1
    n_test: int = 1
    seed: int = 0
    shape_a: tuple = (200, 76)
    shape_b: tuple = (126, 56)
    spacing_mm: float = 2.2
    max_rotation_deg: float = 5.0
    max_translation_px: float = 15.0
    jitter_deg: float = 5.0
    noise_sigma: float = 0.10  # acquisition noise; also what defeats raw-intensity MI
    bias_amp: float = 0.08
    bias_amp_b: float = 0.35  # MR-style shading is much stronger than DXA

    def validate(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("split counts must be >= 1")
        if self.shape_b[0] > self.shape_a[0] or self.shape_b[1] > self.shape_a[1]:
            raise ValueError("modality-B frame must fit inside modality-A frame")


def sample_subject(seed: int) -> SubjectLatent:
    """Deterministic latent body description for one subject."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, int(seed)]))

    def u(name):
        lo, hi = LATENT_RANGES[name]
        return float(rng.uniform(lo, hi))

    return SubjectLatent(
        seed=int(seed),
        torso_w=u("torso_w"),
        torso_h=u("torso_h"),
        torso_top=u("torso_top"),
        center_x=38.0 + u("center_dx"),
        head_r=u("head_r"),
        arm_len=u("arm_len"),
        leg_len=u("leg_len"),
        arm_angle=u("arm_angle"),
        leg_angle=u("leg_angle"),
        arm_r=u("arm_r"),
        leg_r=u("leg_r"),
        bone_density=u("bone_density"),
        fat_fraction=u("fat_fraction"),
        water_fraction=u("water_fraction"),
        spine_segments=int(rng.integers(LATENT_RANGES["spine_segments"][0],
                                        LATENT_RANGES["spine_segments"][1] + 1)),
    )


# ---------------------------------------------------------------------------
# Scene geometry and rendering
# ---------------------------------------------------------------------------


def _limb_dir(angle_deg: float, side: float) -> np.ndarray:
    # Down the image with an outward lean; side is -1 (left) or +1 (right).
    a = np.deg2rad(angle_deg)
    return np.array([side * np.sin(a), np.cos(a)])


def _geometry(latent: SubjectLatent, limb_deltas: dict, scale: float = 1.0) -> dict:
    s = scale
    cx = latent.center_x * s
    y0 = latent.torso_top * s
    tw = latent.torso_w * s
    th = latent.torso_h * s

    shoulder_y = y0 + 7.0 * s
    hip_y = y0 + th - 5.0 * s
    shoulder_hw = 0.48 * tw
    hip_hw = 0.30 * tw

    shoulders = {
        "shoulder_left": np.array([cx - shoulder_hw, shoulder_y]),
        "shoulder_right": np.array([cx + shoulder_hw, shoulder_y]),
    }
    hips = {
        "hip_left": np.array([cx - hip_hw, hip_y]),
        "hip_right": np.array([cx + hip_hw, hip_y]),
    }

    limbs = {}
    bones = []
    for name, joint in (("arm_left", shoulders["shoulder_left"]),
                        ("arm_right", shoulders["shoulder_right"])):
        side = -1.0 if name.endswith("left") else 1.0
        ang = latent.arm_angle + limb_deltas.get(name, 0.0)
        d = _limb_dir(ang, side)
        p1 = joint + d * latent.arm_len * s
        limbs[name] = (joint, p1, latent.arm_r * s)
        bones.append((joint, p1, 0.45 * latent.arm_r * s))
    for name, joint in (("leg_left", hips["hip_left"]), ("leg_right", hips["hip_right"])):
        side = -1.0 if name.endswith("left") else 1.0
        ang = latent.leg_angle + limb_deltas.get(name, 0.0)
        d = _limb_dir(ang, side)
        p1 = joint + d * latent.leg_len * s
        limbs[name] = (joint, p1, latent.leg_r * s)
        bones.append((joint, p1, 0.4 * latent.leg_r * s))

    head_c = np.array([cx, y0 - 5.0 * s - latent.head_r * s])
    spine_top = y0 + 5.0 * s
    spine_bot = hip_y - 2.0 * s
    n_seg = latent.spine_segments
    seg_pitch = (spine_bot - spine_top) / n_seg
    spine_segs = []
    for i in range(n_seg):
        sy0 = spine_top + i * seg_pitch
        spine_segs.append((np.array([cx, sy0 + 0.12 * seg_pitch]),
                           np.array([cx, sy0 + 0.88 * seg_pitch]),
                           2.6 * s))

    pelvis_c = np.array([cx, hip_y])
    pelvis_rx = hip_hw + 5.0 * s
    pelvis_ry = 10.0 * s

    keypoints = {}
    for name, joint in hips.items():
        side = -1.0 if name.endswith("left") else 1.0
        ang = latent.leg_angle + limb_deltas.get("leg_" + name.split("_")[1], 0.0)
        keypoints[name] = joint + _limb_dir(ang, side) * 0.12 * latent.leg_len * s
    for name, joint in shoulders.items():
        side = -1.0 if name.endswith("left") else 1.0
        ang = latent.arm_angle + limb_deltas.get("arm_" + name.split("_")[1], 0.0)
        keypoints[name] = joint + _limb_dir(ang, side) * 0.10 * latent.arm_len * s
    keypoints["spine_base"] = np.array([cx, spine_bot - 0.4 * seg_pitch])

    return {
        "torso": (np.array([cx, y0 + th / 2]), tw / 2, th / 2),
        "head": (head_c, latent.head_r * s, latent.head_r * s),
        "neck": (np.array([cx, y0 - 6.0 * s]), np.array([cx, y0 + 2.0 * s]), 3.0 * s),
        "limbs": limbs,
        "limb_bones": bones,
        "joints": list(shoulders.values()) + list(hips.values()),
        "spine_segs": spine_segs,
        "pelvis": (pelvis_c, pelvis_rx, pelvis_ry),
        "keypoints": keypoints,
    }


def _soft(d: np.ndarray, edge: float = 0.8) -> np.ndarray:
    # Smooth edge profile on a signed distance: ~1 inside, ~0 outside.
    return 1.0 / (1.0 + np.exp(np.clip(d / edge, -30, 30)))


def _ellipse_sd(x, y, center, rx, ry):
    q = np.sqrt(((x - center[0]) / rx) ** 2 + ((y - center[1]) / ry) ** 2)
    return (q - 1.0) * min(rx, ry)


def _capsule_sd(x, y, p0, p1, r):
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    ll = vx * vx + vy * vy
    t = np.clip(((x - p0[0]) * vx + (y - p0[1]) * vy) / max(ll, 1e-9), 0.0, 1.0)
    dx = x - (p0[0] + t * vx)
    dy = y - (p0[1] + t * vy)
    return np.sqrt(dx * dx + dy * dy) - r


def _render_scene(geom: dict, x: np.ndarray, y: np.ndarray, latent: SubjectLatent) -> dict:
    """Evaluate material maps of the scene at arbitrary (x, y) coordinates."""
    torso_c, torso_rx, torso_ry = geom["torso"]
    head_c, head_rx, head_ry = geom["head"]

    soft_parts = [_soft(_ellipse_sd(x, y, torso_c, torso_rx, torso_ry)),
                  _soft(_ellipse_sd(x, y, head_c, head_rx, head_ry)),
                  _soft(_capsule_sd(x, y, *geom["neck"]))]
    muscle_parts = [_soft(_ellipse_sd(x, y, torso_c, 0.72 * torso_rx, 0.82 * torso_ry))]
    for p0, p1, r in geom["limbs"].values():
        soft_parts.append(_soft(_capsule_sd(x, y, p0, p1, r)))
        muscle_parts.append(_soft(_capsule_sd(x, y, p0, p1, 0.62 * r)))
    soft = np.maximum.reduce(soft_parts)
    muscle = np.maximum.reduce(muscle_parts)

    pelvis_c, prx, pry = geom["pelvis"]
    pelvis_outer = _soft(_ellipse_sd(x, y, pelvis_c, prx, pry))
    cavity = _soft(_ellipse_sd(x, y, pelvis_c, prx - 3.5, pry - 3.5))
    pelvis_ring = np.clip(pelvis_outer - cavity, 0.0, 1.0)

    spine = np.maximum.reduce([_soft(_capsule_sd(x, y, p0, p1, r))
                               for p0, p1, r in geom["spine_segs"]])
    skull = np.clip(_soft(_ellipse_sd(x, y, head_c, head_rx, head_ry))
                    - _soft(_ellipse_sd(x, y, head_c, 0.7 * head_rx, 0.7 * head_ry)), 0.0, 1.0)
    bone_parts = [spine, pelvis_ring, skull]
    for p0, p1, r in geom["limb_bones"]:
        bone_parts.append(_soft(_capsule_sd(x, y, p0, p1, r)))
    for j in geom["joints"]:
        bone_parts.append(_soft(_ellipse_sd(x, y, j, 2.8, 2.8)))
    bone = np.maximum.reduce(bone_parts)

    bd, ff, wf = latent.bone_density, latent.fat_fraction, latent.water_fraction
    return {
        "bone_img": bd * bone + 0.12 * soft,
        "tissue_img": soft * (0.35 + 0.4 * ff + 0.25 * wf) * (1.0 - 0.3 * bone),
        "fat_img": ff * np.clip(soft - 0.92 * muscle, 0.0, 1.0) * (1.0 - 0.85 * bone),
        "water_img": wf * (0.35 * soft + 0.65 * muscle) * (1.0 - 0.85 * bone),
        "soft": soft,
        "bone": bone,
        "spine": spine,
        "pelvis_ring": pelvis_ring,
        "cavity": cavity * pelvis_outer,
    }


def _bias_field(rng: np.random.Generator, shape, amp: float) -> np.ndarray:
    h, w = shape
    ys = np.linspace(0, np.pi, h)[:, None]
    xs = np.linspace(0, np.pi, w)[None, :]
    g = np.zeros((h, w))
    for m in range(3):
        for n in range(3):
            if m == 0 and n == 0:
                continue
            g += rng.standard_normal() * np.cos(m * ys) * np.cos(n * xs)
    peak = np.abs(g).max()
    if peak > 0:
        g /= peak
    return 1.0 + amp * g


def crop_offset(shape_a, shape_b) -> tuple[float, float]:
    """(x, y) offset of the centered B frame inside the A frame."""
    return ((shape_a[1] - shape_b[1]) / 2.0, (shape_a[0] - shape_b[0]) / 2.0)


def render_pair(latent: SubjectLatent, jitter_cfg=None, rigid_cfg=None, noise_cfg=None,
                config: GeneratorConfig | None = None, record_seed: int = 0) -> PhantomPair:
    """Render the two modality images plus all ground truth for one subject.

    ``jitter_cfg``/``rigid_cfg``/``noise_cfg`` override the matching fields of
    ``config``; pass explicit dicts for deterministic constructed cases, e.g.
    ``rigid_cfg={"tx": 5, "ty": -3, "theta": 0}`` for a fixed transform.
    """
    cfg = config or GeneratorConfig()
    ha, wa = cfg.shape_a
    hb, wb = cfg.shape_b
    scale = ha / 200.0
    rng = np.random.default_rng(np.random.SeedSequence([0xFA17, latent.seed, int(record_seed)]))

    jitter_deg = cfg.jitter_deg if jitter_cfg is None else float(jitter_cfg.get("jitter_deg", cfg.jitter_deg))
    deltas = {name: float(rng.uniform(-jitter_deg, jitter_deg)) for name in LIMB_NAMES}
    if jitter_cfg is not None and "deltas" in jitter_cfg:
        deltas = dict(jitter_cfg["deltas"])

    if rigid_cfg is None:
        dx = float(rng.uniform(-cfg.max_translation_px, cfg.max_translation_px)) * scale
        dy = float(rng.uniform(-cfg.max_translation_px, cfg.max_translation_px)) * scale
        theta = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    else:
        dx, dy, theta = float(rigid_cfg["tx"]), float(rigid_cfg["ty"]), float(rigid_cfg["theta"])

    noise_sigma = cfg.noise_sigma if noise_cfg is None else float(noise_cfg.get("sigma", cfg.noise_sigma))
    bias_amp = cfg.bias_amp if noise_cfg is None else float(noise_cfg.get("bias_amp", cfg.bias_amp))
    bias_amp_b = cfg.bias_amp_b if noise_cfg is None else float(noise_cfg.get("bias_amp_b", cfg.bias_amp_b))

    off_x, off_y = crop_offset(cfg.shape_a, cfg.shape_b)
    cbx, cby = rigid.image_center(cfg.shape_b)
    gt = RigidTransform2D(tx=off_x + dx, ty=off_y + dy, theta=theta,
                          cx=cbx, cy=cby, frame="pixel")

    geom_a = _geometry(latent, {}, scale)
    geom_b = _geometry(latent, deltas, scale)

    ya, xa = np.meshgrid(np.arange(ha, dtype=np.float64),
                         np.arange(wa, dtype=np.float64), indexing="ij")
    scene_a = _render_scene(geom_a, xa, ya, latent)
    if not (scene_a["soft"] > 0.5).any():
        raise ValueError("degenerate geometry: body entirely outside the A field of view")

    yb, xb = np.meshgrid(np.arange(hb, dtype=np.float64),
                         np.arange(wb, dtype=np.float64), indexing="ij")
    pb = np.stack([xb, yb], axis=-1)
    pw = rigid.apply(gt, pb)
    scene_b = _render_scene(geom_b, pw[..., 0], pw[..., 1], latent)

    def finish(channels, shape, amp):
        img = np.stack(channels).astype(np.float32)
        if amp > 0:
            img *= _bias_field(rng, shape, amp).astype(np.float32)[None]
        if noise_sigma > 0:
            img += rng.normal(0.0, noise_sigma, img.shape).astype(np.float32)
        return img

    img_a = finish([scene_a["bone_img"], scene_a["tissue_img"]], (ha, wa), bias_amp)
    img_b = finish([scene_b["fat_img"], scene_b["water_img"]], (hb, wb), bias_amp_b)

    masks_a = np.stack([scene_a["spine"] > 0.5, scene_a["pelvis_ring"] > 0.5,
                        scene_a["cavity"] > 0.5]).astype(np.float32)
    masks_b = np.stack([scene_b["spine"] > 0.5, scene_b["pelvis_ring"] > 0.5,
                        scene_b["cavity"] > 0.5]).astype(np.float32)

    kps_a = {k: tuple(map(float, v)) for k, v in geom_a["keypoints"].items()}
    inv_gt = rigid.invert(gt)
    kps_b = {k: tuple(map(float, rigid.apply(inv_gt, np.asarray(v))))
             for k, v in geom_b["keypoints"].items()}

    return PhantomPair(
        scan_a=Scan(img_a, "A", cfg.spacing_mm, MODALITY_A_CHANNELS),
        scan_b=Scan(img_b, "B", cfg.spacing_mm, MODALITY_B_CHANNELS),
        gt_transform=gt,
        keypoints_a=kps_a,
        keypoints_b=kps_b,
        masks_a=masks_a,
        masks_b=masks_b,
        pose_jitter=deltas,
        meta={"subject_seed": latent.seed, "rigid_dx": dx, "rigid_dy": dy,
              "rigid_theta": theta, "crop_offset": [off_x, off_y]},
    )


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    version: int
    config: dict
    records: list  # dicts with id, split, path


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def save_pair(dirpath: str, pair: PhantomPair) -> None:
    os.makedirs(dirpath, exist_ok=True)
    write_tensor(os.path.join(dirpath, "scan_a.ptn"), pair.scan_a.image)
    write_tensor(os.path.join(dirpath, "scan_b.ptn"), pair.scan_b.image)
    write_tensor(os.path.join(dirpath, "masks_a.ptn"), pair.masks_a)
    write_tensor(os.path.join(dirpath, "masks_b.ptn"), pair.masks_b)
    with open(os.path.join(dirpath, "keypoints.jsonl"), "w") as f:
        for name in KEYPOINT_NAMES:
            f.write(_dump({"name": name, "a": list(pair.keypoints_a[name]),
                           "b": list(pair.keypoints_b[name])}) + "\n")
    gt = pair.gt_transform
    with open(os.path.join(dirpath, "gt.jsonl"), "w") as f:
        f.write(_dump({"tx": gt.tx, "ty": gt.ty, "theta": gt.theta,
                       "cx": gt.cx, "cy": gt.cy, "frame": gt.frame,
                       "spacing_mm": pair.scan_a.spacing_mm,
                       "pose_jitter": pair.pose_jitter, "meta": pair.meta}) + "\n")


def load_pair(dirpath: str) -> PhantomPair:
    img_a = read_tensor(os.path.join(dirpath, "scan_a.ptn"))
    img_b = read_tensor(os.path.join(dirpath, "scan_b.ptn"))
    masks_a = read_tensor(os.path.join(dirpath, "masks_a.ptn"))
    masks_b = read_tensor(os.path.join(dirpath, "masks_b.ptn"))
    kps_a, kps_b = {}, {}
    with open(os.path.join(dirpath, "keypoints.jsonl")) as f:
        for line in f:
            rec = json.loads(line)
            kps_a[rec["name"]] = tuple(rec["a"])
            kps_b[rec["name"]] = tuple(rec["b"])
    with open(os.path.join(dirpath, "gt.jsonl")) as f:
        gtrec = json.loads(f.readline())
    gt = RigidTransform2D(tx=gtrec["tx"], ty=gtrec["ty"], theta=gtrec["theta"],
                          cx=gtrec["cx"], cy=gtrec["cy"], frame=gtrec["frame"])
    spacing = gtrec["spacing_mm"]
    return PhantomPair(
        scan_a=Scan(img_a, "A", spacing, MODALITY_A_CHANNELS),
        scan_b=Scan(img_b, "B", spacing, MODALITY_B_CHANNELS),
        gt_transform=gt,
        keypoints_a=kps_a,
        keypoints_b=kps_b,
        masks_a=masks_a,
        masks_b=masks_b,
        pose_jitter=gtrec["pose_jitter"],
        meta=gtrec["meta"],
    )


def generate_dataset(config: GeneratorConfig, root: str) -> DatasetManifest:
    """Write the train/val/test tree plus manifest; pure function of config."""
    config.validate()
    os.makedirs(root, exist_ok=True)
    records = []
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    subject = 0
    for split in ("train", "val", "test"):
        for i in range(counts[split]):
            rec_id = f"{split}/{i:04d}"
            latent = sample_subject(config.seed * 1_000_003 + subject)
            pair = render_pair(latent, config=config, record_seed=subject)
            save_pair(os.path.join(root, rec_id), pair)
            records.append({"id": rec_id, "split": split, "path": rec_id})
            subject += 1
    manifest = DatasetManifest(root=root, version=FORMAT_VERSION,
                               config=asdict(config), records=records)
    cfg = dict(manifest.config)
    cfg["shape_a"] = list(cfg["shape_a"])
    cfg["shape_b"] = list(cfg["shape_b"])
    with open(os.path.join(root, "manifest.jsonl"), "w") as f:
        f.write(_dump({"type": "header", "version": FORMAT_VERSION, "config": cfg}) + "\n")
        for rec in records:
            f.write(_dump(rec) + "\n")
    return manifest


def load_manifest(root: str) -> DatasetManifest:
    records = []
    with open(os.path.join(root, "manifest.jsonl")) as f:
        header = json.loads(f.readline())
        for line in f:
            records.append(json.loads(line))
    return DatasetManifest(root=root, version=header["version"],
                           config=header["config"], records=records)


def load_split(root: str, split: str) -> list:
    man = load_manifest(root)
    return [load_pair(os.path.join(root, r["path"])) for r in man.records if r["split"] == split]
