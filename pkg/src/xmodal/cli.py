"""Command-line entry points.

Commands: ``phantom-gen``, ``train``, ``embed``, ``eval``, ``register``,
``transfer-mask``, ``gradcheck``. Settings resolve in the order built-in
default < config-file value < command-line flag. Config files are flat
``section.key=value`` text, sections named after commands (dashes become
underscores, e.g. ``train.tau=0.01``).

Exit codes: 0 success, 2 validation failure, 3 I/O failure, 4 numeric
failure. With ``--threads 1`` (the default) every command is a pure
function of its inputs: re-running reproduces byte-identical files.
Wall-clock timings are printed to stdout only, never written to output
files, to keep that guarantee.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

import xmodal.train
from xmodal import encoder as enc_mod
from xmodal import evaluation, nn, phantom, registration, rigid, svg, tensorio

train_mod = sys.modules["xmodal.train"]
from xmodal.rigid import RigidTransform2D

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

REGISTER_METHODS = ("none", "mi", "dense", "salient", "refined", "best")


# ---------------------------------------------------------------------------
# Config file + option resolution
# ---------------------------------------------------------------------------


def parse_config_file(path: str) -> dict:
    """Flat ``section.key=value`` lines -> {section: {key: raw string}}."""
    sections: dict = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line or "." not in line.split("=", 1)[0]:
                raise ValueError(f"{path}:{ln}: expected 'section.key=value', got {line!r}")
            key, value = line.split("=", 1)
            section, name = key.strip().rsplit(".", 1)
            sections.setdefault(section.strip(), {})[name.strip()] = value.strip()
    return sections


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if like is None or isinstance(like, str):
        return raw
    return type(like)(raw)


def resolve(args, defaults: dict) -> argparse.Namespace:
    """Fill unset flags from the config file section, then from defaults."""
    section = args.command.replace("-", "_")
    file_vals = {}
    if getattr(args, "config", None):
        file_vals = parse_config_file(args.config).get(section, {})
    for name, default in defaults.items():
        if getattr(args, name, None) is not None:
            continue
        if name in file_vals:
            setattr(args, name, _coerce(file_vals[name], default))
        else:
            setattr(args, name, default)
    return args


def data_root(args) -> str:
    root = args.data or os.environ.get("XMODAL_DATA_ROOT")
    if not root:
        raise ValueError("no dataset root: pass --data or set XMODAL_DATA_ROOT")
    if not os.path.exists(os.path.join(root, "manifest.jsonl")):
        raise ValueError(f"no dataset manifest under {root}")
    return root


def load_split_records(root: str, split: str) -> list:
    """(record id, PhantomPair) for one split, in manifest order."""
    man = phantom.load_manifest(root)
    out = []
    for rec in man.records:
        if rec["split"] == split:
            out.append((rec["id"], phantom.load_pair(os.path.join(root, rec["path"]))))
    return out


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def _write_csv(path: str, header: list, rows: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _transform_record(t: RigidTransform2D) -> dict:
    return {"tx": t.tx, "ty": t.ty, "theta": t.theta,
            "cx": t.cx, "cy": t.cy, "frame": t.frame}


# ---------------------------------------------------------------------------
# phantom-gen
# ---------------------------------------------------------------------------

PHANTOM_DEFAULTS = dict(train=8, val=1, test=1, seed=0, jitter_deg=5.0,
                        noise_sigma=0.10, max_rotation_deg=5.0,
                        max_translation_px=15.0, bias_amp=0.08)


def cmd_phantom_gen(args) -> int:
    for field in ("train", "val", "test"):
        if getattr(args, field) < 1:
            raise ValueError(f"--{field} must be >= 1, got {getattr(args, field)}")
    cfg = phantom.GeneratorConfig(
        n_train=args.train, n_val=args.val, n_test=args.test, seed=args.seed,
        jitter_deg=args.jitter_deg, noise_sigma=args.noise_sigma,
        max_rotation_deg=args.max_rotation_deg,
        max_translation_px=args.max_translation_px, bias_amp=args.bias_amp)
    manifest = phantom.generate_dataset(cfg, args.out)
    print(os.path.join(args.out, "manifest.jsonl"))
    print(f"wrote {len(manifest.records)} pairs")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = dict(steps=1000, tau=0.01, lr=1e-5, batch_size=10, seed=0,
                      channels="BT+FW", baseline=False, eval_every=0,
                      refiner=False, refiner_steps=1500, refiner_lr=1e-3,
                      refiner_pairs=32, checkpoint=None)


def _write_train_log(path: str, log: train_mod.TrainLog) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log.entries:
            row = {k: v for k, v in entry.items() if k != "wall"}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    root = data_root(args)
    os.makedirs(args.out, exist_ok=True)

    if args.refiner:
        if not args.checkpoint:
            raise ValueError("--refiner needs --checkpoint (a trained encoder)")
        model = enc_mod.load_params(args.checkpoint)
        pairs = [p for _, p in load_split_records(root, "train")][:args.refiner_pairs]
        aligned = [(p.scan_a, p.scan_b, p.gt_transform) for p in pairs]
        net, losses = registration.train_refiner(
            aligned, model, seed=args.seed, steps=args.refiner_steps,
            lr=args.refiner_lr)
        out = os.path.join(args.out, "refiner")
        registration.save_refiner(out, net)
        chart = svg.LineChart("refiner training", "step", "mse")
        chart.add("loss", list(range(len(losses))), losses)
        svg.write(os.path.join(args.out, "refiner_loss.svg"), chart)
        print(out)
        print(f"final mse {losses[-1]:.5f}")
        return EXIT_OK

    cfg = train_mod.TrainConfig(
        batch_size=args.batch_size, tau=args.tau, lr=args.lr, steps=args.steps,
        channels=args.channels, baseline=args.baseline, seed=args.seed,
        eval_every=args.eval_every)
    train_pairs = [p for _, p in load_split_records(root, "train")]
    val_pairs = [p for _, p in load_split_records(root, "val")] if args.eval_every else None
    model, log = train_mod.train(cfg, train_pairs, val_pairs)
    ckpt = os.path.join(args.out, "checkpoint")
    enc_mod.save_params(ckpt, model)
    _write_train_log(os.path.join(args.out, "train_log.jsonl"), log)
    losses = log.losses()
    chart = svg.LineChart("contrastive training", "step", "loss")
    chart.add("loss", list(range(len(losses))), losses)
    svg.write(os.path.join(args.out, "loss.svg"), chart)
    print(ckpt)
    print(f"{len(losses)} steps, final loss {losses[-1]:.5f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------

EMBED_DEFAULTS = dict(split="test", checkpoint=None)


def cmd_embed(args) -> int:
    if not args.checkpoint:
        raise ValueError("--checkpoint is required")
    model = enc_mod.load_params(args.checkpoint)
    root = data_root(args)
    records = load_split_records(root, args.split)
    os.makedirs(args.out, exist_ok=True)
    index = []
    for rec_id, pair in records:
        tag = rec_id.replace("/", "_")
        fa = enc_mod.encode(pair.scan_a, model).normalize()
        fb = enc_mod.encode(pair.scan_b, model).normalize()
        fa_path, fb_path = f"{tag}_a.ptn", f"{tag}_b.ptn"
        tensorio.write_tensor(os.path.join(args.out, fa_path), fa.values)
        tensorio.write_tensor(os.path.join(args.out, fb_path), fb.values)
        index.append({"id": rec_id, "a": fa_path, "b": fb_path,
                      "shape_a": list(fa.values.shape), "shape_b": list(fb.values.shape)})
    with open(os.path.join(args.out, "embeddings.jsonl"), "w", encoding="utf-8") as fh:
        for row in index:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(os.path.join(args.out, "embeddings.jsonl"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = dict(split="test", checkpoint=None, direction="a2b")


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ValueError("--checkpoint is required")
    if args.direction not in ("a2b", "b2a", "both"):
        raise ValueError(f"unknown direction {args.direction!r}")
    model = enc_mod.load_params(args.checkpoint)
    root = data_root(args)
    pairs = [p for _, p in load_split_records(root, args.split)]
    os.makedirs(args.out, exist_ok=True)
    m = train_mod.model_similarity_matrix(model, pairs)
    if args.direction == "b2a":
        m = m.T
    elif args.direction == "both":
        m = 0.5 * (m + m.T)

    retr = evaluation.retrieval_metrics(m)
    rows = [("recall_at_1", retr.recall_at_1), ("recall_at_5", retr.recall_at_5),
            ("recall_at_10", retr.recall_at_10), ("mean_rank", retr.mean_rank)]
    verif = None
    if len(pairs) < 2:
        print("warning: fewer than 2 pairs, verification skipped", file=sys.stderr)
    else:
        verif = evaluation.verification_metrics(m)
        rows += [("auc", verif.auc), ("eer", verif.eer),
                 ("tpr_at_fpr1", verif.tpr_at_fpr1)]
    _write_csv(os.path.join(args.out, "metrics.csv"), ["metric", "value"], rows)

    with open(os.path.join(args.out, "reports.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"report": "retrieval", "ranks": retr.ranks},
                            sort_keys=True) + "\n")
        if verif is not None:
            fh.write(json.dumps({"report": "verification",
                                 "fpr": verif.fpr.tolist(),
                                 "tpr": verif.tpr.tolist()}, sort_keys=True) + "\n")

    ks = list(range(1, min(10, len(pairs)) + 1))
    ranks = np.asarray(retr.ranks)
    recall_curve = [float((ranks <= k).mean() * 100.0) for k in ks]
    chart = svg.LineChart("retrieval", "K", "recall@K (%)",
                          y_range=(0.0, 100.0))
    chart.add("recall", ks, recall_curve)
    svg.write(os.path.join(args.out, "recall_at_k.svg"), chart)

    if verif is not None:
        chart = svg.LineChart("verification ROC", "FPR", "TPR",
                              x_range=(0.0, 1.0), y_range=(0.0, 1.0))
        chart.add(f"AUC={verif.auc:.3f}", verif.fpr.tolist(), verif.tpr.tolist())
        svg.write(os.path.join(args.out, "roc.svg"), chart)

    for name, value in rows:
        print(f"{name} {_fmt(value)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# register + transfer-mask
# ---------------------------------------------------------------------------

REGISTER_DEFAULTS = dict(split="test", checkpoint=None, refiner_path=None,
                         methods="none,mi,dense,salient,refined,best",
                         initial="salient", threads=1)


def _method_transform(method: str, pair: phantom.PhantomPair, model, refiner_net,
                      fa=None, fb=None, initial="salient") -> RigidTransform2D:
    """Pixel-frame B->A transform for one pair under one method."""
    if method == "none":
        return rigid.identity("pixel")
    if method == "gt":
        return pair.gt_transform
    if method == "best":
        t, _ = evaluation.best_possible(pair.keypoints_b, pair.keypoints_a,
                                        pair.scan_a.spacing_mm)
        return t
    if method == "mi":
        return registration.register_mi(pair.scan_a.image, pair.scan_b.image).transform
    if fa is None:
        fa = enc_mod.encode(pair.scan_a, model).normalize()
        fb = enc_mod.encode(pair.scan_b, model).normalize()
    if method == "dense":
        t = registration.estimate_dense(fa, fb, model=model, scan_b=pair.scan_b)
        return rigid.to_pixel_coords(t)
    if method == "salient":
        return registration.estimate_salient(fa, fb)
    if method == "refined":
        init = _method_transform(initial, pair, model, None, fa, fb)
        return registration.refine(init, pair.scan_a, pair.scan_b, model, refiner_net)
    raise ValueError(f"unknown method {method!r}")


def _needs_model(methods) -> bool:
    return any(m in ("dense", "salient", "refined") for m in methods)


def cmd_register(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in REGISTER_METHODS:
            raise ValueError(f"unknown method {m!r} (choose from {', '.join(REGISTER_METHODS)})")
    model = None
    if _needs_model(methods):
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for feature-based methods")
        model = enc_mod.load_params(args.checkpoint)
    refiner_net = None
    if "refined" in methods:
        if not args.refiner_path:
            raise ValueError("--refiner-path is required for method 'refined' "
                             "(train one with `xmodal train --refiner`)")
        refiner_net = registration.load_refiner(args.refiner_path)

    root = data_root(args)
    records = load_split_records(root, args.split)
    os.makedirs(args.out, exist_ok=True)

    def run_pair(item):
        rec_id, pair = item
        fa = fb = None
        if model is not None:
            fa = enc_mod.encode(pair.scan_a, model).normalize()
            fb = enc_mod.encode(pair.scan_b, model).normalize()
        rows = []
        for method in methods:
            t0 = time.monotonic()
            fallback = False
            try:
                t = _method_transform(method, pair, model, refiner_net, fa, fb,
                                      args.initial)
            except registration.RegistrationError:
                t = rigid.identity("pixel")
                fallback = True
            elapsed = time.monotonic() - t0
            rep = evaluation.keypoint_transfer_error(
                t, pair.keypoints_b, pair.keypoints_a, pair.scan_a.spacing_mm)
            rows.append((method, t, rep, elapsed, fallback))
        return rec_id, rows

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run_pair, records))
    else:
        results = [run_pair(item) for item in records]

    by_method = {m: ([], []) for m in methods}
    with open(os.path.join(args.out, "pairs.jsonl"), "w", encoding="utf-8") as fh:
        for rec_id, rows in results:
            for method, t, rep, elapsed, fallback in rows:
                fh.write(json.dumps(
                    {"id": rec_id, "method": method,
                     "transform": _transform_record(t),
                     "errors_cm": rep.errors_cm, "mean_cm": rep.mean_cm,
                     "fallback": fallback},
                    sort_keys=True) + "\n")
                by_method[method][0].append(rep)
                by_method[method][1].append(elapsed)

    summary_rows = []
    print(f"{'method':<10} {'mean_cm':>8} {'sd':>8} {'median':>8} {'s/pair':>8}")
    for method in methods:
        reps, times = by_method[method]
        summ = evaluation.summarize_keypoint_reports(method, reps, times)
        row = [method, summ.mean_cm, summ.sd_cm, summ.median_cm]
        for g in evaluation.KEYPOINT_GROUPS:
            row += list(summ.group_stats[g])
        summary_rows.append(row)
        print(f"{method:<10} {summ.mean_cm:8.3f} {summ.sd_cm:8.3f} "
              f"{summ.median_cm:8.3f} {summ.runtime_s:8.3f}")
    header = ["method", "mean_cm", "sd_cm", "median_cm"]
    for g in evaluation.KEYPOINT_GROUPS:
        header += [f"{g}_mean_cm", f"{g}_sd_cm"]
    _write_csv(os.path.join(args.out, "summary.csv"), header, summary_rows)
    return EXIT_OK


TRANSFER_DEFAULTS = dict(split="test", checkpoint=None, refiner_path=None,
                         method="gt", direction="b2a", initial="salient")


def cmd_transfer_mask(args) -> int:
    if args.method not in REGISTER_METHODS + ("gt", "identity"):
        raise ValueError(f"unknown method {args.method!r}")
    method = "none" if args.method == "identity" else args.method
    if args.direction not in ("b2a", "a2b"):
        raise ValueError(f"unknown direction {args.direction!r}")
    model = None
    if _needs_model([method]):
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for feature-based methods")
        model = enc_mod.load_params(args.checkpoint)
    refiner_net = None
    if method == "refined":
        if not args.refiner_path:
            raise ValueError("--refiner-path is required for method 'refined'")
        refiner_net = registration.load_refiner(args.refiner_path)

    root = data_root(args)
    records = load_split_records(root, args.split)
    if records and records[0][1].masks_a.size == 0:
        raise ValueError("dataset has no structure masks")
    os.makedirs(args.out, exist_ok=True)

    rows = []
    per_structure = {name: [] for name in phantom.MASK_NAMES}
    for rec_id, pair in records:
        t = _method_transform(method, pair, model, refiner_net,
                              initial=args.initial)
        if args.direction == "b2a":
            src, ref, out_shape = pair.masks_b, pair.masks_a, pair.masks_a.shape[1:]
            warp = t
        else:
            src, ref, out_shape = pair.masks_a, pair.masks_b, pair.masks_b.shape[1:]
            warp = rigid.invert(t)
        for i, name in enumerate(phantom.MASK_NAMES):
            moved = evaluation.transfer_mask(src[i], warp, out_shape)
            d = evaluation.dice(moved, ref[i])
            both_empty = not moved.any() and not (ref[i] > 0.5).any()
            rows.append((rec_id, name, d, "both_empty" if both_empty else ""))
            per_structure[name].append(d)

    with open(os.path.join(args.out, "dice.csv"), "w", encoding="utf-8") as fh:
        fh.write("id,structure,dice,flag\n")
        for rec_id, name, d, flag in rows:
            fh.write(f"{rec_id},{name},{_fmt(d)},{flag}\n")
        for name in phantom.MASK_NAMES:
            fh.write(f"mean,{name},{_fmt(float(np.mean(per_structure[name])))},\n")
        overall = float(np.mean([d for _, _, d, _ in rows]))
        fh.write(f"mean,all,{_fmt(overall)},\n")
    print(f"mean dice {overall:.4f} over {len(records)} pairs ({args.method})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_DEFAULTS = dict(seed=0, tol=1e-3)


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = enc_mod.EncoderConfig(channels_a=("bone", "tissue"),
                                channels_b=("fat", "water"))
    model = enc_mod.init_params(cfg, seed=args.seed)
    x = rng.standard_normal((2, 2, 32, 32)).astype(np.float32)
    results = {"encoder": nn.grad_check(model.enc_a, x, seed=args.seed)}

    net = registration.Refiner(seed=args.seed)
    xr = rng.standard_normal((2, 256, 12, 10)).astype(np.float32)
    results["refiner"] = nn.grad_check(net, xr, seed=args.seed)

    # Moderate temperature keeps the softmax away from saturation, where
    # losing-entry gradients underflow past what central differences resolve.
    m = rng.standard_normal((6, 6)) * 0.3
    tau = 0.5
    _, grad = train_mod.nce_loss(m, tau)
    h = 1e-6
    worst = 0.0
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            mp, mm = m.copy(), m.copy()
            mp[i, j] += h
            mm[i, j] -= h
            num = (train_mod.nce_loss(mp, tau)[0] - train_mod.nce_loss(mm, tau)[0]) / (2 * h)
            worst = max(worst, abs(num - grad[i, j]) / max(abs(grad[i, j]), abs(num), 1e-8))
    results["nce_loss"] = worst

    failed = False
    for name, err in results.items():
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{name:<10} max rel err {err:.3e}  {status}")
        failed = failed or err > args.tol
    if failed:
        print("gradient check failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing + dispatch
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, needs_out=True, needs_data=False):
    p.add_argument("--config", help="flat section.key=value config file")
    p.add_argument("--seed", type=int)
    if needs_out:
        p.add_argument("--out", required=True, help="output directory")
    if needs_data:
        p.add_argument("--data", help="dataset root (default: $XMODAL_DATA_ROOT)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmodal")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic phantom dataset")
    _add_common(p)
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--jitter-deg", type=float, dest="jitter_deg")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--max-rotation-deg", type=float, dest="max_rotation_deg")
    p.add_argument("--max-translation-px", type=float, dest="max_translation_px")
    p.add_argument("--bias-amp", type=float, dest="bias_amp")

    p = sub.add_parser("train", help="contrastive training (or --refiner)")
    _add_common(p, needs_data=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--channels")
    p.add_argument("--baseline", action="store_const", const=True)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--refiner", action="store_const", const=True)
    p.add_argument("--refiner-steps", type=int, dest="refiner_steps")
    p.add_argument("--refiner-lr", type=float, dest="refiner_lr")
    p.add_argument("--refiner-pairs", type=int, dest="refiner_pairs")
    p.add_argument("--checkpoint")

    p = sub.add_parser("embed", help="write normalized feature maps for a split")
    _add_common(p, needs_data=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split")

    p = sub.add_parser("eval", help="retrieval + verification metrics and plots")
    _add_common(p, needs_data=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split")
    p.add_argument("--direction", choices=("a2b", "b2a", "both"))

    p = sub.add_parser("register", help="keypoint-transfer registration benchmark")
    _add_common(p, needs_data=True)
    p.add_argument("--checkpoint")
    p.add_argument("--refiner-path", dest="refiner_path")
    p.add_argument("--methods")
    p.add_argument("--initial", choices=("salient", "dense"))
    p.add_argument("--split")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("transfer-mask", help="warp structure masks and score Dice")
    _add_common(p, needs_data=True)
    p.add_argument("--checkpoint")
    p.add_argument("--refiner-path", dest="refiner_path")
    p.add_argument("--method")
    p.add_argument("--direction", choices=("b2a", "a2b"))
    p.add_argument("--initial", choices=("salient", "dense"))
    p.add_argument("--split")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p, needs_out=False)
    p.add_argument("--tol", type=float)

    return parser


COMMANDS = {
    "phantom-gen": (cmd_phantom_gen, PHANTOM_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "embed": (cmd_embed, EMBED_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
    "register": (cmd_register, REGISTER_DEFAULTS),
    "transfer-mask": (cmd_transfer_mask, TRANSFER_DEFAULTS),
    "gradcheck": (cmd_gradcheck, GRADCHECK_DEFAULTS),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    func, defaults = COMMANDS[args.command]
    defaults = dict(defaults, seed=defaults.get("seed", 0))
    try:
        args = resolve(args, defaults)
        return func(args)
    except (train_mod.TrainDivergence, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
