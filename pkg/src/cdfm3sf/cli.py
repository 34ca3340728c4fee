"""Command-line entry point: synth, prepare, train, infer, eval and audit.

Exit status: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure. Every subcommand that writes outputs also writes
``run_manifest.json`` next to them. Timestamps honour SOURCE_DATE_EPOCH
so that repeated runs can be byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import metrics as M
from . import tensor as T
from .model import VARIANTS, CheckpointError, ModelConfig, audit, build_model, load_checkpoint
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("cdfm3sf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# manifests and config files

def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def write_manifest(out_dir, subcommand: str, config: dict, seed, inputs: dict, outputs: dict,
                   started: str) -> Path:
    manifest = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "start_time": started,
        "end_time": _timestamp(),
    }
    path = Path(out_dir) / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_MODEL_KEYS = {f.name: f for f in dataclasses.fields(ModelConfig)} | {"model_seed": None}
_EXTRA_KEYS = {"dtype"}


def _coerce(key: str, text: str, default):
    text = text.strip()
    if key in ("max_steps",) and text.lower() in ("", "none"):
        return None
    if key in ("loss_weights", "mdsc_kernels", "deconv_strides", "sdrb_rates", "sdrb_shared"):
        kind = float if key == "loss_weights" else int
        return tuple(kind(v) for v in text.split(","))
    if key == "pool_plan":
        return tuple(tuple(int(a) for a in item.split("x")) for item in text.split(","))
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int) or key in ("max_steps", "model_seed"):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys accept '-' or '_'."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_configs(raw: dict[str, str]) -> tuple[TrainConfig, ModelConfig, str]:
    tc, mc = TrainConfig(), ModelConfig()
    dtype = "float64"
    for key, value in raw.items():
        if key in _EXTRA_KEYS:
            dtype = value
        elif key == "model_seed":
            mc.seed = int(value)
        elif key in _TRAIN_KEYS:
            setattr(tc, key, _coerce(key, value, getattr(tc, key)))
        elif key in _MODEL_KEYS and key != "band_counts":
            setattr(mc, key, _coerce(key, value, getattr(mc, key)))
        else:
            raise ValueError(f"unknown config key {key!r}")
    if dtype not in ("float32", "float64"):
        raise ValueError(f"dtype must be float32 or float64, got {dtype!r}")
    tc.validate()
    mc.validate()
    return tc, mc, dtype


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    started = _timestamp()
    out = Path(args.out)
    if args.scenes < 1 or args.size < 12 or args.size % 12:
        raise UsageError("--scenes must be >= 1 and --size a positive multiple of 12")
    scenes = D.synth_dataset(args.seed, args.scenes, args.size, (args.cloud_min, args.cloud_max))
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for scene in scenes:
        D.write_scene(scene, out / scene.scene_id)
        written[scene.scene_id] = out / scene.scene_id
    cfg = {"scenes": args.scenes, "size": args.size, "cloud_fraction": [args.cloud_min, args.cloud_max]}
    write_manifest(out, "synth", cfg, args.seed, {}, written, started)
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def _scene_dirs(root: Path) -> list[Path]:
    if (root / D.SCENE_FILES["vnir"]).exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / D.SCENE_FILES["vnir"]).exists())
    if not dirs:
        raise ValueError(f"{root}: no scene directories found")
    return dirs


def cmd_prepare(args) -> int:
    started = _timestamp()
    root = Path(args.scenes)
    groups, problems = [], []
    for d in _scene_dirs(root):
        try:
            scene = D.read_scene(d)
            D.check_mask(scene.mask)
            groups.extend(D.tile(scene, args.window))
        except ValueError as exc:
            problems.append(f"{d.name}: {exc}")
    for p in problems:
        print(f"error: {p}", file=sys.stderr)
    if problems:
        return EXIT_DATA
    tiled = len(groups)
    if not args.no_augment:
        groups = D.augment_all(groups, args.seed)
    manifest = D.write_patches(groups, args.out)
    cfg = {"window": args.window, "augment": not args.no_augment, "tiled_groups": tiled,
           "groups": len(groups)}
    write_manifest(args.out, "prepare", cfg, args.seed, {"scenes": root}, {"manifest": manifest}, started)
    print(f"{tiled} tiled groups, {len(groups)} written to {manifest}")
    return EXIT_OK


def _patch_manifest(path) -> Path:
    p = Path(path)
    return p / "patches.tsv" if p.is_dir() else p


def cmd_train(args) -> int:
    started = _timestamp()
    raw = read_config_file(args.config) if args.config else {}
    for key in ("epochs", "batch_size", "lr", "seed", "max_steps", "variant", "width", "up_width",
                "dtype"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = str(value)
    tc, mc, dtype = resolve_configs(raw)
    manifest = _patch_manifest(args.data)
    groups = D.read_patches(manifest)
    if not groups:
        raise ValueError(f"{manifest}: no patch groups")
    T.set_default_dtype(np.dtype(dtype))
    model = build_model(mc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {"train": tc.to_dict(), "model": mc.to_dict(), "dtype": dtype}
    try:
        ckpt, records = train(model, groups, tc, out)
    except TrainingDiverged as exc:
        write_manifest(out, "train", cfg, tc.seed, {"data": manifest},
                       {"checkpoint": out / "model.ckpt", "loss_log": out / "loss_log.tsv",
                        "status": f"diverged: {exc}"}, started)
        raise
    write_manifest(out, "train", cfg, tc.seed, {"data": manifest},
                   {"checkpoint": ckpt, "loss_log": out / "loss_log.tsv"}, started)
    if records:
        print(f"{len(records)} steps, final L_total {records[-1][2]:.6f}; checkpoint {ckpt}")
    return EXIT_OK


def window_origins(extent: int, window: int, origin: int = 0) -> list[int]:
    """Window starts on a half-overlap grid shifted by ``origin``, covering [0, extent)."""
    step = window // 2
    starts = set(range(origin % step, extent - window + 1, step))
    starts.update((0, extent - window))
    return sorted(starts)


def sliding_inference(model, inputs: dict, window: int = 384, origin=(0, 0)) -> np.ndarray:
    """10 m cloud probability for a whole scene, averaging overlapping windows.

    ``inputs`` maps branch names to (h, w, c) reflectance arrays.
    """
    s = model.config.scale_factor
    h, w = inputs["vnir"].shape[:2]
    if h % s or w % s:
        raise ValueError(f"scene extent {h}x{w} must be a multiple of {s}")
    window = min(window, h - h % s, w - w % s)
    if window < s or window % s:
        raise ValueError(f"window {window} must be a positive multiple of {s}")
    align = s // model.config.pool_plan[-1][1]
    if any(o % align for o in origin):
        raise ValueError(f"window origin {origin} must be a multiple of {align}")
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    with T.no_grad():
        for r in window_origins(h, window, origin[0]):
            for c in window_origins(w, window, origin[1]):
                batch = {}
                for name in model.config.branches:
                    f = D.GROUP_FACTOR[name]
                    crop = inputs[name][r // f:(r + window) // f, c // f:(c + window) // f]
                    batch[name] = crop[None].astype(T.get_default_dtype())
                prob = model.forward(batch, training=False).top.data[0, ..., 0]
                total[r:r + window, c:c + window] += prob
                count[r:r + window, c:c + window] += 1
    return total / count


def check_scene_bands(scene: D.Scene, config: ModelConfig) -> None:
    for name in config.branches:
        have = scene.stacks()[name].channels
        want = config.band_counts[name]
        if have != want:
            raise ValueError(f"scene {scene.scene_id}: {name} has {have} bands, variant "
                             f"{config.variant} expects {want}")


def cmd_infer(args) -> int:
    started = _timestamp()
    model = load_checkpoint(args.checkpoint)
    T.set_default_dtype(model.named_parameters()["top.conv.kernel"].data.dtype)
    scene = D.read_scene(args.scene, with_mask=False)
    check_scene_bands(scene, model.config)
    D.check_alignment(scene)
    stacks = scene.stacks()
    inputs, nodata = {}, np.zeros((scene.vnir.height, scene.vnir.width), dtype=bool)
    for name in model.config.branches:
        arr = D.as_reflectance(stacks[name])
        bad = stacks[name].nodata_mask()
        f = D.GROUP_FACTOR[name]
        nodata |= np.kron(bad, np.ones((f, f), dtype=bool)).astype(bool)
        inputs[name] = np.where(bad[..., None], 0.0, arr)
    prob = sliding_inference(model, inputs, args.window, tuple(args.origin))
    mask = (prob >= args.threshold).astype(np.uint8)
    mask[nodata] = D.NODATA
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prob_path, mask_path = out / "probability.bstk", out / "mask.bstk"
    D.write_bandstack(D.BandStack(prob.astype(np.float32)[..., None], 10, scene.vnir.offset), prob_path)
    D.write_mask(mask, mask_path, 10, scene.vnir.offset)
    cfg = {"threshold": args.threshold, "window": args.window, "origin": list(args.origin),
           "variant": model.config.variant}
    write_manifest(out, "infer", cfg, None, {"checkpoint": args.checkpoint, "scene": args.scene},
                   {"probability": prob_path, "mask": mask_path}, started)
    print(f"wrote {prob_path} and {mask_path} ({mask.shape[0]}x{mask.shape[1]})")
    return EXIT_OK


def _load_raster(path) -> np.ndarray:
    stack = D.read_bandstack(path)
    if stack.channels != 1:
        raise ValueError(f"{path}: expected a single-band raster, got {stack.channels} bands")
    return stack.data[..., 0]


def cmd_eval(args) -> int:
    started = _timestamp()
    if len(args.pred) != len(args.ref):
        raise UsageError(f"{len(args.pred)} predictions but {len(args.ref)} references")
    pairs, problems = [], []
    for p, r in zip(args.pred, args.ref):
        pred, ref = _load_raster(p), _load_raster(r)
        if pred.shape != ref.shape:
            problems.append(f"{p} vs {r}: shape {pred.shape} != {ref.shape}")
            continue
        D.check_mask(ref)
        pairs.append((p, pred, ref))
    for msg in problems:
        print(f"error: {msg}", file=sys.stderr)
    if problems:
        return EXIT_DATA
    rows, totals = {}, [0, 0, 0, 0]
    for p, pred, ref in pairs:
        binary = (pred >= args.threshold).astype(np.uint8) if pred.dtype.kind == "f" else pred
        c = M.confusion(binary, ref)
        name = Path(p).stem if len(pairs) == 1 else str(p)
        rows[name] = M.scores(c)[0]
        totals = [a + b for a, b in zip(totals, (c.tp, c.tn, c.fp, c.fn))]
    if len(pairs) > 1:
        rows["all"] = M.scores(M.ConfusionCounts(*totals))[0]
    tsv, text = M.format_report(rows)
    print(text, end="")
    outputs = {}
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(tsv)
        (out / "report.txt").write_text(text)
        outputs["report"] = out / "report.tsv"
    if args.curves:
        if any(pred.dtype.kind != "f" for _, pred, _ in pairs):
            raise ValueError("--curves needs probability maps as predictions")
        prob = np.concatenate([pred.reshape(-1) for _, pred, _ in pairs])
        ref = np.concatenate([ref.reshape(-1) for _, _, ref in pairs])
        roc, uapa = M.curves(prob, ref)
        aucs = {"roc_auc": M.auc(roc, roc=True), "uapa_auc": M.auc(uapa, roc=False)}
        print(f"ROC AUC {aucs['roc_auc']:.4f}  UA-PA AUC {aucs['uapa_auc']:.4f}")
        if out is None:
            raise UsageError("--curves needs --out")
        M.write_curve(roc, out / "roc.tsv")
        M.write_curve(uapa, out / "uapa.tsv")
        (out / "auc.json").write_text(json.dumps(aucs, indent=2, sort_keys=True) + "\n")
        outputs.update(roc=out / "roc.tsv", uapa=out / "uapa.tsv", auc=out / "auc.json")
    if out is not None:
        write_manifest(out, "eval", {"threshold": args.threshold, "curves": args.curves}, None,
                       {"pred": list(map(str, args.pred)), "ref": list(map(str, args.ref))},
                       outputs, started)
    return EXIT_OK


def cmd_audit(args) -> int:
    started = _timestamp()
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        raw = read_config_file(args.config) if args.config else {}
        if args.variant:
            raw["variant"] = args.variant
        _, mc, _ = resolve_configs({k: v for k, v in raw.items() if k in _MODEL_KEYS or k in _EXTRA_KEYS})
        model = build_model(mc)
    report = audit(model)
    print(report.to_json() if args.json else report.to_text(), end="" if not args.json else "\n")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "audit.tsv").write_text(report.to_tsv())
        write_manifest(out, "audit", model.config.to_dict(), model.config.seed,
                       {"config": args.config or "", "checkpoint": args.checkpoint or ""},
                       {"table": out / "audit.tsv"}, started)
    if not report.ok:
        print("audit mismatch: " + ", ".join(report.mismatches), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------

def _origin(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROW,COL, got {text!r}")
    return r, c


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdfm3sf", description="Multi-scale cloud detection toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic scenes with exact masks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--size", type=int, default=384, help="10 m extent in pixels (multiple of 12)")
    p.add_argument("--cloud-min", type=float, default=0.15)
    p.add_argument("--cloud-max", type=float, default=0.45)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="tile scenes into patch groups with mask pyramids")
    p.add_argument("--scenes", required=True, help="scene directory or directory of scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=384)
    p.add_argument("--seed", type=int, default=0, help="augmentation seed")
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on prepared patches")
    p.add_argument("--data", required=True, help="patches.tsv or its directory")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--width", type=int)
    p.add_argument("--up-width", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="full-scene sliding-window inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--window", type=int, default=384)
    p.add_argument("--origin", type=_origin, default=(0, 0), help="grid shift ROW,COL in 10 m pixels")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against references")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=0.5, help="applied to probability maps")
    p.add_argument("--curves", action="store_true", help="write ROC and UA-PA curves with AUCs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="per-layer parameter table")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--checkpoint")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    previous = T.get_default_dtype()
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        T.set_default_dtype(previous)


if __name__ == "__main__":
    sys.exit(main())
