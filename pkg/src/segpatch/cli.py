"""Command-line interface: ``segpatch <command> [options]``.

Every option can also come from ``--config FILE`` (TOML or JSON).  Keys are
option names with dashes or underscores; a table named after the command
(``[optimize]``) overrides top-level keys, and explicit flags override both.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasets as io
from .appearance import PRESETS
from .core import ClassPalette
from .errors import NumericalError, ValidationError
from .losses import GAMMA_MODES, LossConfig

log = logging.getLogger("segpatch")


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _gamma(text):
    if str(text) in GAMMA_MODES:
        return str(text)
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be a number or one of {GAMMA_MODES}") from None


def _targeted(text: str):
    attacked, sep, target = str(text).partition(":")
    if not sep:
        raise argparse.ArgumentTypeError("expected <attacked>:<target|nn>")
    try:
        return int(attacked), (target if target == "nn" else int(target))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad targeted spec {text!r}") from None


def _common(p: argparse.ArgumentParser, model=True):
    p.add_argument("--config", help="TOML or JSON file with option values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    if model:
        p.add_argument("--model", default="toynet",
                       help="toynet[:seed], toynet-raw[:seed] or module:factory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segpatch", description="Adversarial patches for semantic segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="optimize a universal patch set")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--val-data", help="validation dataset directory")
    p.add_argument("--out", required=True, help="output patch directory")
    p.add_argument("--placement", choices=("eot", "projective"), default="eot")
    p.add_argument("--patches", type=int, default=1)
    p.add_argument("--patch-size", type=_hw, default=(16, 32))
    p.add_argument("--init", default="random", help="random, gray or file:<png>")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--step-rule", choices=("adam", "ascent"), default="adam")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--appearance", choices=sorted(PRESETS), default="cityscapes")
    p.add_argument("--gamma", type=_gamma, default="adaptive")
    p.add_argument("--w-adv", type=float, default=1.0)
    p.add_argument("--w-nps", type=float, default=0.0)
    p.add_argument("--w-smooth", type=float, default=1.0)
    p.add_argument("--palette", help="JSON list of [r, g, b] printable colors")
    p.add_argument("--beta", type=float, help="defense-aware mix (needs --calibration)")
    p.add_argument("--calibration", help="detector calibration JSON")
    p.add_argument("--targeted", type=_targeted, help="<attacked>:<target class|nn>")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--report", help="write the per-epoch report as JSON")

    p = sub.add_parser("evaluate", help="mIoU / mAcc / adversarial effect of a patch")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--patch", help="patch directory (omit for clean evaluation)")
    p.add_argument("--placement", choices=("eot", "projective"), default="eot")
    p.add_argument("--exclude-patch-pixels", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", help="report stem; writes <stem>.json and <stem>.csv")

    p = sub.add_parser("calibrate-detector", help="fit detector statistics and decision threshold")
    _common(p)
    p.add_argument("--data", required=True, help="clean images for the feature statistics")
    p.add_argument("--tune-data", help="images for threshold tuning (default: --data)")
    p.add_argument("--patch", help="patch used to build the attacked tuning images")
    p.add_argument("--placement", choices=("eot", "projective"), default="eot")
    p.add_argument("--layer", help="layer name (default: the model's fusion layer)")
    p.add_argument("--nu", type=float, default=0.999)
    p.add_argument("--policy", default="youden", help="youden or fpr:<alpha>")
    p.add_argument("--out", required=True, help="calibration JSON")

    p = sub.add_parser("detect", help="score images with a calibrated detector")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--patch", help="apply this patch before scoring")
    p.add_argument("--placement", choices=("eot", "projective"), default="eot")
    p.add_argument("--out", help="CSV of name, score, unsafe")

    p = sub.add_parser("roc", help="ROC curve and AUC from two score files")
    _common(p, model=False)
    p.add_argument("--clean", required=True, help="scores: CSV with a 'score' column, JSON list, or one per line")
    p.add_argument("--attacked", required=True)
    p.add_argument("--out", help="curve CSV")

    p = sub.add_parser("gen-scene", help="write a synthetic labeled dataset")
    _common(p, model=False)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=_hw, default=(64, 128))
    p.add_argument("--kind", choices=("synthetic", "projective"), default="synthetic")
    return parser


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def _config_defaults(cfg: dict, command: str, sub: argparse.ArgumentParser) -> dict:
    merged = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    merged.update(cfg.get(command, {}))
    known = {a.dest: a for a in sub._actions}
    out = {}
    for key, value in merged.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ValidationError(f"config key {key!r} is not an option of {command!r}")
        action = known[dest]
        if action.type is _hw and isinstance(value, list):
            value = tuple(value)
        elif action.type is not None and not isinstance(value, (list, dict, bool)):
            try:
                value = action.type(value)
            except argparse.ArgumentTypeError as exc:
                raise ValidationError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise ValidationError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        out[dest] = value
    return out


def _config_path(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if path and command:
        sub = parser._subparsers._group_actions[0].choices[command]
        defaults = _config_defaults(load_config(path), command, sub)
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands


def _model(args):
    from .model import load_model

    return load_model(args.model)


def _patched_images(dataset, patch_dir, placement, seed):
    from .optimizer import patched_images

    return patched_images(dataset, io.load_patch(patch_dir)[0], placement, seed)


def cmd_optimize(args) -> int:
    from .detector import DetectorCalibration
    from .optimizer import OptimizeConfig, init_patch, optimize_patch

    model = _model(args)
    data = io.load_dataset(args.data, model.num_classes, "train")
    val = io.load_dataset(args.val_data, model.num_classes, "val") if args.val_data else None
    if args.placement == "projective" and not data.has_poses:
        raise ValidationError("projective placement needs a poses/ file for every image")
    palette = ClassPalette(np.asarray(json.loads(Path(args.palette).read_text()))) if args.palette else ClassPalette()
    targeted = args.targeted is not None
    loss = LossConfig(targeted=targeted, attacked=args.targeted[0] if targeted else None,
                      target=args.targeted[1] if targeted else None, gamma=args.gamma,
                      w_adv=args.w_adv, w_nps=args.w_nps, w_smooth=args.w_smooth,
                      beta=args.beta, palette=palette)
    detector = DetectorCalibration.load(args.calibration) if args.calibration else None
    kind, _, path = args.init.partition(":")
    channels = model.in_channels
    from .core import Patch, PatchSet

    patches = PatchSet([Patch(init_patch(kind, args.patch_size, channels, args.seed + k, path or None).data, id=k + 1)
                        for k in range(args.patches)])
    cfg = OptimizeConfig(epochs=args.epochs, lr=args.lr, step_rule=args.step_rule, batch_size=args.batch_size,
                         seed=args.seed, placement=args.placement, loss=loss, appearance=args.appearance,
                         detector=detector, checkpoint_every=args.checkpoint_every,
                         checkpoint_dir=args.out if args.checkpoint_every else None)
    result, report = optimize_patch(data, model, patches, cfg, val_dataset=val, model_id=args.model)
    meta = io.PatchMeta(sizes=[p.data.shape[:2] for p in result], num_patches=len(result), model_id=args.model,
                        placement_mode=args.placement, loss_config=loss.to_dict(), epochs=args.epochs,
                        seed=args.seed)
    io.save_patch(args.out, result, meta)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2))
    print(json.dumps({"final_val_mIoU": report.val_miou[-1], "final_val_mAcc": report.val_macc[-1],
                      "seconds": report.wall_clock[-1]}))
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import segmentation_report, write_report
    from .optimizer import evaluate_patches

    model = _model(args)
    data = io.load_dataset(args.data, model.num_classes)
    patches = io.load_patch(args.patch)[0] if args.patch else None
    res = evaluate_patches(model, data, patches, placement=args.placement, seed=args.seed,
                           exclude_patch_pixels=args.exclude_patch_pixels)
    report = segmentation_report(res["confusion"], data.class_names or None,
                                 adversarial_effect=None if np.isnan(res["adversarial_effect"])
                                 else res["adversarial_effect"],
                                 exclude_patch_pixels=args.exclude_patch_pixels)
    if args.out:
        write_report(args.out, report)
    print(json.dumps({k: report[k] for k in ("mIoU", "mAcc", "adversarial_effect")}))
    return 0


def cmd_calibrate(args) -> int:
    from .detector import calibrate_decision_threshold, calibrate_stats, detection_scores

    model = _model(args)
    clean = io.load_dataset(args.data, model.num_classes)
    cal = calibrate_stats(clean.images, model, args.layer, args.nu)
    tune = io.load_dataset(args.tune_data, model.num_classes) if args.tune_data else clean
    if args.patch:
        attacked = _patched_images(tune, args.patch, args.placement, args.seed)
        rho = calibrate_decision_threshold(detection_scores(model, tune.images, cal),
                                           detection_scores(model, attacked, cal), args.policy)
        cal = cal.with_rho(rho)
    else:
        log.warning("no --patch given; rho left unset")
    cal.save(args.out)
    print(json.dumps({"layer": cal.layer, "theta_nu": cal.theta_nu, "rho": cal.rho}))
    return 0


def cmd_detect(args) -> int:
    from .detector import DetectorCalibration, detection_scores

    model = _model(args)
    cal = DetectorCalibration.load(args.calibration)
    if cal.rho is None:
        raise ValidationError("calibration has no decision threshold rho")
    data = io.load_dataset(args.data, model.num_classes)
    images = _patched_images(data, args.patch, args.placement, args.seed) if args.patch else data.images
    scores = detection_scores(model, images, cal)
    rows = [(s.name, float(v), bool(v > cal.rho)) for s, v in zip(data, scores)]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "score", "unsafe"])
            w.writerows(rows)
    for name, score, unsafe in rows:
        print(f"{name}\t{score:.6g}\t{'unsafe' if unsafe else 'safe'}")
    return 0


def read_scores(path) -> np.ndarray:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return np.asarray(json.loads(text), dtype=np.float64)
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines and "score" in lines[0].split(","):
        return np.array([float(r["score"]) for r in csv.DictReader(lines)])
    try:
        return np.array([float(ln) for ln in lines])
    except ValueError as exc:
        raise ValidationError(f"{path}: unreadable score file ({exc})") from exc


def cmd_roc(args) -> int:
    from .metrics import roc_auc, write_roc_csv

    curve = roc_auc(read_scores(args.clean), read_scores(args.attacked))
    if args.out:
        write_roc_csv(args.out, curve)
    print(json.dumps({"auc": curve.auc}))
    return 0


def cmd_gen_scene(args) -> int:
    from .scenes import generate_projective_scene, generate_synthetic_scene

    gen = generate_projective_scene if args.kind == "projective" else generate_synthetic_scene
    data = gen(seed=args.seed, count=args.count, size=args.size)
    io.save_dataset(args.out, data)
    print(json.dumps({"written": len(data), "out": str(args.out)}))
    return 0


COMMANDS = {
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "calibrate-detector": cmd_calibrate,
    "detect": cmd_detect,
    "roc": cmd_roc,
    "gen-scene": cmd_gen_scene,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
