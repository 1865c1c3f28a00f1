"""Command-line entry point: ``unest {train,infer,eval,inspect,gradcheck,selftest}``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from contextlib import ExitStack
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import GeometryError, ModelConfig, TrainConfig
from .tensor import default_dtype

log = logging.getLogger("unest")

PRECISIONS = {"32": np.float32, "64": np.float64}


class UsageError(Exception):
    """Bad input detected after argument parsing."""


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------


def _triple(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected N or A,B,C, got {text!r}")
    return tuple(int(p) for p in parts)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def parse_classes(text: str) -> list[int]:
    """``"1,2,5-7"`` -> ``[1, 2, 5, 6, 7]``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise UsageError(f"no classes in {text!r}")
    return sorted(set(out))


def _set_pairs(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """Defaults, then the config file, then ``--set`` pairs, then dedicated flags."""
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(cfgmod.read_kv(path))
    if getattr(args, "scale", None):
        values["scale"] = args.scale
    values.update(_set_pairs(getattr(args, "set", None) or []))
    flag_map = {
        "lr": "peak_lr",
        "steps": "total_steps",
        "warmup": "warmup_steps",
        "batch_size": "batch_size",
        "classes": "classes",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = str(value)
    if getattr(args, "window", None) is not None:
        values["window"] = ",".join(str(v) for v in args.window)
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    model_cfg, train_cfg = cfgmod.load_configs(values)
    if "window" in values:
        # one window drives both the model geometry and the training crops
        model_cfg = cfgmod.from_mapping(ModelConfig, {"window": values["window"]}, model_cfg)
    else:
        train_cfg = cfgmod.from_mapping(TrainConfig, {"window": ",".join(map(str, model_cfg.window))}, train_cfg)
    return model_cfg, train_cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load_pairs(data_dir: Path, hu_window, spacing) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    from .volume_io import intensity_window, list_volumes, read_volume, resample

    images = list_volumes(data_dir / "images")
    labels = list_volumes(data_dir / "labels")
    missing = sorted(set(images) ^ set(labels))
    if missing:
        raise UsageError(f"images and labels do not pair up: {', '.join(missing)}")
    pairs = {}
    for sid in sorted(images):
        img = read_volume(images[sid])
        lab = read_volume(labels[sid], kind="label")
        if img.shape != lab.shape:
            raise GeometryError(f"{sid}: image {img.shape} and label {lab.shape} differ")
        if hu_window is not None:
            img = intensity_window(img, *hu_window)
        if spacing is not None:
            img, lab = resample(img, spacing), resample(lab, spacing)
        pairs[sid] = (np.asarray(img.values, np.float32)[None], np.asarray(lab.values, np.int64))
    if not pairs:
        raise UsageError(f"no volumes found under {data_dir}")
    return pairs


def cmd_train(args) -> int:
    from .model import build, count_params
    from .plotting import loss_curve
    from .trainer import fold_of, load_checkpoint, save_checkpoint, train
    from .volume_io import synthetic_shapes, training_stream

    model_cfg, train_cfg = resolve_configs(args)
    model_cfg.validate()
    train_cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.data_dir:
        pairs = _load_pairs(Path(args.data_dir), args.hu_window, args.spacing)
        if args.fold is not None:
            pairs = {k: v for k, v in pairs.items() if fold_of(k) != args.fold}
            if not pairs:
                raise UsageError(f"fold {args.fold} leaves no training volumes")
        data = list(pairs.values())
        stream = training_stream(
            data, train_cfg.window, train_cfg.seed, train_cfg.foreground_prob, train_cfg.augment_prob
        )
        source = f"{len(data)} volumes from {args.data_dir}"
    else:
        image, label = synthetic_shapes(model_cfg.window[0], seed=train_cfg.seed)
        if model_cfg.classes < int(label.max()) + 1:
            raise UsageError(f"synthetic data has 3 classes, model config has {model_cfg.classes}")
        stream = iter(lambda: (image, label), None)
        source = "one synthetic shapes volume"

    if args.init:
        model = load_checkpoint(args.init, model_cfg)
        source += f", initialised from {args.init}"
    else:
        model = build(model_cfg, seed=train_cfg.seed)
    print(f"training {count_params(model)} parameters on {source} for {train_cfg.total_steps} steps")

    def report(step, loss, lr):
        if step % max(1, args.log_every) == 0 or step == train_cfg.total_steps - 1:
            print(f"step {step:6d}  loss {loss:.6f}  lr {lr:.3e}", flush=True)

    result = train(model, stream, train_cfg, checkpoint_dir=out, on_step=report)
    ckpt = save_checkpoint(model, out / "model.ckpt", train_cfg.total_steps)
    (out / "config.txt").write_text(cfgmod.dump_kv(model_cfg, train_cfg))
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "grad_norm"])
        for i, (loss, lr, gn) in enumerate(zip(result.losses, result.lrs, result.grad_norms)):
            w.writerow([i, repr(loss), repr(lr), repr(gn)])
    loss_curve(result.losses, result.lrs, out / "loss_curve.png")
    print(f"wrote {ckpt}, losses.csv, loss_curve.png and config.txt to {out}")
    return 0


def cmd_infer(args) -> int:
    from .inference import ensemble, label_volume, sliding_window
    from .trainer import load_checkpoint
    from .volume_io import Volume, intensity_window, read_volume, write_volume

    guard = None
    if args.config:
        guard, _ = resolve_configs(argparse.Namespace(config=args.config, set=args.set))
    elif args.set:
        raise UsageError("--set needs --config for infer")
    for path in args.checkpoint:
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
    vol = read_volume(args.input)
    if args.hu_window is not None:
        vol = intensity_window(vol, *args.hu_window)
    image = np.asarray(vol.values)[None]
    maps = []
    for path in args.checkpoint:
        model = load_checkpoint(path, guard)
        window = tuple(args.window) if args.window else tuple(model.cfg.window)
        if window != tuple(model.cfg.window):
            raise GeometryError(f"window {window} does not match the model window {tuple(model.cfg.window)}")
        maps.append(sliding_window(model, image.astype(model.dtype), window, args.overlap, args.batch_size))
        print(f"{path}: {len(maps[-1])} classes")
    probs = ensemble(maps)
    labels = label_volume(probs, vol)
    write_volume(labels, args.output)
    print(f"wrote labels {labels.shape} to {args.output}")
    if args.probs_dir:
        pdir = Path(args.probs_dir)
        pdir.mkdir(parents=True, exist_ok=True)
        for k, p in enumerate(probs):
            write_volume(Volume(p.astype(np.float32), vol.spacing, "intensity", vol.origin), pdir / f"class_{k:03d}.nii.gz")
        print(f"wrote {len(probs)} probability volumes to {pdir}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_cohort, write_per_class_csv, write_summary_csv, write_volume_points_csv
    from .plotting import bland_altman_plot, dsc_boxplot, volume_scatter
    from .volume_io import list_volumes, read_volume

    preds = list_volumes(args.pred_dir)
    trues = list_volumes(args.true_dir)
    common = sorted(set(preds) & set(trues))
    unmatched = sorted(set(preds) ^ set(trues))
    if not common:
        raise UsageError("no subject ids shared by --pred-dir and --true-dir")
    if unmatched:
        raise UsageError(f"subjects without a counterpart: {', '.join(unmatched)}")
    classes = parse_classes(args.classes)
    pairs = {}
    for sid in common:
        p = read_volume(preds[sid], kind="label")
        t = read_volume(trues[sid], kind="label")
        if p.shape != t.shape:
            raise GeometryError(f"{sid}: prediction {p.shape} and reference {t.shape} differ")
        if not np.allclose(p.spacing, t.spacing):
            raise GeometryError(f"{sid}: spacing {p.spacing} vs {t.spacing}")
        pairs[sid] = (p.values, t.values, t.spacing)
    report = evaluate_cohort(pairs, classes)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_per_class_csv(report, out / "per_class.csv")
    write_summary_csv(report, out / "summary.csv")
    write_volume_points_csv(report, out / "volume_points.csv")
    dsc_boxplot(report, out / "dsc_boxplot.png")
    plotted = [k for k in classes if k in report.volumetrics][: args.max_class_figures]
    for k in plotted:
        bland_altman_plot(report, k, out / f"bland_altman_class{k}.png")
        volume_scatter(report, k, out / f"volume_scatter_class{k}.png")
    for note in report.notes:
        print(f"note: {note}", file=sys.stderr)
    print(f"{len(common)} subjects, {len(classes)} classes: mean DSC {report.mean_dsc:.4f}, mean HD {report.mean_hd:.3f} mm")
    n_inf = sum(1 for r in report.rows if r.present and math.isinf(r.hd_mm))
    if n_inf:
        print(f"{n_inf} present class/subject pairs have infinite HD")
    print(f"wrote CSV reports and {1 + 2 * len(plotted)} figures to {out}")
    return 0


def cmd_inspect(args) -> int:
    from .model import FLOP_CONVENTION, build, count_params, estimate_flops, param_report

    if not args.scale and not args.config:
        raise UsageError("inspect needs --scale or --config")
    model_cfg, _ = resolve_configs(args)
    model_cfg.validate()
    window = tuple(args.window) if args.window else tuple(model_cfg.window)
    print("[config]")
    print(cfgmod.dump_kv(model_cfg), end="")
    print("\n[blocks]")
    for level in range(model_cfg.hierarchies):
        T, n = model_cfg.block_layout(level, window)
        print(f"hierarchy {level}: grid {model_cfg.token_grid(level, window)}  blocks T={T}  sequence n={n}")
    model = build(model_cfg, seed=0)
    total = count_params(model)
    print("\n[parameters]")
    rows = param_report(model, depth=args.depth)
    width = max(len(k) for k in rows)
    for key, value in rows.items():
        print(f"{key:<{width}}  {value:>12,d}")
    print(f"{'total':<{width}}  {total:>12,d}")
    flops = estimate_flops(model_cfg, window)
    print(f"\n[flops at {'x'.join(map(str, window))}]")
    for key, value in flops.parts.items():
        print(f"{key:<28}  {value / 1e9:12.3f} G")
    print(f"{'total':<28}  {flops.gflops:12.3f} G")
    print(f"convention: {FLOP_CONVENTION}")
    scale = (args.scale or "").upper()
    if scale in cfgmod.REFERENCE_PARAMS:
        ref = cfgmod.REFERENCE_PARAMS[scale]
        print(f"\n[reference totals, scale {scale}]")
        print(f"parameters {ref / 1e6:.1f}M (this build {total / 1e6:.2f}M, ratio {total / ref:.3f})")
        if scale in cfgmod.REFERENCE_GFLOPS:
            gref = cfgmod.REFERENCE_GFLOPS[scale]
            print(f"GFLOPs {gref:.1f} (this estimate {flops.gflops:.1f}, ratio {flops.gflops / gref:.3f})")
    if args.csv:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "name", "value"])
            for key, value in rows.items():
                w.writerow(["params", key, value])
            w.writerow(["params", "total", total])
            for key, value in flops.parts.items():
                w.writerow(["flops", key, value])
            w.writerow(["flops", "total", flops.total])
        print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    rows = run_suite(max_model_coords=args.coords, seed=args.seed or 0)
    ok = True
    for name, err, tol in rows:
        passed = err < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<18} rel.err {err:.2e}  (tol {tol:.0e})")
    return 0 if ok else 1


def cmd_selftest(args) -> int:
    from . import selftest

    return 0 if selftest.run() else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (training, init, sampling)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    common.add_argument("--precision", choices=sorted(PRECISIONS), default="32", help="float width")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="unest", description="Hierarchical 3D transformer segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model from a config file")
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--scale", choices=["S", "B", "L", "micro"], help="base architecture before config keys")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--data-dir", help="directory with images/ and labels/ subfolders; synthetic data if omitted")
    t.add_argument("--fold", type=int, help="hold out this fold (0-4) of a five-fold split")
    t.add_argument("--hu-window", type=_floats, help="intensity window lo,hi applied to images")
    t.add_argument("--spacing", type=_floats, help="resample to this spacing (mm) before training")
    t.add_argument("--init", help="checkpoint to fine-tune from")
    t.add_argument("--lr", type=float, help="peak learning rate")
    t.add_argument("--steps", type=int, help="total optimizer steps")
    t.add_argument("--warmup", type=int, help="warm-up steps")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--classes", type=int)
    t.add_argument("--window", type=_triple)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="sliding-window (ensemble) inference")
    i.add_argument("--checkpoint", action="append", required=True, help="repeat for an ensemble")
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True, help="label volume (.nii, .nii.gz or .raw)")
    i.add_argument("--window", type=_triple)
    i.add_argument("--overlap", type=float, default=0.5)
    i.add_argument("--batch-size", type=int, default=1)
    i.add_argument("--config", help="expected model config; checkpoints that do not fit are rejected")
    i.add_argument("--set", action="append", metavar="KEY=VALUE")
    i.add_argument("--hu-window", type=_floats)
    i.add_argument("--probs-dir", help="also write one probability volume per class here")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="segmentation metrics and cohort statistics")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--true-dir", required=True)
    e.add_argument("--classes", required=True, help="e.g. 1-3 or 1,4,7")
    e.add_argument("--out", required=True, help="report directory (CSV and PNG)")
    e.add_argument("--max-class-figures", type=int, default=16)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", parents=[common], help="config, parameter and FLOP report")
    s.add_argument("--scale", choices=["S", "B", "L", "s", "b", "l", "micro"])
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--window", type=_triple)
    s.add_argument("--depth", type=int, default=2, help="name components per parameter group")
    s.add_argument("--csv", help="also write the report as CSV")
    s.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--coords", type=int, default=6, help="probed coordinates per model parameter")
    g.set_defaults(func=cmd_gradcheck)

    st = sub.add_parser("selftest", parents=[common], help="deterministic property suite")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    with ExitStack() as stack:
        if args.threads:
            from threadpoolctl import threadpool_limits

            stack.enter_context(threadpool_limits(limits=args.threads))
        dtype = np.float64 if args.command == "gradcheck" else PRECISIONS[args.precision]
        stack.enter_context(default_dtype(dtype))
        try:
            return int(args.func(args))
        except (UsageError, GeometryError, FileNotFoundError, ValueError, KeyError) as exc:
            print(f"unest {args.command}: error: {exc}", file=sys.stderr)
            return 2


if __name__ == "__main__":
    sys.exit(main())
