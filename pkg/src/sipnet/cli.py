"""Command-line entry point: ``sipnet <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 failed
numerical check.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, metrics
from .config import PROFILES, ExperimentConfig, load_config, parse_config, preprocess, with_overrides
from .data import (
    Case,
    DataError,
    Dataset,
    FormatError,
    PhantomSpec,
    Volume,
    generate_phantom,
    load_volume,
    resample,
    save_volume,
    write_manifest,
)
from .inference import binarize, export_attention_masks, predict_volume
from .model import Model, is_canonical, shape_trace, layer_table_mismatches
from .tensor import ConfigError
from .trainer import CheckpointError, load_checkpoint, restore, train

log = logging.getLogger("sipnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4


class CheckFailed(Exception):
    pass


def _set_threads(n: int | None):
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_d = {}
    if args.spec:
        try:
            spec_d = json.loads(Path(args.spec).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.spec}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    base = PhantomSpec.from_dict(spec_d)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise DataError(f"cannot write to {out}: {e.strerror}") from None
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    n_val = args.val if args.val is not None else args.count // 4
    n_test = args.test
    if n_val + n_test > args.count:
        raise ConfigError("--val plus --test exceed --count")
    cases = []
    for i in range(args.count):
        spec = PhantomSpec.from_dict({**spec_d, "seed": base.seed + i})
        image, label = generate_phantom(spec)
        name = f"phantom{i:03d}"
        ip, lp = out / f"{name}_image.svol", out / f"{name}_label.svol"
        save_volume(image, ip)
        save_volume(label, lp)
        split = "train" if i < args.count - n_val - n_test else ("val" if i < args.count - n_test else "test")
        cases.append(Case(str(ip), str(lp), split))
    write_manifest(cases, out / "manifest.json")
    print(f"wrote {args.count} phantom pair(s) and {out / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / ablate
# ---------------------------------------------------------------------------


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    profile = cfg.data.profile
    return Dataset.from_manifest(cfg.manifest_path(), lambda im, lb: preprocess(profile, im, lb))


def _run_training(cfg: ExperimentConfig, dataset: Dataset, out: Path, resume=None, quiet=False):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    model = Model(cfg.model, seed=cfg.seed)

    def report(rec):
        if not quiet:
            log.info("epoch %d train_loss %.5f val_loss %.5f val_dsc %.4f", rec["epoch"], rec["train_loss"], rec["val_loss"], rec["val_dsc"])

    result = train(model, dataset, cfg.train, out, resume=resume, callback=report, meta={"experiment": cfg.to_dict()})
    return model, result


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = with_overrides(cfg, train={"epochs": args.epochs})
    dataset = _load_dataset(cfg)
    _, result = _run_training(cfg, dataset, Path(args.out), resume=args.resume)
    print(f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.5f}; outputs in {args.out}")
    return EXIT_OK


def _subset_train(dataset: Dataset, fraction: float) -> Dataset:
    train_idx = dataset.indices("train")
    keep = set(train_idx[: max(1, math.ceil(fraction * len(train_idx)))])
    idx = [i for i in range(len(dataset.images)) if dataset.splits[i] != "train" or i in keep]
    return Dataset(
        [dataset.images[i] for i in idx], [dataset.labels[i] for i in idx],
        [dataset.splits[i] for i in idx], [dataset.names[i] for i in idx],
    )


def _summary_row(name, model, result, extra=None) -> dict:
    last = result.log[-1] if result.log else {}
    row = {"run": name, "num_params": model.num_parameters()}
    row.update(extra or {})
    row.update(
        final_train_loss=last.get("train_loss", math.nan),
        best_val_loss=result.best_val_loss,
        best_epoch=result.best_epoch,
        final_val_dsc=last.get("val_dsc", math.nan),
    )
    return row


def _write_rows(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = with_overrides(cfg, train={"epochs": args.epochs})
    dataset = _load_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for variant in ("D", "DR", "DRL", "SIP"):
        c = with_overrides(cfg, model={"variant": variant})
        model, res = _run_training(c, dataset, out / f"variant_{variant}")
        rows.append(_summary_row(variant, model, res, {"variant": variant}))
    _write_rows(out / "variants.csv", rows)

    if args.batch_sweep:
        rows = []
        for b in (1, 2, 3, 4):
            c = with_overrides(cfg, model={"variant": "SIP"}, train={"batch_size": b})
            model, res = _run_training(c, dataset, out / f"batch_{b}")
            rows.append(_summary_row(f"batch_{b}", model, res, {"batch_size": b}))
        _write_rows(out / "batch_size.csv", rows)

    if args.fraction_sweep:
        rows = []
        for pct in (40, 50, 60, 70, 80):
            c = with_overrides(cfg, model={"variant": "SIP"})
            model, res = _run_training(c, _subset_train(dataset, pct / 100), out / f"fraction_{pct}")
            rows.append(_summary_row(f"fraction_{pct}", model, res, {"train_percent": pct}))
        _write_rows(out / "train_fraction.csv", rows)
    print(f"ablation results in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def _case_name(path: Path) -> str:
    stem = path.name.removesuffix(".svol")
    for suffix in ("_image", "_label", "_mask", "_pred", "_prob"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def _back_to_grid(arr: np.ndarray, spacing, original: Volume) -> np.ndarray:
    """Resample a probability map to the original grid (extents matched exactly)."""
    back = resample(Volume(arr.astype(np.float32), spacing, "image"), original.spacing).voxels
    back = back[tuple(slice(0, n) for n in original.shape)]
    # extents can differ by one voxel through rounding: edge-extend the rim
    pads = [(0, o - b) for o, b in zip(original.shape, back.shape)]
    return np.pad(back, pads, mode="edge") if any(p for _, p in pads) else back


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    exp = ckpt.meta.get("experiment")
    cfg = parse_config(exp) if exp else ExperimentConfig()
    model, _ = restore(ckpt)
    original = load_volume(args.volume)
    if original.kind != "image":
        raise DataError(f"{args.volume} is a label volume, expected an image")
    profile = cfg.data.profile
    image, _ = preprocess(profile, original)
    patch = tuple(args.patch) if args.patch else cfg.patch
    stride = tuple(args.stride) if args.stride else cfg.stride
    threshold = args.threshold if args.threshold is not None else cfg.infer.threshold
    if args.export_attention and not model.config.has_attention:
        raise ConfigError(f"variant {model.config.variant} has no attention modules; --export-attention needs SIP")

    prob = predict_volume(model, image, patch, stride).prob
    if image.shape != original.shape:
        prob = _back_to_grid(prob, image.spacing, original)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = _case_name(Path(args.volume))
    save_volume(Volume(prob.astype(np.float32), original.spacing, "image"), out / f"{name}_prob.svol")
    save_volume(binarize(prob, threshold, original.spacing), out / f"{name}_mask.svol")
    if args.export_attention:
        export_attention_masks(model, image, patch, stride, out / f"{name}_attention")
    print(f"wrote {name}_prob.svol and {name}_mask.svol to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _label_files(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    found = {}
    for p in sorted(d.glob("*.svol")):
        if p.name.endswith(("_prob.svol", "_image.svol")):
            continue
        found[_case_name(p)] = p
    return found


def cmd_eval(args) -> int:
    preds = _label_files(Path(args.pred_dir))
    gts = _label_files(Path(args.gt_dir))
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if missing_gt:
        raise DataError(f"no ground truth for case(s): {', '.join(missing_gt)}")
    if missing_pred:
        raise DataError(f"no prediction for case(s): {', '.join(missing_pred)}")
    reports = {}
    for case in sorted(gts):
        p, g = load_volume(preds[case]), load_volume(gts[case])
        if p.kind != "label" or g.kind != "label":
            raise DataError(f"case {case}: both volumes must be label volumes")
        if p.shape != g.shape:
            raise DataError(f"case {case}: prediction {p.shape} vs ground truth {g.shape}")
        reports[case] = metrics.evaluate_case(p, g, g.spacing)
    out = Path(args.out)
    metrics.write_report_csv(out, reports)
    agg = metrics.aggregate(reports)
    agg_path = out.with_name(out.stem + "_aggregate.csv")
    with open(agg_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["region", "metric", "mean", "std", "n"])
        for (region, key), (m, s, n) in agg.items():
            w.writerow([region, key, repr(m), repr(s), n])
    print(metrics.format_table(reports))
    return EXIT_OK


# ---------------------------------------------------------------------------
# summary / gradcheck
# ---------------------------------------------------------------------------


def cmd_summary(args) -> int:
    cfg = load_config(args.config) if args.config else parse_config({"data": {"profile": "prostate"}})
    mc = cfg.model
    shape = (1, 1) + tuple(mc.input_patch)
    trace = shape_trace(mc, shape)
    for name, s in trace:
        print(f"{name:<18}{str(list(s))}")
    n = Model(mc).num_parameters()
    print(f"parameters: {n:,}")
    if not is_canonical(mc) or shape != (1, 1, 16, 96, 96):
        print("notice: non-canonical configuration, reference table check skipped")
        return EXIT_OK
    bad = layer_table_mismatches(trace)
    if bad:
        for b in bad:
            print(f"MISMATCH {b}")
        raise CheckFailed(f"{len(bad)} row(s) deviate from the reference table")
    print("reference table: all rows match")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = []
    if args.scope == "ops":
        results = [(n, e, gradcheck.OPS_TOL) for n, e in gradcheck.run_ops()]
    elif args.scope == "blocks":
        results = [(n, e, gradcheck.OPS_TOL) for n, e in gradcheck.run_blocks()]
    else:
        for v in ("SIP", "D"):
            results.append((f"model_{v}_16cube", gradcheck.run_model(v), gradcheck.MODEL_TOL))
    worst_ok = True
    for name, err, tol in results:
        ok = err < tol
        worst_ok &= ok
        print(f"{name:<32}{err:.3e}  {'ok' if ok else 'FAIL'} (tol {tol:g})")
    if not worst_ok:
        raise CheckFailed("gradient check tolerance exceeded")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sipnet", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap worker / BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic phantom volumes and a manifest")
    s.add_argument("--spec", help="JSON phantom spec (defaults otherwise)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--val", type=int, default=None, help="validation cases (default count // 4)")
    s.add_argument("--test", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model from an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="sliding-window prediction for one volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--patch", type=int, nargs="+")
    s.add_argument("--stride", type=int, nargs="+")
    s.add_argument("--export-attention", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="metrics for a directory of predictions")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="variant grid and optional sweeps")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-sweep", action="store_true")
    s.add_argument("--fraction-sweep", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("summary", help="layer shapes and parameter count")
    s.add_argument("--config")
    s.set_defaults(func=cmd_summary)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--scope", choices=("ops", "blocks", "model"), default="ops")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    _set_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailed as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
