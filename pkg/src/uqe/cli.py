"""Command-line entry point: ``uqe <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .datamodel import DataError, export_csv, ingest_csv
from .ensemble import (EnsembleBundle, PredictionTable, fit_recalibration, jensen_violations,
                       predict, run_cross_validation, train_ensemble)
from .metrics import agreement_report, mae
from .uncertainty import (calibration_curve, oracle_curve, sparsification_curve,
                          sparsification_error_area)
from .volume import format_subject, read_raw3d, select_slices

log = logging.getLogger("uqe")

SPARSIFY_REPORT_FRACTIONS = (0.1, 0.2, 0.3, 0.5)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("UQE_JOBS", "1")))
    except ValueError:
        return 1


def _load_preds(args) -> PredictionTable:
    table = PredictionTable.read_csv(args.preds)
    if getattr(args, "data", None):
        data = ingest_csv(args.data)
        row = {s: i for i, s in enumerate(data.ids)}
        missing = [s for s in table.ids if s not in row]
        if missing:
            raise DataError(f"{len(missing)} predicted subjects missing from {args.data}")
        col = [data.target_names.index(n) for n in table.target_names]
        table.reference = data.targets[np.array([row[s] for s in table.ids])][:, col]
    if table.reference is None or np.all(np.isnan(table.reference)):
        raise DataError("predictions carry no reference values; pass --data")
    return table


def _present(table: PredictionTable, t: int):
    keep = ~np.isnan(table.reference[:, t])
    return keep


# ------------------------------------------------------------------ subcommands


def cmd_synth(args) -> None:
    cfg = RunConfig.load(args.config)
    rates = None
    if args.missing_rate is not None:
        parts = [float(v) for v in args.missing_rate.split(",")]
        rates = parts[0] if len(parts) == 1 else tuple(parts)
    synth = cfg.synth_config(n_subjects=args.n, feature_dim=args.dim, seed=args.seed,
                             noise_floor=args.noise_floor, noise_slope=args.noise_slope,
                             missing_rate=rates, artifact_rate=args.artifact_rate)
    from .synthgen import generate

    data, truth = generate(synth)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_csv(data, out)
    truth_path = Path(args.truth) if args.truth else out.with_name(out.stem + "_truth.csv")
    truth.write_csv(truth_path)
    _dump({"synth": synth.to_dict(), "artifact_ids": [s for s, a in zip(truth.ids, truth.artifact) if a]},
          out.with_name(out.stem + ".config.json"))


def cmd_format(args) -> None:
    water = read_raw3d(args.water, "water")
    fat = read_raw3d(args.fat, "fat")
    ci, si = args.coronal, args.sagittal
    if ci is None or si is None:
        auto_c, auto_s = select_slices(water, fat)
        ci = auto_c if ci is None else ci
        si = auto_s if si is None else si
    image = format_subject(water, fat, ci, si, (args.width, args.height))
    sidecar = image.save(args.out)
    meta = json.loads(sidecar.read_text())
    meta.update(coronal_index=ci, sagittal_index=si)
    _dump(meta, sidecar)


def cmd_train(args) -> None:
    cfg = RunConfig.load(args.config)
    data = ingest_csv(args.data)
    ens = cfg.ensemble_config(data.feature_dim, args.seed)
    bundle = train_ensemble(ens, data, args.jobs)
    if args.factors:
        bundle = bundle.with_factors(json.loads(Path(args.factors).read_text())["factors"])
    out = Path(args.out)
    bundle.save(out)
    _dump(cfg.resolved(data.feature_dim, args.seed), out / "config.json")


def cmd_predict(args) -> None:
    bundle = EnsembleBundle.load(args.bundle)
    if args.factors:
        bundle = bundle.with_factors(json.loads(Path(args.factors).read_text())["factors"])
    table = predict(bundle, ingest_csv(args.data))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(args.out, include_members=not args.no_members)


def cmd_crossval(args) -> None:
    cfg = RunConfig.load(args.config)
    data = ingest_csv(args.data)
    ens = cfg.ensemble_config(data.feature_dim, args.seed)
    k = args.k if args.k is not None else cfg.crossval["k"]
    cv_seed = cfg.crossval["seed"]
    result = run_cross_validation(ens, data, k, cv_seed, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.merged.write_csv(out / "predictions.csv")
    for f, (bundle, table) in enumerate(zip(result.bundles, result.fold_predictions)):
        bundle.save(out / f"fold_{f:02d}")
        table.write_csv(out / f"fold_{f:02d}" / "predictions.csv")
    _dump(result.folds.to_dict(), out / "folds.json")
    resolved = cfg.resolved(data.feature_dim, args.seed)
    resolved["crossval"]["k"] = k
    _dump(resolved, out / "config.json")


def cmd_evaluate(args) -> None:
    table = _load_preds(args)
    report = agreement_report(table.mean, table.reference, table.target_names)
    out = Path(args.out)
    payload = report.to_dict()
    if table.member_means is not None:
        payload["jensen_violations"] = jensen_violations(table)
        payload["member_mae"] = {
            name: [mae(table.member_means[m, _present(table, t), t], table.reference[_present(table, t), t])
                   for m in range(table.member_means.shape[0])]
            for t, name in enumerate(table.target_names) if np.any(_present(table, t))}
    _dump(payload, out)
    report.write_csv(out.with_suffix(".csv"))


def cmd_sparsify(args) -> None:
    table = _load_preds(args)
    baseline = PredictionTable.read_csv(args.baseline) if args.baseline else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for t, name in enumerate(table.target_names):
        keep = _present(table, t)
        if np.count_nonzero(keep) < 2:
            continue
        err = np.abs(table.reference[keep, t] - table.mean[keep, t])
        base = None
        if baseline is not None:
            base_mean = baseline.mean[:, baseline.target_names.index(name)]
            row = {s: i for i, s in enumerate(baseline.ids)}
            base_err = np.abs(table.reference[keep, t]
                              - base_mean[[row[s] for s, k in zip(table.ids, keep) if k]])
            base = float(base_err.mean())
        curve = sparsification_curve(err, table.variance[keep, t], args.steps, baseline_mae=base)
        oracle = oracle_curve(err, args.steps, baseline_mae=base)
        curve.write_csv(out / f"{name}_sparsification.csv")
        oracle.write_csv(out / f"{name}_oracle.csv")
        full = float(curve.y[0])
        at = {f"{int(round(100 * fr))}%": float(curve.y[min(len(curve.x) - 1,
                                                            int(np.searchsorted(curve.x, fr - 1e-12)))])
              for fr in SPARSIFY_REPORT_FRACTIONS}
        summary[name] = {
            "mae": full,
            "mae_at_exclusion": at,
            "mae_reduction_pct": {k: 100.0 * (1.0 - v / full) if full > 0 else 0.0 for k, v in at.items()},
            "mae_reduction_vs_baseline_pct": None if base is None else 100.0 * curve.summary,
            "sparsification_error_area": sparsification_error_area(curve, oracle),
            "sparsification": curve.to_dict(),
            "oracle": oracle.to_dict(),
        }
    _dump({"kind": "sparsification", "targets": summary}, out / "summary.json")


def _calibration_summary(table: PredictionTable, recal: bool):
    out = {}
    for t, name in enumerate(table.target_names):
        keep = _present(table, t)
        if not np.any(keep):
            continue
        resid = table.reference[keep, t] - table.mean[keep, t]
        var = table.variance_recal if recal else table.variance
        curve = calibration_curve(resid, np.sqrt(var[keep, t]))
        out[name] = {"auce": curve.summary, "calibration": curve.to_dict()}
    return out


def cmd_calibrate(args) -> None:
    table = _load_preds(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = _calibration_summary(table, args.recalibrated)
    for name, entry in summary.items():
        c = entry["calibration"]
        with (out / f"{name}_calibration.csv").open("w", encoding="utf-8") as fh:
            fh.write("x,y\n")
            for x, y in zip(c["x"], c["y"]):
                fh.write(f"{x!r},{y!r}\n")
    _dump({"kind": "calibration", "recalibrated": args.recalibrated, "targets": summary},
          out / "summary.json")


def cmd_recalibrate(args) -> None:
    table = _load_preds(args)
    factors = fit_recalibration(table, args.exponent)
    before = _calibration_summary(table, recal=False)
    table.variance_recal = table.variance * factors ** args.exponent
    after = _calibration_summary(table, recal=True)
    _dump({"targets": list(table.target_names), "factors": factors.tolist(),
           "factor_exponent": args.exponent,
           "auce_before": {k: v["auce"] for k, v in before.items()},
           "auce_after": {k: v["auce"] for k, v in after.items()}}, Path(args.out))


def cmd_report(args) -> None:
    merged = {"agreement": json.loads(Path(args.agreement).read_text())}
    for key, path in (("sparsification", args.sparsification), ("calibration", args.calibration),
                      ("recalibration", args.factors)):
        if path:
            merged[key] = json.loads(Path(path).read_text())
    _dump(merged, Path(args.out))


# ------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uqe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="generate a synthetic heteroscedastic cohort")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-floor", type=float)
    p.add_argument("--noise-slope", type=float)
    p.add_argument("--missing-rate", help="one rate or six comma-separated rates")
    p.add_argument("--artifact-rate", type=float)
    p.add_argument("--truth", help="ground-truth CSV (default: <out>_truth.csv)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("format", help="format water/fat RAW3D volumes into an 8-bit image")
    p.add_argument("--water", required=True)
    p.add_argument("--fat", required=True)
    p.add_argument("--coronal", type=int)
    p.add_argument("--sagittal", type=int)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_format)

    for name, func, help_ in (("train", cmd_train, "train an ensemble bundle"),
                              ("crossval", cmd_crossval, "k-fold cross-validation")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, help="base network seed")
        p.add_argument("--jobs", type=int, default=_default_jobs())
        if name == "train":
            p.add_argument("--factors", help="recalibration factors JSON")
        else:
            p.add_argument("--k", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="batch inference with a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--factors")
    p.add_argument("--no-members", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    for name, func, help_ in (("evaluate", cmd_evaluate, "agreement metrics"),
                              ("sparsify", cmd_sparsify, "sparsification and oracle curves"),
                              ("calibrate", cmd_calibrate, "calibration curves and AUCE"),
                              ("recalibrate", cmd_recalibrate, "fit target-wise scaling factors")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--preds", required=True)
        p.add_argument("--data", help="dataset CSV supplying references")
        p.add_argument("--out", required=True)
        if name == "sparsify":
            p.add_argument("--steps", type=int)
            p.add_argument("--baseline", help="baseline predictions CSV for MAE reduction")
        if name == "calibrate":
            p.add_argument("--recalibrated", action="store_true", help="use recalibrated variances")
        if name == "recalibrate":
            p.add_argument("--exponent", type=float, default=2.0,
                           help="variance_recal = variance * factor**exponent")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="merge agreement and curve summaries into one JSON")
    p.add_argument("--agreement", required=True)
    p.add_argument("--sparsification")
    p.add_argument("--calibration")
    p.add_argument("--factors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"uqe {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError, OSError, KeyError) as exc:
        print(f"uqe {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
