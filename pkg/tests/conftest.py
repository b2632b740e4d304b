import json
from pathlib import Path

from uqe.cli import main

SMALL_RUN = {
    "net": {"hidden": [8], "total_iters": 120, "drop_at": 100, "base_lr": 1e-3, "batch_size": 16},
    "ensemble": {"members": 2},
    "crossval": {"k": 2, "seed": 0},
}


def run_pipeline(root: Path, seed: int = 7) -> dict[str, Path]:
    """Synthesize, cross-validate, recalibrate and report with the CLI; return report paths."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL_RUN))
    data = root / "cohort.csv"
    cv = root / "cv"
    preds = cv / "predictions.csv"
    steps = [
        ["synth", "--n", "80", "--dim", "5", "--seed", str(seed), "--missing-rate", "0.1", "--out", str(data)],
        ["crossval", "--config", str(cfg), "--data", str(data), "--out", str(cv), "--jobs", "1"],
        ["evaluate", "--preds", str(preds), "--out", str(root / "agreement.json")],
        ["sparsify", "--preds", str(preds), "--out", str(root / "sparsify")],
        ["calibrate", "--preds", str(preds), "--out", str(root / "calibrate")],
        ["recalibrate", "--preds", str(preds), "--out", str(root / "factors.json")],
        ["report", "--agreement", str(root / "agreement.json"),
         "--sparsification", str(root / "sparsify" / "summary.json"),
         "--calibration", str(root / "calibrate" / "summary.json"),
         "--factors", str(root / "factors.json"), "--out", str(root / "report.json")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise AssertionError(f"uqe {' '.join(argv)} exited with {code}")
    return {
        "report": root / "report.json",
        "agreement_csv": root / "agreement.csv",
        "predictions": preds,
        "factors": root / "factors.json",
    }
