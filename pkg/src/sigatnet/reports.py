"""CSV/JSON writers for fold summaries and ablation tables."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .data import write_json_atomic
from .training import SCORES, CVResult


def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def folds_csv(cv: CVResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", *SCORES, "tp", "fp", "tn", "fn"])
    for f in cv.folds:
        m = f.metrics
        w.writerow([f.fold, *(repr(getattr(m, k)) for k in SCORES), m.tp, m.fp, m.tn, m.fn])
    for stat in ("mean", "std"):
        w.writerow([stat, *(repr(cv.summary[k][stat]) for k in SCORES), "", "", "", ""])
    return buf.getvalue()


def cv_report(cv: CVResult, train_cfg: dict, model_cfg: dict) -> dict:
    return {
        "train_config": train_cfg,
        "model_config": model_cfg,
        "folds": [f.to_dict() for f in cv.folds],
        "summary": cv.summary,
    }


def write_cv_report(cv: CVResult, out_dir, train_cfg: dict, model_cfg: dict) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path = out_dir / "folds.csv"
    json_path = out_dir / "folds.json"
    _write_text_atomic(csv_path, folds_csv(cv))
    write_json_atomic(json_path, cv_report(cv, train_cfg, model_cfg))
    return csv_path, json_path


ABLATION_COLUMNS = ["grid_point", "xi", "heads", "edge_features", "edge_metrics", "feature_mask"] + [
    f"{k}_{s}" for k in SCORES for s in ("mean", "std")
]


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for row in rows:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in ABLATION_COLUMNS])
    return buf.getvalue()


def write_ablation(rows: list[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path = out_dir / "ablation.csv"
    json_path = out_dir / "ablation.json"
    _write_text_atomic(csv_path, ablation_csv(rows))
    write_json_atomic(json_path, {"rows": rows})
    return csv_path, json_path


def format_summary(summary: dict) -> str:
    return "  ".join(f"{k.upper()} {summary[k]['mean']:.3f} ± {summary[k]['std']:.3f}" for k in SCORES)
