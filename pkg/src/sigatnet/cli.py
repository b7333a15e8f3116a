"""Command-line interface: ``sigatnet synth|build-graph|train|eval|ablate|gradcheck``."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import click
import numpy as np

from . import checks
from .data import (
    FormatError,
    SynthConfig,
    ValidationError,
    load_dataset,
    load_model,
    save_graph,
    save_model,
    synth_generate,
    write_json_atomic,
)
from .gat import ModelConfig
from .graph import EDGE_METRICS, DegenerateSeriesError
from .numeric import ConfigError, EvaluationError, RngStream, ShapeError
from .reports import format_summary, write_ablation, write_cv_report
from .training import SCORES, TrainConfig, ablation_grid, ablation_sweep, evaluate, kfold_cv, train_model

log = logging.getLogger("sigatnet")

USER_ERRORS = (
    FormatError, ValidationError, ConfigError, ShapeError, DegenerateSeriesError,
    EvaluationError, FileNotFoundError, ValueError,
)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: top level must be an object")
    unknown = set(cfg) - {"synth", "train", "model", "ablate"}
    if unknown:
        raise FormatError(f"{path}: unknown section(s) {sorted(unknown)}")
    return cfg


def _merge(cls, section: dict, overrides: dict, **fixed):
    """Dataclass from defaults <- config-file section <- explicit CLI flags."""
    allowed = {f.name for f in fields(cls)}
    bad = set(section) - allowed
    if bad:
        raise FormatError(f"unknown {cls.__name__} field(s) {sorted(bad)}")
    values = {**section, **{k: v for k, v in overrides.items() if v is not None}, **fixed}
    return cls(**values)


def common_options(fn):
    fn = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                      help="Output directory.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="JSON file with synth/train/model/ablate sections.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Base random seed.")(fn)
    return fn


def model_options(fn):
    for opt in reversed([
        click.option("--heads", type=int, default=None, help="Attention heads per layer."),
        click.option("--xi", type=float, default=None, help="Sparsity threshold in [0, 1]."),
        click.option("--edge-features/--no-edge-features", "edge_features_enabled", default=None),
        click.option("--sparse/--no-sparse", "sparse_interaction_enabled", default=None),
        click.option("--epochs", type=int, default=None),
        click.option("--folds", type=int, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--learning-rate", type=float, default=None),
    ]):
        fn = opt(fn)
    return fn


def _configs(config_path, seed, n_features, kw) -> tuple[TrainConfig, ModelConfig]:
    cfg = _load_config(config_path)
    train = _merge(TrainConfig, cfg.get("train", {}), {
        "seed": seed, "epochs": kw.pop("epochs"), "folds": kw.pop("folds"),
        "batch_size": kw.pop("batch_size"), "learning_rate": kw.pop("learning_rate"),
    })
    model = _merge(ModelConfig, cfg.get("model", {}), kw, n_features=n_features)
    return train, model


def _graphs(records, metrics=None):
    return [r.to_graph(metrics) for r in records]


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Sparse-interaction graph attention classifier for brain graphs."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@common_options
@click.option("--n-subjects", type=int, default=None)
@click.option("--n-regions", type=int, default=None)
@click.option("--n-timepoints", type=int, default=None)
@click.option("--n-features", type=int, default=None)
@click.option("--rho-sig", type=float, default=None, help="Within-block latent mixing weight for class 1.")
@click.option("--mu-shift", type=float, default=None, help="Class-1 node-feature mean shift.")
@click.option("--noise-std", type=float, default=None)
@click.option("--name", default=None)
def synth(seed, config_path, out, **kw):
    """Generate a synthetic two-class dataset (subjects + manifest.json)."""
    cfg = _merge(SynthConfig, _load_config(config_path).get("synth", {}), {"seed": seed, **kw})
    out = Path(out or "synthetic")
    man = synth_generate(cfg, out)
    click.echo(f"wrote {len(man.subjects)} subjects to {out / 'manifest.json'}")


@main.command("build-graph")
@click.argument("manifest", type=click.Path(dir_okay=False))
@common_options
@click.option("--metrics", default=",".join(EDGE_METRICS), show_default=True,
              help="Comma-separated edge metrics to fuse.")
def build_graph_cmd(manifest, seed, config_path, out, metrics):
    """Build and cache one brain graph per subject; print edge-matrix summaries."""
    man, records = load_dataset(manifest)
    chosen = tuple(m.strip() for m in metrics.split(",") if m.strip())
    out = Path(out or Path(manifest).parent / "graphs")
    rows = []
    for rec in records:
        g = rec.to_graph(chosen)
        if not (np.array_equal(g.E, g.E.T) and not np.diag(g.E).any()):
            raise ValidationError(f"subject {rec.id}: edge matrix is not symmetric with zero diagonal")
        save_graph(g, out / f"{rec.id}.json")
        off = g.E[~np.eye(g.n_regions, dtype=bool)]
        rows.append((rec.id, rec.label, off.mean(), off.std(), off.min(), off.max()))
    click.echo("subject\tlabel\tE_mean\tE_std\tE_min\tE_max")
    for sid, label, *stats in rows:
        click.echo(f"{sid}\t{label}\t" + "\t".join(f"{s:.4f}" for s in stats))
    click.echo(f"wrote {len(rows)} graphs to {out} (all symmetric, zero diagonal)")


@main.command()
@click.argument("manifest", type=click.Path(dir_okay=False))
@common_options
@model_options
@click.option("--cv/--no-cv", default=True, help="Run k-fold cross-validation before the final fit.")
def train(manifest, seed, config_path, out, cv, **kw):
    """K-fold evaluation, then a final fit on every subject saved as checkpoint.json."""
    man, records = load_dataset(manifest)
    tcfg, mcfg = _configs(config_path, seed, man.n_features, kw)
    graphs = _graphs(records)
    out = Path(out or "run")
    if cv:
        result = kfold_cv(graphs, tcfg, mcfg)
        for f in result.folds:
            click.echo(f"fold {f.fold}: " + "  ".join(f"{k.upper()} {getattr(f.metrics, k):.3f}" for k in SCORES))
        click.echo("mean: " + format_summary(result.summary))
        write_cv_report(result, out, tcfg.to_dict(), mcfg.to_dict())
    final = train_model(graphs, tcfg, mcfg, RngStream(tcfg.seed, (9999,)))
    save_model(final.params, out / "checkpoint.json")
    write_json_atomic(out / "train_loss.json", {"loss_trace": final.loss_trace})
    click.echo(f"checkpoint written to {out / 'checkpoint.json'}")


@main.command("eval")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.argument("manifest", type=click.Path(dir_okay=False))
@common_options
def eval_cmd(checkpoint, manifest, seed, config_path, out):
    """Score a checkpoint on every labelled subject of a manifest."""
    params = load_model(checkpoint)
    man, records = load_dataset(manifest)
    graphs = [g for g in _graphs(records) if g.label is not None]
    if not graphs:
        raise ValidationError(f"{manifest}: no labelled subjects to evaluate")
    m = evaluate(graphs, params)
    click.echo("  ".join(f"{k.upper()} {getattr(m, k):.4f}" for k in SCORES)
               + f"  (tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn})")
    if out:
        write_json_atomic(Path(out) / "metrics.json", m.to_dict())


def _floats(text):
    return tuple(float(t) for t in text.split(",")) if text else None


def _ints(text):
    return tuple(int(t) for t in text.split(",")) if text else None


@main.command()
@click.argument("manifest", type=click.Path(dir_okay=False))
@common_options
@click.option("--xi", "xi_grid", default=None, help="Comma-separated xi values, e.g. 0,0.3,0.5,0.7,1.")
@click.option("--heads", "heads_grid", default=None, help="Comma-separated head counts, e.g. 1,2,3,4,5.")
@click.option("--edges", "edges_grid", default=None, help="Comma-separated on/off.")
@click.option("--metrics", "metrics_grid", default=None,
              help="Semicolon-separated metric sets, e.g. 'pearson;pearson,spearman'.")
@click.option("--features", "features_grid", default=None,
              help="Semicolon-separated node-feature column lists, e.g. '0,1,2;3,4,5'.")
@click.option("--epochs", type=int, default=None)
@click.option("--folds", type=int, default=None)
def ablate(manifest, seed, config_path, out, xi_grid, heads_grid, edges_grid, metrics_grid, features_grid,
           epochs, folds):
    """Cross-validate every point of an ablation grid into one table."""
    cfg = _load_config(config_path)
    man, records = load_dataset(manifest)
    tcfg = _merge(TrainConfig, cfg.get("train", {}), {"seed": seed, "epochs": epochs, "folds": folds})
    mcfg = _merge(ModelConfig, cfg.get("model", {}), {}, n_features=man.n_features)
    grid_cfg = cfg.get("ablate", {})
    xi = _floats(xi_grid) or tuple(grid_cfg.get("xi", [mcfg.xi]))
    heads = _ints(heads_grid) or tuple(grid_cfg.get("heads", [mcfg.heads]))
    edge_words = edges_grid.split(",") if edges_grid else grid_cfg.get("edges", ["on"])
    if any(w not in ("on", "off") for w in edge_words):
        raise click.BadParameter(f"expected on/off values, got {edge_words}", param_hint="--edges")
    edges = tuple(w == "on" for w in edge_words)
    metric_sets = (tuple(tuple(m.split(",")) for m in metrics_grid.split(";"))
                   if metrics_grid else tuple(tuple(m) if m else None for m in grid_cfg.get("metrics", [None])))
    feature_sets = (tuple(_ints(f) for f in features_grid.split(";"))
                    if features_grid else tuple(tuple(f) if f else None for f in grid_cfg.get("features", [None])))
    grid = ablation_grid(xi, heads, edges, metric_sets, feature_sets)
    rows = ablation_sweep(lambda metrics: _graphs(records, metrics), grid, tcfg, mcfg)
    for row in rows:
        click.echo(f"{row['grid_point']}: " + "  ".join(
            f"{k.upper()} {row[k + '_mean']:.3f} ± {row[k + '_std']:.3f}" for k in SCORES))
    write_ablation(rows, Path(out or "ablation"))


@main.command()
@common_options
def gradcheck(seed, config_path, out):
    """Finite-difference check of every backward rule; exit 1 if any exceeds 1e-4."""
    results = checks.run_all(seed or 0)
    worst = 0.0
    for r in results:
        worst = max(worst, r.max_rel_error)
        click.echo(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<36} max rel err {r.max_rel_error:.3e}  ({r.seconds:.2f}s)")
    click.echo(f"overall max rel err {worst:.3e} (tolerance {checks.TOLERANCE:.0e})")
    if out:
        write_json_atomic(Path(out) / "gradcheck.json",
                          {"results": [{"name": r.name, "max_rel_error": r.max_rel_error} for r in results]})
    if worst > checks.TOLERANCE:
        sys.exit(1)


def run(argv=None) -> int:
    """Entry point returning an exit code instead of raising."""
    try:
        main.main(args=argv, prog_name="sigatnet", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except USER_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


def cli_main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    cli_main()
