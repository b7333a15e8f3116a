"""Subject/dataset/graph/checkpoint file formats and the synthetic generator.

Every file is JSON with a ``schema_version`` and ``kind`` field.  Floats are
written with ``repr`` precision, so save -> load is exact.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gat import ModelConfig, ModelParams, init_params
from .graph import BrainGraph, build_graph
from .numeric import ConfigError, RngStream

SCHEMA_VERSION = 1


class FormatError(ValueError):
    """A file is malformed; the message names the path and the field."""


class ValidationError(ValueError):
    """A file parses but its contents are inconsistent."""


@dataclass
class SubjectRecord:
    id: str
    label: int | None
    time_series: np.ndarray
    node_features: np.ndarray
    feature_names: list[str]

    def __post_init__(self) -> None:
        self.time_series = np.asarray(self.time_series, dtype=np.float64)
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        if self.time_series.ndim != 2 or self.node_features.ndim != 2:
            raise ValidationError(f"subject {self.id}: time_series and node_features must be 2-D")
        if self.time_series.shape[0] != self.node_features.shape[0]:
            raise ValidationError(
                f"subject {self.id}: {self.time_series.shape[0]} time-series regions "
                f"but {self.node_features.shape[0]} node-feature regions"
            )
        if len(self.feature_names) != self.node_features.shape[1]:
            raise ValidationError(
                f"subject {self.id}: {len(self.feature_names)} feature names for "
                f"{self.node_features.shape[1]} feature columns"
            )
        if self.label not in (None, 0, 1):
            raise ValidationError(f"subject {self.id}: label must be 0, 1 or null, got {self.label!r}")

    @property
    def n_regions(self) -> int:
        return self.time_series.shape[0]

    @property
    def n_features(self) -> int:
        return self.node_features.shape[1]

    def to_graph(self, metrics=None) -> BrainGraph:
        kwargs = {} if metrics is None else {"metrics": metrics}
        return build_graph(self.time_series, self.node_features, self.label, self.id,
                           self.feature_names, **kwargs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SubjectRecord):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and self.feature_names == other.feature_names
                and np.array_equal(self.time_series, other.time_series)
                and np.array_equal(self.node_features, other.node_features))


@dataclass
class DatasetManifest:
    name: str
    n_regions: int
    n_features: int
    subjects: list[dict]
    provenance: dict = field(default_factory=dict)
    path: Path | None = None

    def subject_paths(self) -> list[Path]:
        base = self.path.parent if self.path is not None else Path(".")
        return [base / s["path"] for s in self.subjects]


# -- low-level JSON helpers ------------------------------------------------------


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=1, allow_nan=False)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path, kind: str) -> dict:
    path = Path(path)
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: top level must be an object")
    if obj.get("kind") != kind:
        raise FormatError(f"{path}: field 'kind' must be {kind!r}, got {obj.get('kind')!r}")
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema_version {obj.get('schema_version')!r}")
    return obj


def _field(obj: dict, name: str, path):
    if name not in obj:
        raise FormatError(f"{path}: missing field {name!r}")
    return obj[name]


def _matrix(obj: dict, name: str, path) -> np.ndarray:
    raw = _field(obj, name, path)
    try:
        arr = np.array(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: field {name!r} is not a numeric matrix") from exc
    if arr.ndim != 2:
        raise FormatError(f"{path}: field {name!r} must be a 2-D array, got {arr.ndim}-D")
    return arr


# -- subjects --------------------------------------------------------------------


def subject_to_dict(rec: SubjectRecord) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "subject",
        "id": rec.id,
        "label": rec.label,
        "n_regions": rec.n_regions,
        "n_timepoints": rec.time_series.shape[1],
        "n_features": rec.n_features,
        "feature_names": list(rec.feature_names),
        "time_series": rec.time_series.tolist(),
        "node_features": rec.node_features.tolist(),
    }


def save_subject(rec: SubjectRecord, path) -> None:
    write_json_atomic(path, subject_to_dict(rec))


def load_subject(path) -> SubjectRecord:
    obj = read_json(path, "subject")
    ts = _matrix(obj, "time_series", path)
    nf = _matrix(obj, "node_features", path)
    for name, expected in (("n_regions", ts.shape[0]), ("n_timepoints", ts.shape[1]), ("n_features", nf.shape[1])):
        if name in obj and obj[name] != expected:
            raise ValidationError(f"{path}: {name} is {obj[name]} but the data implies {expected}")
    try:
        return SubjectRecord(
            id=str(_field(obj, "id", path)),
            label=obj.get("label"),
            time_series=ts,
            node_features=nf,
            feature_names=list(_field(obj, "feature_names", path)),
        )
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


# -- manifests -------------------------------------------------------------------


def save_manifest(man: DatasetManifest, path) -> None:
    write_json_atomic(path, {
        "schema_version": SCHEMA_VERSION,
        "kind": "manifest",
        "name": man.name,
        "n_regions": man.n_regions,
        "n_features": man.n_features,
        "subjects": man.subjects,
        "provenance": man.provenance,
    })


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    obj = read_json(path, "manifest")
    subjects = _field(obj, "subjects", path)
    if not isinstance(subjects, list) or not all(isinstance(s, dict) and "id" in s and "path" in s for s in subjects):
        raise FormatError(f"{path}: field 'subjects' must be a list of {{id, path}} objects")
    man = DatasetManifest(
        name=str(_field(obj, "name", path)),
        n_regions=int(_field(obj, "n_regions", path)),
        n_features=int(_field(obj, "n_features", path)),
        subjects=subjects,
        provenance=obj.get("provenance", {}),
        path=path,
    )
    for s, p in zip(man.subjects, man.subject_paths()):
        if not p.exists():
            raise ValidationError(f"{path}: subject {s['id']!r} refers to missing file {p}")
    return man


def load_dataset(path) -> tuple[DatasetManifest, list[SubjectRecord]]:
    man = load_manifest(path)
    records = []
    for s, p in zip(man.subjects, man.subject_paths()):
        rec = load_subject(p)
        if rec.id != s["id"]:
            raise ValidationError(f"{man.path}: subject {s['id']!r} file holds id {rec.id!r}")
        if rec.n_regions != man.n_regions or rec.n_features != man.n_features:
            raise ValidationError(
                f"{man.path}: subject {rec.id!r} has N={rec.n_regions}, F={rec.n_features}; "
                f"manifest declares N={man.n_regions}, F={man.n_features}"
            )
        records.append(rec)
    return man, records


# -- brain graphs ------------------------------------------------------------------


def save_graph(g: BrainGraph, path) -> None:
    write_json_atomic(path, {
        "schema_version": SCHEMA_VERSION,
        "kind": "graph",
        "id": g.subject_id,
        "label": g.label,
        "feature_names": list(g.feature_names),
        "X": g.X.tolist(),
        "E": g.E.tolist(),
        "A": g.A.tolist(),
    })


def load_graph(path) -> BrainGraph:
    obj = read_json(path, "graph")
    return BrainGraph(
        X=_matrix(obj, "X", path), E=_matrix(obj, "E", path), A=_matrix(obj, "A", path),
        label=obj.get("label"), subject_id=obj.get("id"), feature_names=list(obj.get("feature_names", [])),
    )


# -- checkpoints -----------------------------------------------------------------


def checkpoint_to_dict(params: ModelParams) -> dict:
    tensors = [{"name": p.name, "shape": list(p.shape), "values": p.value.ravel().tolist()}
               for p in params.parameters()]
    scaler = None
    if params.feature_mean is not None:
        scaler = {"mean": params.feature_mean.tolist(), "std": params.feature_std.tolist()}
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "checkpoint",
        "model_config": params.config.to_dict(),
        "feature_scaler": scaler,
        "params": tensors,
    }


def save_model(params: ModelParams, path) -> None:
    write_json_atomic(path, checkpoint_to_dict(params))


def load_model(path) -> ModelParams:
    obj = read_json(path, "checkpoint")
    try:
        cfg = ModelConfig.from_dict(_field(obj, "model_config", path))
    except TypeError as exc:
        raise FormatError(f"{path}: field 'model_config' is invalid ({exc})") from exc
    params = init_params(cfg, RngStream(0))
    stored = {t["name"]: t for t in _field(obj, "params", path)}
    for p in params.parameters():
        if p.name not in stored:
            raise FormatError(f"{path}: missing parameter tensor {p.name!r}")
        t = stored[p.name]
        shape = tuple(t["shape"])
        if shape != p.shape or len(t["values"]) != p.value.size:
            raise ValidationError(f"{path}: tensor {p.name!r} has shape {shape}, expected {p.shape}")
        p.value = np.array(t["values"], dtype=np.float64).reshape(shape)
        p.zero_grad()
    scaler = obj.get("feature_scaler")
    if scaler is not None:
        params.feature_mean = np.array(scaler["mean"], dtype=np.float64)
        params.feature_std = np.array(scaler["std"], dtype=np.float64)
    return params


# -- synthetic populations -----------------------------------------------------------


@dataclass
class SynthConfig:
    """Two-class population whose only default signal is block connectivity.

    Class-1 subjects share one latent signal per block: each block region's
    series is rho_sig * latent + sqrt(1 - rho_sig^2) * own noise, so marginal
    variances match class 0 and only the correlation structure differs.
    """

    n_subjects: int = 200
    n_regions: int = 20
    n_timepoints: int = 60
    n_features: int = 6
    rho_sig: float = 0.8
    mu_shift: float = 0.0
    noise_std: float = 1.0
    blocks: tuple[tuple[int, int], ...] | None = None
    seed: int = 0
    name: str = "synthetic"

    def resolved_blocks(self) -> tuple[tuple[int, int], ...]:
        if self.blocks is not None:
            return tuple(tuple(b) for b in self.blocks)
        size = max(2, self.n_regions // 4)
        return ((0, size), (size, 2 * size))

    def validate(self) -> None:
        if self.n_subjects < 2 or self.n_regions < 2 or self.n_timepoints < 3 or self.n_features < 1:
            raise ConfigError("need n_subjects >= 2, n_regions >= 2, n_timepoints >= 3, n_features >= 1")
        if not 0.0 <= self.rho_sig <= 1.0:
            raise ConfigError(f"rho_sig must lie in [0, 1], got {self.rho_sig}")
        if self.noise_std <= 0:
            raise ConfigError(f"noise_std must be > 0, got {self.noise_std}")
        used: set[int] = set()
        for start, stop in self.resolved_blocks():
            if not 0 <= start < stop <= self.n_regions:
                raise ConfigError(f"block [{start}, {stop}) lies outside regions 0..{self.n_regions - 1}")
            span = set(range(start, stop))
            if used & span:
                raise ConfigError(f"block [{start}, {stop}) overlaps another block")
            used |= span

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.resolved_blocks()]
        return d


def synth_subject(cfg: SynthConfig, label: int, rng: RngStream, index: int) -> SubjectRecord:
    N, K, F = cfg.n_regions, cfg.n_timepoints, cfg.n_features
    ts = rng.child(0).normal(0.0, 1.0, (N, K))
    if label == 1 and cfg.rho_sig > 0:
        latent = rng.child(1).normal(0.0, 1.0, (len(cfg.resolved_blocks()), K))
        mix = np.sqrt(1.0 - cfg.rho_sig ** 2)
        for b, (start, stop) in enumerate(cfg.resolved_blocks()):
            ts[start:stop] = cfg.rho_sig * latent[b] + mix * ts[start:stop]
    ts *= cfg.noise_std
    X = rng.child(2).normal(0.0, 1.0, (N, F)) + (cfg.mu_shift if label == 1 else 0.0)
    return SubjectRecord(
        id=f"sub-{index:04d}", label=label, time_series=ts, node_features=X,
        feature_names=[f"feat{j}" for j in range(F)],
    )


def synth_records(cfg: SynthConfig) -> list[SubjectRecord]:
    cfg.validate()
    root = RngStream(cfg.seed)
    # alternate labels so any prefix is balanced
    return [synth_subject(cfg, i % 2, root.child(i), i) for i in range(cfg.n_subjects)]


def synth_generate(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write subject files plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    records = synth_records(cfg)
    entries = []
    for rec in records:
        rel = f"subjects/{rec.id}.json"
        save_subject(rec, out_dir / rel)
        entries.append({"id": rec.id, "path": rel, "label": rec.label})
    man = DatasetManifest(
        name=cfg.name, n_regions=cfg.n_regions, n_features=cfg.n_features, subjects=entries,
        provenance={"source": "synthetic", "synth_config": cfg.to_dict()}, path=out_dir / "manifest.json",
    )
    save_manifest(man, out_dir / "manifest.json")
    return man
