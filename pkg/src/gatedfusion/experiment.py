"""Batch pipeline behind the command line: extract, reframe, synth, run.

``run_experiment`` trains and scores the selected model configurations on a
shared stratified split and writes, into the output directory::

    report_<ablation>.json     headline metrics, confusion, reliability bins
    roc_<ablation>.csv         x=FPR, y=TPR
    pr_<ablation>.csv          x=recall, y=precision
    reliability_<ablation>.csv
    mdi_rf_concat.csv          when rf_concat is selected
    table1.csv / table1.json   one row per ablation, six metric columns
    manifest.json              resolved config, seeds, input checksums, versions

Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
import platform
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .data import (
    Dataset,
    concat_features,
    generate_synthetic,
    load_dataset,
    reframe_binary,
    stratified_split,
    write_embeddings,
    write_features_csv,
)
from .errors import ConfigError, DataError, FormatError, TrainingError
from .features import (
    AUX_FEATURE_NAMES,
    LyricRecord,
    extract_struct_features,
    fit_scaler,
    transform,
)
from .forest import ForestConfig, fit_forest, mdi_importances, predict_proba_forest
from .metrics import EvalReport, curve_csv, evaluate, reliability_csv
from .sfl import TrainConfig, data_checksum, predict_proba, save_model, train

ABLATIONS = ("sfl_gated", "rf_concat", "rf_lyrics_only", "rf_aux_only")
ABLATION_LABELS = {
    "sfl_gated": "SFL Model (Gated Fusion)",
    "rf_concat": "RF Baseline (Concatenated)",
    "rf_lyrics_only": "Lyrics Only (RF)",
    "rf_aux_only": "Auxiliary Features Only (RF)",
}
METRIC_COLUMNS = ("accuracy", "macro_f1", "mcc", "brier", "log_loss", "ece")

SYNTHETIC_DEFAULTS = {
    "n": 20000,
    "d": 64,
    "separation": 10.0,
    "aux_signal": 2.0,
    "class0_fraction": 0.51861,
}
_TOP_KEYS = {
    "data", "synthetic", "split", "sfl", "forest", "ablations",
    "output_dir", "seed", "evaluation", "save_models",
}
_DATA_KEYS = {"embeddings", "features", "labels", "ids", "dim"}
_SPLIT_KEYS = {"test_fraction", "seed"}
_EVAL_KEYS = {"threshold", "n_bins", "ece_mode"}


def _check_keys(section: str, d, allowed: set) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"'{section}' must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    return dict(d)


@dataclass
class ExperimentConfig:
    output_dir: str
    seed: int = 0
    data: Optional[dict] = None
    synthetic: Optional[dict] = None
    split: dict = field(default_factory=dict)
    sfl: TrainConfig = field(default_factory=TrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    ablations: tuple = ABLATIONS
    evaluation: dict = field(default_factory=dict)
    save_models: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        """Validate a JSON-style dict. Unknown keys anywhere are rejected.

        Sub-seeds (split, sfl, forest, synthetic) default to the global seed.
        """
        raw = _check_keys("config", raw, _TOP_KEYS)
        if "output_dir" not in raw:
            raise ConfigError("'output_dir' is required")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("'seed' must be an integer")
        has_data, has_synth = raw.get("data") is not None, raw.get("synthetic") is not None
        if has_data == has_synth:
            raise ConfigError("exactly one of 'data' or 'synthetic' must be given")

        data = synthetic = None
        if has_data:
            data = _check_keys("data", raw["data"], _DATA_KEYS)
            for k in ("embeddings", "features"):
                if k not in data:
                    raise ConfigError(f"'data.{k}' is required")
            data.setdefault("labels", None)
            data.setdefault("ids", None)
            data.setdefault("dim", 384)
        else:
            synthetic = _check_keys(
                "synthetic", raw["synthetic"], set(SYNTHETIC_DEFAULTS) | {"seed"}
            )
            synthetic = {**SYNTHETIC_DEFAULTS, "seed": seed, **synthetic}

        split = _check_keys("split", raw.get("split", {}), _SPLIT_KEYS)
        split = {"test_fraction": 0.2, "seed": seed, **split}
        if not 0.0 < split["test_fraction"] < 1.0:
            raise ConfigError("split.test_fraction must lie strictly between 0 and 1")

        sfl_raw = dict(raw.get("sfl", {}))
        sfl_raw.setdefault("seed", seed)
        forest_raw = dict(raw.get("forest", {}))
        forest_raw.setdefault("seed", seed)
        try:
            sfl_cfg = TrainConfig.from_dict(sfl_raw)
            forest_cfg = ForestConfig.from_dict(forest_raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

        ablations = raw.get("ablations", list(ABLATIONS))
        if isinstance(ablations, str):
            ablations = [a for a in ablations.split(",") if a]
        bad = [a for a in ablations if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablations {bad}; choose from {list(ABLATIONS)}")
        if not ablations:
            raise ConfigError("at least one ablation must be selected")
        ablations = tuple(a for a in ABLATIONS if a in ablations)

        evaluation = _check_keys("evaluation", raw.get("evaluation", {}), _EVAL_KEYS)
        evaluation = {"threshold": 0.5, "n_bins": 10, "ece_mode": "max", **evaluation}
        if evaluation["ece_mode"] not in ("max", "positive"):
            raise ConfigError("evaluation.ece_mode must be 'max' or 'positive'")
        if evaluation["n_bins"] < 1:
            raise ConfigError("evaluation.n_bins must be at least 1")

        return cls(
            output_dir=str(raw["output_dir"]),
            seed=seed,
            data=data,
            synthetic=synthetic,
            split=split,
            sfl=sfl_cfg,
            forest=forest_cfg,
            ablations=ablations,
            evaluation=evaluation,
            save_models=bool(raw.get("save_models", False)),
        )

    def to_dict(self) -> dict:
        d = {
            "output_dir": self.output_dir,
            "seed": self.seed,
            "split": self.split,
            "sfl": asdict(self.sfl),
            "forest": asdict(self.forest),
            "ablations": list(self.ablations),
            "evaluation": self.evaluation,
            "save_models": self.save_models,
        }
        if self.data is not None:
            d["data"] = self.data
        else:
            d["synthetic"] = self.synthetic
        return d


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------- file helpers


def atomic_write(path, content) -> None:
    path = Path(path)
    data = content.encode("utf-8") if isinstance(content, str) else content
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- extract / reframe / synth


def read_records(path) -> list:
    """Parse an ``id,popularity,text`` CSV (text may span lines when quoted)."""
    records = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, strict=True)
            header = next(reader, None)
            if header != ["id", "popularity", "text"]:
                raise FormatError(f"{path}:1: header must be id,popularity,text")
            for row in reader:
                lineno = reader.line_num
                if not row:
                    continue
                if len(row) != 3:
                    raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
                try:
                    popularity = float(row[1])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad popularity {row[1]!r}") from None
                records.append(LyricRecord(id=row[0], text=row[2], popularity=popularity))
    except csv.Error as exc:
        raise FormatError(f"{path}:{reader.line_num}: {exc}") from None
    except FileNotFoundError:
        raise DataError(f"records file not found: {path}") from None
    return records


def run_extract(records_path, output_path) -> int:
    """Write the auxiliary features CSV for every record. Returns the row count."""
    records = read_records(records_path)
    rows = [
        [r.id] + [repr(float(v)) for v in extract_struct_features(r).as_array()]
        for r in records
    ]
    atomic_write(output_path, _csv_text(("id",) + AUX_FEATURE_NAMES, rows))
    return len(rows)


def run_reframe(clusters_path, labels_path, report_path) -> dict:
    """Binary labels from an ``id,cluster_label`` CSV plus a JSON reframing report."""
    ids, clusters = [], []
    try:
        with open(clusters_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or not {"id", "cluster_label"} <= set(reader.fieldnames):
                raise FormatError(f"{clusters_path}: needs id and cluster_label columns")
            for row in reader:
                ids.append(row["id"])
                try:
                    clusters.append(int(row["cluster_label"]))
                except (TypeError, ValueError):
                    raise FormatError(
                        f"{clusters_path}:{reader.line_num}: bad cluster_label {row['cluster_label']!r}"
                    ) from None
    except FileNotFoundError:
        raise DataError(f"cluster file not found: {clusters_path}") from None
    labels, report = reframe_binary(clusters)
    atomic_write(labels_path, _csv_text(("id", "label"), zip(ids, labels.tolist())))
    out = report.to_dict()
    out["n_rows"] = len(ids)
    atomic_write(report_path, _dump_json(out))
    return out


def run_synth(output_dir, n, d, separation, aux_signal, class0_fraction=0.51861, seed=0) -> dict:
    """Write a synthetic corpus as ``embeddings.sfl1`` + ``features.csv`` (with cluster labels)."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, clusters = generate_synthetic(n, d, separation, aux_signal, class0_fraction, seed)
    emb = out / "embeddings.sfl1"
    fd, tmp = tempfile.mkstemp(prefix=".embeddings.", dir=out)
    os.close(fd)
    write_embeddings(tmp, dataset.deep)
    os.replace(tmp, emb)
    fd, tmp = tempfile.mkstemp(prefix=".features.", dir=out)
    os.close(fd)
    write_features_csv(tmp, dataset.ids, dataset.aux, clusters)
    os.replace(tmp, out / "features.csv")
    return {"embeddings": str(emb), "features": str(out / "features.csv"), "n": n, "dim": d}


# ---------------------------------------------------------------- run


def _load(cfg: ExperimentConfig) -> tuple[Dataset, dict]:
    if cfg.data is not None:
        d = cfg.data
        paths = {k: d[k] for k in ("embeddings", "features", "labels", "ids") if d.get(k)}
        for k, p in paths.items():
            if not Path(p).is_file():
                raise DataError(f"data.{k}: file not found: {p}")
        dataset = load_dataset(d["embeddings"], d["features"], d.get("labels"), dim=d["dim"], ids_path=d.get("ids"))
        checksums = {k: file_sha256(p) for k, p in sorted(paths.items())}
    else:
        s = cfg.synthetic
        try:
            dataset, _ = generate_synthetic(
                s["n"], s["d"], s["separation"], s["aux_signal"], s["class0_fraction"], s["seed"]
            )
        except ValueError as exc:
            raise ConfigError(f"synthetic: {exc}") from None
        checksums = {"synthetic": data_checksum(dataset.deep, dataset.aux, dataset.labels)}
    if np.unique(dataset.labels).size < 2:
        raise DataError("dataset has a single class; nothing to classify")
    return dataset, checksums


def _scaled(train_x: np.ndarray, test_x: np.ndarray):
    params = fit_scaler(train_x)
    return transform(train_x, params), transform(test_x, params)


def _fit_ablation(name, cfg, train_ds: Dataset, test_ds: Dataset, out: Path):
    """Train one configuration; returns (test probabilities, extra report fields)."""
    extra = {}
    if name == "sfl_gated":
        xtr, xte = _scaled(train_ds.deep, test_ds.deep)
        atr, ate = _scaled(train_ds.aux, test_ds.aux)
        params, trace = train(xtr, atr, train_ds.labels, cfg.sfl)
        extra["training"] = {
            "epochs_run": trace.epochs_run,
            "best_epoch": trace.best_epoch,
            "train_loss": trace.train_loss,
            "val_loss": trace.val_loss,
        }
        if cfg.save_models:
            save_model(
                out / "model_sfl_gated.sflm",
                params,
                cfg.sfl,
                {"train": data_checksum(xtr, atr, train_ds.labels)},
            )
        return predict_proba(params, xte, ate), extra

    if name == "rf_concat":
        xtr, xte = concat_features(train_ds), concat_features(test_ds)
    elif name == "rf_lyrics_only":
        xtr, xte = train_ds.deep, test_ds.deep
    else:
        xtr, xte = train_ds.aux, test_ds.aux
    xtr, xte = _scaled(xtr, xte)
    model = fit_forest(xtr, train_ds.labels, cfg.forest)
    extra["forest"] = {
        "n_trees": len(model.trees),
        "mean_nodes": float(np.mean([t.n_nodes for t in model.trees])),
    }
    if name == "rf_concat":
        imp = mdi_importances(model)
        extra["aux_importances"] = dict(zip(AUX_FEATURE_NAMES, imp[-4:].tolist()))
        extra["mdi"] = imp
    if cfg.save_models:
        atomic_write(out / f"model_{name}.json", model.to_json())
    return predict_proba_forest(model, xte), extra


def _rounded(v: float) -> float:
    return float(f"{v:.5f}")


def run_experiment(config) -> dict:
    """Run every selected ablation and write the report bundle.

    ``config`` is an ``ExperimentConfig`` or a raw dict. Config and data
    problems are raised before any model is trained. Returns
    ``{ablation: EvalReport}``.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    dataset, checksums = _load(cfg)
    split = stratified_split(dataset.labels, cfg.split["test_fraction"], cfg.split["seed"])
    train_ds, test_ds = dataset.subset(split.train_indices), dataset.subset(split.test_indices)
    if np.unique(test_ds.labels).size < 2:
        raise DataError("test split lacks one of the classes; use more rows or a larger test_fraction")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    reports: dict = {}
    for name in cfg.ablations:
        try:
            probs, extra = _fit_ablation(name, cfg, train_ds, test_ds, out)
        except (DataError, ConfigError, TrainingError):
            raise
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise TrainingError(f"{name}: {exc}") from exc
        ev = cfg.evaluation
        report = evaluate(test_ds.labels, probs, ev["threshold"], ev["n_bins"], ev["ece_mode"])
        mdi = extra.pop("mdi", None)
        report.extra = {"ablation": name, "configuration": ABLATION_LABELS[name], **extra}
        reports[name] = report
        _write_report(out, name, report)
        if mdi is not None:
            names = [f"e{j}" for j in range(dataset.dim)] + list(AUX_FEATURE_NAMES)
            groups = ["deep"] * dataset.dim + ["aux"] * 4
            atomic_write(
                out / "mdi_rf_concat.csv",
                _csv_text(("feature", "group", "importance"),
                          [(n, g, repr(float(v))) for n, g, v in zip(names, groups, mdi)]),
            )

    rows = []
    for name, r in reports.items():
        rows.append({"ablation": name, "configuration": ABLATION_LABELS[name],
                     **{k: _rounded(v) for k, v in r.table_row().items()}})
    atomic_write(
        out / "table1.csv",
        _csv_text(
            ("ablation", "configuration") + METRIC_COLUMNS,
            [[r["ablation"], r["configuration"]] + [f"{r[k]:.5f}" for k in METRIC_COLUMNS] for r in rows],
        ),
    )
    atomic_write(out / "table1.json", _dump_json(rows))

    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "input_checksums": checksums,
        "n_rows": len(dataset),
        "n_train": int(split.train_indices.size),
        "n_test": int(split.test_indices.size),
        "reframing": dataset.reframing.to_dict() if dataset.reframing else None,
        "scaler": "z-score refit per ablation on that ablation's training columns",
        "versions": {
            "gatedfusion": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    atomic_write(out / "manifest.json", _dump_json(manifest))
    return reports


def _nan_to_none(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def _write_report(out: Path, name: str, report: EvalReport) -> None:
    body = _nan_to_none(copy.deepcopy(report.to_dict()))
    body["files"] = {
        "roc": f"roc_{name}.csv",
        "pr": f"pr_{name}.csv",
        "reliability": f"reliability_{name}.csv",
    }
    atomic_write(out / f"roc_{name}.csv", curve_csv(report.roc))
    atomic_write(out / f"pr_{name}.csv", curve_csv(report.pr))
    atomic_write(out / f"reliability_{name}.csv", reliability_csv(report.reliability))
    atomic_write(out / f"report_{name}.json", _dump_json(body))
