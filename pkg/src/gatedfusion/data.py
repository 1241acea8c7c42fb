"""Dataset assembly: file ingestion, binary reframing, splits, synthetic data.

Embeddings come either as a binary ``SFL1`` blob::

    b"SFL1" | u32 N | u32 D | N*D float32   (all little-endian, row-major)

or, for small fixtures, as a CSV with header ``id,e0,...,e{D-1}``. The loader
sniffs the first four bytes to tell them apart.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DataError,
    DimensionMismatchError,
    FormatError,
    JoinError,
    NoDominantClusterError,
    NonFiniteError,
)
from .features import AUX_FEATURE_NAMES

EMBEDDINGS_MAGIC = b"SFL1"
DEFAULT_DIM = 384
FEATURES_HEADER = ("id",) + AUX_FEATURE_NAMES
N_SUBCLUSTERS = 10

# per-feature share of aux_signal in the synthetic generator; pronoun_ratio dominates
_AUX_SIGNAL_WEIGHTS = np.array([0.5, 0.5, 1.0, 0.25])
# (centre, spread, bounded) used to map a latent score onto each aux feature
_AUX_LAYOUT = ((0.35, 0.10, True), (0.55, 0.10, True), (0.15, 0.05, True), (50.0, 15.0, False))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ReframingReport:
    dominant_cluster_id: int
    class0_fraction: float
    cluster_sizes: dict

    def to_dict(self) -> dict:
        return {
            "dominant_cluster_id": self.dominant_cluster_id,
            "class0_fraction": self.class0_fraction,
            "cluster_sizes": {str(k): v for k, v in sorted(self.cluster_sizes.items())},
        }


@dataclass(frozen=True)
class Dataset:
    """Deep embeddings, auxiliary features and binary labels, row-aligned."""

    deep: np.ndarray
    aux: np.ndarray
    labels: np.ndarray
    ids: tuple
    reframing: Optional[ReframingReport] = field(default=None, compare=False)

    def __post_init__(self):
        deep = np.asarray(self.deep, dtype=np.float64)
        aux = np.asarray(self.aux, dtype=np.float64)
        labels = np.asarray(self.labels)
        if deep.ndim != 2 or aux.ndim != 2:
            raise DataError("deep and aux must be 2-d matrices")
        n = deep.shape[0]
        if aux.shape[0] != n or labels.shape != (n,) or len(self.ids) != n:
            raise DataError(
                f"row counts disagree: deep={n}, aux={aux.shape[0]}, "
                f"labels={labels.shape[0] if labels.ndim else 0}, ids={len(self.ids)}"
            )
        if not (np.isfinite(deep).all() and np.isfinite(aux).all()):
            raise NonFiniteError("dataset contains NaN or Inf values")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        object.__setattr__(self, "deep", _frozen(deep))
        object.__setattr__(self, "aux", _frozen(aux))
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    def __len__(self):
        return self.deep.shape[0]

    @property
    def dim(self) -> int:
        return self.deep.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            deep=self.deep[idx],
            aux=self.aux[idx],
            labels=self.labels[idx],
            ids=tuple(self.ids[i] for i in idx),
        )


@dataclass(frozen=True)
class SplitAssignment:
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int
    test_fraction: float


def reframe_binary(cluster_labels: Sequence[int]) -> tuple[np.ndarray, ReframingReport]:
    """Largest non-noise cluster becomes class 0; everything else, noise included, class 1.

    Size ties go to the smallest cluster id.
    """
    labels = np.asarray(cluster_labels, dtype=np.int64)
    sizes = Counter(int(c) for c in labels)
    candidates = {c: k for c, k in sizes.items() if c != -1}
    if not candidates:
        raise NoDominantClusterError("no non-noise cluster label present")
    dominant = min(candidates, key=lambda c: (-candidates[c], c))
    binary = np.where(labels == dominant, 0, 1).astype(np.int64)
    report = ReframingReport(
        dominant_cluster_id=dominant,
        class0_fraction=candidates[dominant] / labels.size,
        cluster_sizes=dict(sizes),
    )
    return binary, report


def stratified_split(labels, test_fraction: float = 0.2, seed: int = 0) -> SplitAssignment:
    """Per-class shuffled split; each class contributes round(n_c * test_fraction) test rows."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise DataError("stratified split needs both classes present")
    rng = np.random.default_rng(seed)
    test = []
    for c in classes:
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(members.size)]
        test.append(members[: int(round(members.size * test_fraction))])
    test_idx = np.sort(np.concatenate(test))
    mask = np.ones(y.size, dtype=bool)
    mask[test_idx] = False
    return SplitAssignment(
        train_indices=np.flatnonzero(mask),
        test_indices=test_idx,
        seed=seed,
        test_fraction=test_fraction,
    )


def concat_features(dataset: Dataset) -> np.ndarray:
    return np.hstack([dataset.deep, dataset.aux])


def generate_synthetic(
    n: int,
    d: int,
    separation: float,
    aux_signal: float,
    class0_fraction: float = 0.51861,
    seed: int = 0,
) -> tuple[Dataset, np.ndarray]:
    """Gaussian stand-in for the embedded corpus.

    Class 0 is one isotropic blob at the origin. Class 1 is spread over ten
    unit-variance sub-clusters whose centres sit at distance ``separation``
    from the origin. The centre directions are random but share a common
    axis (each is at 45 degrees to it), so the two classes sit on opposite
    sides of a hyperplane once ``separation`` is large.

    Auxiliary features get a class-dependent latent shift of ``aux_signal``
    noise units, weighted so that pronoun_ratio carries the most signal, and
    are then mapped onto plausible ranges (the three ratios clipped to
    [0, 1]).

    Returns the dataset and the ground-truth cluster labels (0 for the
    class-0 blob, 1..10 for the class-1 sub-clusters).
    """
    if n < 2 or d < 1:
        raise ValueError("need n >= 2 and d >= 1")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if not 0.0 < class0_fraction < 1.0:
        raise ValueError("class0_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)

    n0 = int(round(n * class0_fraction))
    labels = np.concatenate([np.zeros(n0, np.int64), np.ones(n - n0, np.int64)])
    clusters = np.where(labels == 0, 0, rng.integers(1, N_SUBCLUSTERS + 1, size=n))

    axis = rng.standard_normal(d)
    axis /= np.linalg.norm(axis)
    centres = np.zeros((N_SUBCLUSTERS + 1, d))
    for k in range(1, N_SUBCLUSTERS + 1):
        tilt = rng.standard_normal(d)
        tilt -= tilt.dot(axis) * axis
        norm = np.linalg.norm(tilt)
        direction = axis if norm < 1e-12 else (axis + tilt / norm) / math.sqrt(2.0)
        centres[k] = separation * direction
    deep = rng.standard_normal((n, d)) + centres[clusters]

    latent = rng.standard_normal((n, 4)) + np.outer(labels, aux_signal * _AUX_SIGNAL_WEIGHTS)
    aux = np.empty_like(latent)
    for j, (centre, spread, bounded) in enumerate(_AUX_LAYOUT):
        col = centre + spread * latent[:, j]
        aux[:, j] = np.clip(col, 0.0, 1.0) if bounded else col

    order = rng.permutation(n)
    dataset = Dataset(
        deep=deep[order],
        aux=aux[order],
        labels=labels[order],
        ids=tuple(str(i) for i in range(n)),
    )
    return dataset, clusters[order]


# ---------------------------------------------------------------- file I/O


def write_embeddings(path, matrix) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("embeddings must be a 2-d matrix")
    with open(path, "wb") as fh:
        fh.write(EMBEDDINGS_MAGIC)
        fh.write(struct.pack("<II", *m.shape))
        fh.write(m.tobytes())


def _read_embeddings_binary(raw: bytes, path) -> np.ndarray:
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    n, d = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * n * d
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n}x{d}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)


def _read_embeddings_csv(text: str, path) -> tuple[list, np.ndarray]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[0] != "id" or any(
        h != f"e{j}" for j, h in enumerate(header[1:])
    ):
        raise FormatError(f"{path}: embeddings CSV header must be id,e0,...,e{{D-1}}")
    ids, rows = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0])
        try:
            rows.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    return ids, matrix


def read_embeddings(path, ids_path=None) -> tuple[list, np.ndarray]:
    """Return (ids, matrix). Binary files use implicit ids 0..N-1 unless `ids_path` is given."""
    raw = Path(path).read_bytes()
    if raw[:4] == EMBEDDINGS_MAGIC:
        matrix = _read_embeddings_binary(raw, path)
        ids = [str(i) for i in range(matrix.shape[0])]
    elif raw[:3] == b"id,":
        ids, matrix = _read_embeddings_csv(raw.decode("utf-8"), path)
    else:
        raise FormatError(f"{path}: unknown magic bytes {raw[:4]!r}")
    if ids_path is not None:
        ids = [line.strip() for line in Path(ids_path).read_text("utf-8").splitlines() if line.strip()]
        if len(ids) != matrix.shape[0]:
            raise JoinError(f"{ids_path}: {len(ids)} ids for {matrix.shape[0]} embedding rows")
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate ids")
    return ids, matrix


def write_features_csv(path, ids, aux, cluster_labels=None) -> None:
    header = list(FEATURES_HEADER) + (["cluster_label"] if cluster_labels is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row_id in enumerate(ids):
            row = [row_id] + [repr(float(v)) for v in aux[i]]
            if cluster_labels is not None:
                row.append(int(cluster_labels[i]))
            w.writerow(row)


def read_features_csv(path) -> dict:
    """Map id -> (aux 4-vector, cluster label or None)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        has_cluster = header == FEATURES_HEADER + ("cluster_label",)
        if header != FEATURES_HEADER and not has_cluster:
            raise FormatError(f"{path}: unexpected header {','.join(header)}")
        out = {}
        for row in reader:
            if not row:
                continue
            lineno = reader.line_num
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                values = np.array([float(v) for v in row[1:5]])
                cluster = int(row[5]) if has_cluster else None
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if row[0] in out:
                raise FormatError(f"{path}:{lineno}: duplicate id {row[0]!r}")
            out[row[0]] = (values, cluster)
    return out


def read_labels_csv(path) -> dict:
    """Map id -> value from an ``id,label`` or ``id,cluster_label`` CSV, plus the column name."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header not in (("id", "label"), ("id", "cluster_label")):
            raise FormatError(f"{path}: header must be id,label or id,cluster_label")
        out = {}
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{reader.line_num}: expected 2 fields, got {len(row)}")
            try:
                out[row[0]] = int(row[1])
            except ValueError as exc:
                raise FormatError(f"{path}:{reader.line_num}: {exc}") from None
    return {"column": header[1], "values": out}


def load_dataset(
    embeddings_path,
    features_path,
    labels_source=None,
    *,
    dim: Optional[int] = DEFAULT_DIM,
    ids_path=None,
) -> Dataset:
    """Join embeddings, auxiliary features and labels by id.

    Row order follows the embeddings file. ``labels_source`` is a CSV with
    either a binary ``label`` column or a ``cluster_label`` column (which is
    reframed); when omitted, the features CSV's ``cluster_label`` column is
    reframed. Pass ``dim=None`` to accept any embedding width.
    """
    ids, deep = read_embeddings(embeddings_path, ids_path)
    if dim is not None and deep.shape[1] != dim:
        raise DimensionMismatchError(
            f"{embeddings_path}: embedding dimension {deep.shape[1]} != expected {dim}"
        )
    if not np.isfinite(deep).all():
        raise NonFiniteError(f"{embeddings_path}: NaN or Inf in embeddings")

    features = read_features_csv(features_path)
    missing = [i for i in ids if i not in features]
    if missing:
        raise JoinError(f"{features_path}: no features for id {missing[0]!r} ({len(missing)} missing)")
    aux = np.vstack([features[i][0] for i in ids]) if ids else np.empty((0, 4))
    if not np.isfinite(aux).all():
        raise NonFiniteError(f"{features_path}: NaN or Inf in features")

    if labels_source is None:
        clusters = [features[i][1] for i in ids]
        if any(c is None for c in clusters):
            raise FormatError(f"{features_path}: no cluster_label column and no labels source given")
        column, values = "cluster_label", clusters
    else:
        parsed = read_labels_csv(labels_source)
        missing = [i for i in ids if i not in parsed["values"]]
        if missing:
            raise JoinError(f"{labels_source}: no label for id {missing[0]!r}")
        column, values = parsed["column"], [parsed["values"][i] for i in ids]

    report = None
    if column == "cluster_label":
        labels, report = reframe_binary(values)
    else:
        labels = np.asarray(values, dtype=np.int64)
        if not np.isin(labels, (0, 1)).all():
            raise DataError(f"{labels_source}: labels must be 0 or 1")
    return Dataset(deep=deep, aux=aux, labels=labels, ids=tuple(ids), reframing=report)
