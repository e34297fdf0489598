"""
Embedding sets, pairing, label files and report serialization.

File formats
------------
SPECEMB1 binary:
    b"SPECEMB1" | u32 n | u32 d | n*d f32 values, little-endian, row-major
    ids live in an optional sidecar "<stem>.ids" (one per line); without it
    ids default to "0".."n-1".
CSV:
    optional header, first column is the sample id, the remaining d columns
    are floats ('.' decimal separator).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from spec_compare.errors import ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"SPECEMB1"
HEADER_BYTES = len(MAGIC) + 8

BINARY_SUFFIXES = (".bin", ".emb", ".specemb")
CSV_HEADER_MODES = ("auto", "yes", "no")


@dataclass(frozen=True)
class EmbeddingSet:
    ids: Tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2:
            raise ValidationError(f"embedding data must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 2 or d < 1:
            raise ValidationError(f"need n >= 2 and d >= 1, got n={n}, d={d}")

        ids = tuple(str(i) for i in self.ids)
        if len(ids) != n:
            raise ValidationError(f"{len(ids)} ids for {n} rows")
        seen = {}
        for row, sample_id in enumerate(ids):
            if sample_id in seen:
                raise ValidationError(f"duplicate id '{sample_id}' at row {row} (first seen at row {seen[sample_id]})")
            seen[sample_id] = row

        bad = np.flatnonzero(~np.isfinite(data).all(axis=1))
        if bad.size:
            raise ValidationError(f"non-finite value at row {int(bad[0])} (id '{ids[bad[0]]}')")

        data.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def subset(self, rows: Sequence[int]) -> "EmbeddingSet":
        rows = list(rows)
        return EmbeddingSet(ids=tuple(self.ids[r] for r in rows), data=self.data[rows])

    @classmethod
    def from_array(cls, data, ids: Optional[Sequence[str]] = None) -> "EmbeddingSet":
        data = np.asarray(data, dtype=np.float64)
        if ids is None:
            ids = [str(i) for i in range(data.shape[0])]
        return cls(ids=tuple(ids), data=data)


@dataclass(frozen=True)
class PairedDataset:
    a: EmbeddingSet
    b: EmbeddingSet

    def __post_init__(self):
        if self.a.n != self.b.n:
            raise ValidationError(f"sample count mismatch: {self.a.n} vs {self.b.n}")
        for index, (left, right) in enumerate(zip(self.a.ids, self.b.ids)):
            if left != right:
                raise ValidationError(f"id mismatch at index {index}: '{left}' vs '{right}'")

    @property
    def n(self) -> int:
        return self.a.n

    @property
    def ids(self) -> Tuple[str, ...]:
        return self.a.ids

    def swapped(self) -> "PairedDataset":
        return PairedDataset(a=self.b, b=self.a)


@dataclass(frozen=True)
class LabelVector:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ValidationError("labels must be a flat vector")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError("labels must be integers")
        if labels.size and labels.min() < 0:
            raise ValidationError(f"negative label at index {int(np.argmin(labels))}")
        labels = labels.astype(np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.size


def pair(a: EmbeddingSet, b: EmbeddingSet) -> PairedDataset:
    return PairedDataset(a=a, b=b)


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------

def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt:
        if fmt not in ("csv", "binary"):
            raise ValidationError(f"unknown embedding format '{fmt}'")
        return fmt
    suffix = path.suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in BINARY_SUFFIXES:
        return "binary"
    raise ValidationError(f"cannot infer format of '{path}', pass csv or binary explicitly")


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except (TypeError, ValueError):
        return False


def _read_csv_cells(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ValidationError(f"{path}: empty file")
    except pd.errors.ParserError as e:
        # pandas reports the offending line number
        raise ValidationError(f"{path}: dimension mismatch: {e}")
    return frame


def _looks_like_header(cells: Sequence[str]) -> bool:
    """Non-numeric column names, or (for d >= 2) numeric ones that are just the column positions 0..d-1 / 1..d."""
    cells = [c for c in cells if c != ""]
    if not all(_is_float(c) for c in cells):
        return True
    values = [float(c) for c in cells]
    d = len(values)
    return d > 1 and (values == list(range(d)) or values == list(range(1, d + 1)))


def _load_csv(path: Path, header: str = "auto") -> EmbeddingSet:
    if header not in CSV_HEADER_MODES:
        raise ValidationError(f"header must be one of {CSV_HEADER_MODES}, got '{header}'")
    frame = _read_csv_cells(path)
    if frame.shape[1] < 2:
        raise ValidationError(f"{path}: need an id column and at least one value column")

    if header == "yes" or (header == "auto" and _looks_like_header(frame.iloc[0, 1:].tolist())):
        logger.info(f"{path}: treating first row as header (header={header})")
        frame = frame.iloc[1:].reset_index(drop=True)
        if frame.empty:
            raise ValidationError(f"{path}: header row but no samples")

    ids = frame.iloc[:, 0].tolist()
    cells = frame.iloc[:, 1:]

    missing = cells.isna() | (cells == "")
    short = np.flatnonzero(missing.to_numpy().any(axis=1))
    if short.size:
        row = int(short[0])
        found = int((~missing.iloc[row]).sum())
        raise ValidationError(
            f"{path}: dimension mismatch at row {row} (id '{ids[row]}'): expected {cells.shape[1]} values, found {found}"
        )

    values = cells.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if bad.size:
        row = int(bad[0])
        raise ValidationError(f"{path}: non-finite or unparseable value at row {row} (id '{ids[row]}')")

    return EmbeddingSet(ids=tuple(ids), data=values)


def read_matrix_binary(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_BYTES or raw[: len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path}: malformed header (expected magic {MAGIC!r})")
    n, d = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2, offset=len(MAGIC)))
    expected = HEADER_BYTES + 4 * n * d
    if len(raw) != expected:
        raise ValidationError(
            f"{path}: dimension mismatch: header declares n={n}, d={d} ({expected} bytes) but file has {len(raw)} bytes"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=HEADER_BYTES).reshape(n, d)
    return values.astype(np.float64)


def _load_binary(path: Path, ids_path: Optional[Path]) -> EmbeddingSet:
    values = read_matrix_binary(path)
    n = values.shape[0]

    bad = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if bad.size:
        raise ValidationError(f"{path}: non-finite value at row {int(bad[0])}")

    sidecar = ids_path or path.with_suffix(".ids")
    if sidecar.exists():
        ids = [line.rstrip("\r\n") for line in sidecar.read_text(encoding="utf-8").splitlines()]
        ids = [i for i in ids if i != ""]
        if len(ids) != n:
            raise ValidationError(f"{sidecar}: {len(ids)} ids for n={n} rows")
    else:
        ids = [str(i) for i in range(n)]
    return EmbeddingSet(ids=tuple(ids), data=values)


def load_embedding_set(path, fmt: Optional[str] = None, ids_path=None, header: str = "auto") -> EmbeddingSet:
    """
    CSV: `header` is "auto" (first row is a header when its value cells are
    not numeric or are the column positions), "yes" or "no".
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"embedding file not found: {path}")
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        emb = _load_csv(path, header)
    else:
        emb = _load_binary(path, Path(ids_path) if ids_path else None)
    logger.info(f"Loaded {emb.n} samples (d={emb.d}) from {path}")
    return emb


def load_labels(path, ids: Optional[Sequence[str]] = None) -> LabelVector:
    """
    Read a label file.

    Accepted layouts:
        one integer label per line (row order), or
        CSV "id,label" (aligned to `ids` when given).
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"label file not found: {path}")
    frame = _read_csv_cells(path)
    if not _is_float(frame.iloc[0, -1]):
        frame = frame.iloc[1:].reset_index(drop=True)

    try:
        labels = frame.iloc[:, -1].astype(np.int64).to_numpy()
    except ValueError as e:
        raise ValidationError(f"{path}: labels must be integers ({e})")

    if frame.shape[1] >= 2 and ids is not None:
        by_id = dict(zip(frame.iloc[:, 0].tolist(), labels))
        missing = [sample_id for sample_id in ids if sample_id not in by_id]
        if missing:
            raise ValidationError(f"{path}: no label for id '{missing[0]}'")
        labels = np.array([by_id[sample_id] for sample_id in ids], dtype=np.int64)

    if ids is not None and len(labels) != len(ids):
        raise ValidationError(f"{path}: {len(labels)} labels for {len(ids)} samples")
    return LabelVector(labels=labels)


# --------------------------------------------------------------------------
# Writing
# --------------------------------------------------------------------------

def write_matrix_binary(matrix, path) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValidationError("SPECEMB1 stores 2-D matrices only")
    n, d = matrix.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([n, d], dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def write_embedding_set(emb: EmbeddingSet, path, fmt: Optional[str] = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "binary":
        write_matrix_binary(emb.data, path)
        path.with_suffix(".ids").write_text("\n".join(emb.ids) + "\n", encoding="utf-8")
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(emb.data, index=list(emb.ids))
        frame.to_csv(path, header=False, float_format="%.17g")
    logger.info(f"Wrote {emb.n} samples to {path}")


def _cluster_payload(cluster) -> Dict[str, Any]:
    return {
        "rank": int(cluster.rank),
        "eigenvalue": float(cluster.eigenvalue),
        "side": cluster.side,
        "sample_ids": list(cluster.sample_ids),
        "weights": [float(w) for w in cluster.weights],
    }


def _eigenvalue_list(result) -> list:
    eigenvalues = getattr(result, "eigenvalues", None)
    if eigenvalues is None:
        eigenvalues = [p.lam for p in result.eigenpairs]
    return [float(lam) for lam in eigenvalues]


def report_payload(result, diagnostics: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    payload = {
        "spec_diff": float(result.spec_diff),
        "eigenvalues": _eigenvalue_list(result),
        "clusters": [_cluster_payload(c) for c in result.clusters],
        "config": dict(result.config),
    }
    diagnostics = diagnostics if diagnostics is not None else getattr(result, "diagnostics", None)
    if diagnostics:
        payload["diagnostics"] = diagnostics
    return payload


def _markdown_report(payload: Dict[str, Any]) -> str:
    lines = [
        "# SPEC report",
        "",
        f"- SPEC-diff: {payload['spec_diff']:.10g}",
        f"- eigenvalues retained: {len(payload['eigenvalues'])}",
        f"- seed: {payload['config'].get('seed')}",
        "",
    ]
    for cluster in payload["clusters"]:
        lines.append(f"## Cluster {cluster['side']}{cluster['rank']} (eigenvalue {cluster['eigenvalue']:.10g})")
        lines.append("")
        lines.append("| sample | weight |")
        lines.append("|---|---|")
        for sample_id, weight in zip(cluster["sample_ids"], cluster["weights"]):
            lines.append(f"| {sample_id} | {weight:.10g} |")
        lines.append("")
    if payload.get("diagnostics"):
        lines.append("## Diagnostics")
        lines.append("")
        lines.append("```json")
        lines.append(json.dumps(payload["diagnostics"], indent=2))
        lines.append("```")
        lines.append("")
    return "\n".join(lines)


def render_report(payload: Dict[str, Any], fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if fmt == "markdown":
        return _markdown_report(payload)
    raise ValidationError(f"unknown report format '{fmt}'")


def write_report(result, path, fmt: str = "json", diagnostics: Optional[Dict[str, Any]] = None) -> None:
    text = render_report(report_payload(result, diagnostics), fmt)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise ValidationError(f"cannot write report to {path}: {e}")
    logger.info(f"Report saved to {path}")
