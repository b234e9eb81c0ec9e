"""
Feature extraction for packet traces.

- Codebook: per-field categorical codes (0 = ABSENT, 1 = UNK, real values from 2)
- encode: traces -> FeatureMatrix (pandas DataFrame aligned to the layer schema)
- window: FeatureMatrix -> WindowSet of fixed-length, tail-padded slices
- split: trace-preserving, class-stratified train/test split
- InputLayout: one-hot input encoding for the sequence model
"""

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.config import FORMAT_VERSION
from app.core_model import (
    DatasetKind,
    KIND_FIELD,
    Layer,
    SCHEMAS,
    SCHEMA_SETS,
    Trace,
    dataset_kind_of,
    label_code,
)
from app.errors import ClassTooSmall, SchemaMismatch, ValidationError
from app.utils import check_format_version, read_json, write_json

logger = logging.getLogger(__name__)

ABSENT = 0
UNK = 1
FIRST_CODE = 2
NO_LABEL = -1


def _value_key(value: Any) -> str:
    # "7" and 7 stay distinct codes
    return json.dumps(value, ensure_ascii=False)


class Codebook:
    """Injective value -> code map per field; grows while fitting, frozen afterwards."""

    def __init__(self, layer: Layer, tables: Optional[Dict[str, Dict[str, int]]] = None):
        self.layer = layer
        self.tables: Dict[str, Dict[str, int]] = {name: dict(t) for name, t in (tables or {}).items()}

    def code(self, field_name: str, value: Any, grow: bool) -> int:
        if value is None:
            return ABSENT
        key = _value_key(value)
        table = self.tables.get(field_name)
        if table is not None and key in table:
            return table[key]
        if not grow:
            return UNK
        if table is None:
            table = self.tables[field_name] = {}
        table[key] = FIRST_CODE + len(table)
        return table[key]

    def size(self, field_name: str) -> int:
        return len(self.tables.get(field_name, {}))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "layer": self.layer.value,
            "fields": {name: self.tables[name] for name in sorted(self.tables)},
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Codebook":
        check_format_version(payload, "codebook")
        layer = Layer(payload["layer"])
        unknown = [name for name in payload["fields"] if name not in SCHEMA_SETS[layer]]
        if unknown:
            raise SchemaMismatch(f"Codebook names fields outside the {layer.value} schema: {unknown[:5]}")
        return cls(layer, payload["fields"])

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> "Codebook":
        return cls.from_dict(read_json(path))


@dataclass
class FeatureMatrix:
    """One row per packet: trace_id, seq, one code per schema column, label code."""
    layer: Layer
    frame: pd.DataFrame
    dataset_kind: DatasetKind = DatasetKind.FBS

    @property
    def schema(self) -> Tuple[str, ...]:
        return SCHEMAS[self.layer]

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    def codes(self) -> np.ndarray:
        return self.frame[list(self.schema)].to_numpy(dtype=np.int64)

    def labels(self) -> np.ndarray:
        return self.frame["label"].to_numpy(dtype=np.int64)

    def trace_ids(self) -> List[str]:
        return list(OrderedDict.fromkeys(self.frame["trace_id"]))

    def to_csv(self, path: str) -> None:
        self.frame.to_csv(path, index=False)
        logger.info(f"💾 Wrote {self.n_rows} {self.layer.value} rows to {path}")

    @classmethod
    def from_csv(cls, path: str, layer: Layer,
                 dataset_kind: DatasetKind = DatasetKind.FBS) -> "FeatureMatrix":
        frame = pd.read_csv(path, dtype={"trace_id": str})
        expected = ["trace_id", "seq", *SCHEMAS[layer], "label"]
        if list(frame.columns) != expected:
            raise SchemaMismatch(f"{path}: header does not match the {layer.value} schema")
        return cls(layer, frame, dataset_kind)


def encode(traces: Sequence[Trace], layer: Layer, codebook: Optional[Codebook] = None,
           with_labels: bool = True) -> Tuple[FeatureMatrix, Codebook]:
    """
    Align every packet of `layer` to the schema and map values to codes.

    Args:
        traces: dataset in order
        layer: which layer's packets to keep
        codebook: an existing codebook (frozen: unseen values become UNK);
            None fits a new one on these traces
        with_labels: False fills the label column with -1 (inference input)

    Returns:
        (FeatureMatrix, Codebook)

    Raises:
        SchemaMismatch: a packet carries a field outside the layer schema
    """
    grow = codebook is None
    if codebook is None:
        codebook = Codebook(layer)
    elif codebook.layer != layer:
        raise SchemaMismatch(f"Codebook is for {codebook.layer.value}, not {layer.value}")

    schema = SCHEMAS[layer]
    allowed = SCHEMA_SETS[layer]
    kind_field = KIND_FIELD[layer]
    dataset_kind = dataset_kind_of(traces)

    rows = []
    for trace in traces:
        for packet in trace.packets:
            if packet.layer != layer:
                continue
            unknown = [name for name in packet.fields if name not in allowed]
            if unknown:
                raise SchemaMismatch(
                    f"{trace.trace_id} seq {packet.seq}: fields {sorted(unknown)} are not in the {layer.value} schema"
                )
            values = dict(packet.fields)
            values[kind_field] = packet.kind.name
            codes = [codebook.code(name, values.get(name), grow) for name in schema]
            label = label_code(packet.label, dataset_kind) if with_labels else NO_LABEL
            rows.append([trace.trace_id, packet.seq, *codes, label])

    frame = pd.DataFrame(rows, columns=["trace_id", "seq", *schema, "label"])
    if frame.empty:
        frame = frame.astype({name: np.int64 for name in ("seq", *schema, "label")})
    logger.debug(f"Encoded {len(frame)} {layer.value} packets from {len(traces)} traces")
    return FeatureMatrix(layer, frame, dataset_kind), codebook


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    trace_id: str
    start: int
    codes: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())


@dataclass
class WindowSet:
    len_seq: int
    stride: int
    windows: List[Window] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self) -> Iterator[Window]:
        return iter(self.windows)

    def by_trace(self) -> "OrderedDict[str, List[Window]]":
        grouped: "OrderedDict[str, List[Window]]" = OrderedDict()
        for w in self.windows:
            grouped.setdefault(w.trace_id, []).append(w)
        return grouped


def window_starts(n: int, len_seq: int, stride: int) -> List[int]:
    """Offsets 0, stride, ... until a window reaches the last packet."""
    starts = [0]
    while starts[-1] + len_seq < n:
        starts.append(starts[-1] + stride)
    return starts


def slice_windows(trace_id: str, codes: np.ndarray, labels: np.ndarray,
                  len_seq: int, stride: int) -> List[Window]:
    n, width = codes.shape
    windows = []
    for start in window_starts(n, len_seq, stride):
        stop = min(start + len_seq, n)
        real = stop - start
        w_codes = np.full((len_seq, width), ABSENT, dtype=np.int64)
        w_labels = np.zeros(len_seq, dtype=np.int64)
        w_mask = np.zeros(len_seq, dtype=np.float64)
        w_codes[:real] = codes[start:stop]
        w_labels[:real] = labels[start:stop]
        w_mask[:real] = 1.0
        windows.append(Window(trace_id, start, w_codes, w_labels, w_mask))
    return windows


def window(matrix: FeatureMatrix, len_seq: int, stride: int) -> WindowSet:
    """
    Cut each trace's rows into windows of len_seq rows.

    Windows never span two traces; the last window of a trace is padded with
    ABSENT rows whose mask is 0.

    Raises:
        ValidationError: len_seq or stride < 1, or stride > len_seq
    """
    if len_seq < 1 or stride < 1:
        raise ValidationError(f"len_seq and stride must be positive, got {len_seq}/{stride}")
    if stride > len_seq:
        raise ValidationError(f"stride {stride} > len_seq {len_seq} would skip packets")

    codes = matrix.codes()
    labels = matrix.labels()
    trace_ids = matrix.frame["trace_id"].to_numpy()
    result = WindowSet(len_seq, stride)
    if len(trace_ids) == 0:
        return result

    # rows of one trace are contiguous
    boundaries = np.flatnonzero(trace_ids[1:] != trace_ids[:-1]) + 1
    for lo, hi in zip(np.r_[0, boundaries], np.r_[boundaries, len(trace_ids)]):
        result.windows.extend(slice_windows(str(trace_ids[lo]), codes[lo:hi], labels[lo:hi], len_seq, stride))
    logger.debug(f"Cut {len(result)} windows (len_seq={len_seq}, stride={stride})")
    return result


# ---------------------------------------------------------------------------
# Train/test split
# ---------------------------------------------------------------------------

PACKET_RATIO_TOLERANCE = 0.05
MAX_BALANCING_SWAPS = 200


def split(traces: Sequence[Trace], ratio: float = 0.8, seed: int = 0) -> Tuple[List[Trace], List[Trace]]:
    """
    Split a dataset at trace granularity, stratified by scenario class.

    Each class contributes round(ratio * n) traces (at least one on each side)
    to the training partition; same-class swaps then pull the packet ratio
    toward `ratio`. Both partitions keep the input order.

    Raises:
        ValidationError: ratio outside (0, 1)
        ClassTooSmall: a class has fewer than 2 traces
    """
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"split ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)

    classes: "OrderedDict[str, List[int]]" = OrderedDict()
    for i, trace in enumerate(traces):
        classes.setdefault(str(trace.scenario), []).append(i)

    train: Dict[str, List[int]] = {}
    test: Dict[str, List[int]] = {}
    for name, members in classes.items():
        n = len(members)
        if n < 2:
            raise ClassTooSmall(f"Class {name} has {n} trace(s); a split needs at least 2")
        n_train = min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)
        order = rng.permutation(n)
        train[name] = [members[k] for k in order[:n_train]]
        test[name] = [members[k] for k in order[n_train:]]

    _balance_packets(traces, train, test, ratio)

    train_ids = sorted(i for members in train.values() for i in members)
    test_ids = sorted(i for members in test.values() for i in members)
    logger.info(f"📊 Split {len(traces)} traces into {len(train_ids)} train / {len(test_ids)} test")
    return [traces[i] for i in train_ids], [traces[i] for i in test_ids]


def _balance_packets(traces: Sequence[Trace], train: Dict[str, List[int]],
                     test: Dict[str, List[int]], ratio: float) -> None:
    sizes = [len(t) for t in traces]
    total = sum(sizes)
    if total == 0:
        return
    target = ratio * total
    in_train = sum(sizes[i] for members in train.values() for i in members)

    for _ in range(MAX_BALANCING_SWAPS):
        gap = abs(in_train - target)
        if gap <= PACKET_RATIO_TOLERANCE * total:
            return
        best = None
        for name in train:
            for a_pos, a in enumerate(train[name]):
                for b_pos, b in enumerate(test[name]):
                    new_gap = abs(in_train + sizes[b] - sizes[a] - target)
                    if new_gap < gap and (best is None or new_gap < best[0]):
                        best = (new_gap, name, a_pos, b_pos)
        if best is None:
            return
        _, name, a_pos, b_pos = best
        a, b = train[name][a_pos], test[name][b_pos]
        train[name][a_pos], test[name][b_pos] = b, a
        in_train += sizes[b] - sizes[a]


# ---------------------------------------------------------------------------
# Model input encoding
# ---------------------------------------------------------------------------

class InputLayout:
    """
    One-hot encoding of the schema columns that vary in training data.

    Each selected column keeps its most frequent codes (ties broken by code)
    plus one trailing "other" slot; UNK encodes as all zeros.
    """

    MAX_CATEGORIES = 16

    def __init__(self, layer: Layer, columns: List[str], categories: Dict[str, List[int]]):
        self.layer = layer
        self.columns = list(columns)
        self.categories = {name: [int(c) for c in categories[name]] for name in self.columns}
        schema_index = {name: i for i, name in enumerate(SCHEMAS[layer])}
        missing = [name for name in self.columns if name not in schema_index]
        if missing:
            raise SchemaMismatch(f"Input layout names fields outside the {layer.value} schema: {missing}")
        self._positions = [schema_index[name] for name in self.columns]
        self._offsets = []
        self._luts = []
        self._others = []
        offset = 0
        for name in self.columns:
            cats = self.categories[name]
            other = len(cats)
            lut = np.full(max(cats + [UNK]) + 1, other, dtype=np.int64)
            lut[UNK] = -1
            for slot, code in enumerate(cats):
                lut[code] = slot
            self._luts.append(lut)
            self._others.append(other)
            self._offsets.append(offset)
            offset += other + 1
        self.width = offset

    @classmethod
    def fit(cls, matrix: FeatureMatrix, max_categories: int = MAX_CATEGORIES) -> "InputLayout":
        codes = matrix.codes()
        columns, categories = [], {}
        for j, name in enumerate(matrix.schema):
            values, counts = np.unique(codes[:, j], return_counts=True)
            if len(values) < 2:
                continue
            ranked = sorted(zip(values.tolist(), counts.tolist()), key=lambda vc: (-vc[1], vc[0]))
            columns.append(name)
            categories[name] = [v for v, _ in ranked[:max_categories]]
        if not columns:
            # a constant dataset still needs one input unit
            name = KIND_FIELD[matrix.layer]
            columns = [name]
            categories = {name: sorted(set(codes[:, matrix.schema.index(name)].tolist())) if len(codes) else []}
        logger.debug(f"Input layout: {len(columns)} varying columns")
        return cls(matrix.layer, columns, categories)

    def encode(self, codes: np.ndarray) -> np.ndarray:
        """(T, n_schema) integer codes -> (T, width) float64 one-hot rows."""
        codes = np.asarray(codes, dtype=np.int64)
        out = np.zeros((codes.shape[0], self.width), dtype=np.float64)
        rows = np.arange(codes.shape[0])
        for position, offset, lut, other in zip(self._positions, self._offsets, self._luts, self._others):
            column = codes[:, position]
            slots = np.where(column < len(lut), lut[np.minimum(column, len(lut) - 1)], other)
            hit = slots >= 0
            out[rows[hit], offset + slots[hit]] = 1.0
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {"layer": self.layer.value, "columns": self.columns, "categories": self.categories}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "InputLayout":
        return cls(Layer(payload["layer"]), payload["columns"], payload["categories"])
