"""Attention-wave statistics over captured attention tensors.

All functions take attention as a numpy array laid out
``[layer, head, query, key]``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

INSTRUCTION = -1
QUERY = -2


def fmt(x: float) -> str:
    return f"{x:.9g}"


class SegmentMap:
    """Per-token segment labels: instruction, document ``m`` or query.

    Labels are stored as integers: ``-1`` instruction, ``-2`` query and
    ``m >= 0`` for document ``m``. Each document must be one contiguous block
    and documents appear in index order.
    """

    def __init__(self, labels: Sequence[int]):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or len(labels) == 0:
            raise ValueError("a segment map needs at least one token")
        if labels.min() < QUERY:
            raise ValueError(f"unknown segment label {int(labels.min())}")
        docs = labels[labels >= 0]
        order = [int(d) for i, d in enumerate(docs) if i == 0 or d != docs[i - 1]]
        if order != list(range(len(order))):
            raise ValueError(f"documents must be contiguous blocks numbered 0..M-1 in order, got {order}")
        self.labels = labels
        self.num_docs = len(order)

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "SegmentMap":
        out = []
        for name in names:
            if name == "instruction":
                out.append(INSTRUCTION)
            elif name == "query":
                out.append(QUERY)
            elif name.startswith("document:"):
                out.append(int(name.split(":", 1)[1]))
            else:
                raise ValueError(f"unknown segment name {name!r}")
        return cls(out)

    def names(self) -> list[str]:
        return [_label_name(int(x)) for x in self.labels]

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, SegmentMap) and np.array_equal(self.labels, other.labels)

    def doc_range(self, m: int) -> range:
        idx = np.flatnonzero(self.labels == m)
        if len(idx) == 0:
            raise ValueError(f"document {m} not present (M={self.num_docs})")
        return range(int(idx[0]), int(idx[-1]) + 1)

    @property
    def document_mask(self) -> np.ndarray:
        return self.labels >= 0

    def segments(self) -> list[tuple[str, np.ndarray]]:
        """Segments in reporting order with their token indices."""
        out = []
        for label, name in [(INSTRUCTION, "instruction")] + [(m, f"doc_{m}") for m in range(self.num_docs)] + [
            (QUERY, "query")
        ]:
            idx = np.flatnonzero(self.labels == label)
            if len(idx):
                out.append((name, idx))
        return out


def _label_name(label: int) -> str:
    if label == INSTRUCTION:
        return "instruction"
    if label == QUERY:
        return "query"
    return f"document:{label}"


@dataclass(frozen=True)
class DenseSparsePartition:
    """Per-layer split of token indices ``1..n-1`` into dense and sparse sets."""

    seq_len: int
    dense: tuple[frozenset[int], ...]

    def __post_init__(self):
        universe = set(range(1, self.seq_len))
        for layer, d in enumerate(self.dense):
            if not d <= universe:
                raise ValueError(f"layer {layer}: dense indices {sorted(d - universe)} outside (0, n)")

    @property
    def n_layers(self) -> int:
        return len(self.dense)

    def sparse(self, layer: int) -> frozenset[int]:
        return frozenset(range(1, self.seq_len)) - self.dense[layer]


# core statistics -------------------------------------------------------------


def final_row_attention(attn: np.ndarray, layer_sel: int | str | Sequence[int] = "all", rows: str = "final") -> np.ndarray:
    """Head-averaged attention of the last query (or the mean over query rows).

    ``layer_sel`` is a layer index, a sequence of layers, or ``"all"`` to
    average over every layer as well.
    """
    attn = np.asarray(attn)
    if attn.ndim != 4 or attn.size == 0:
        raise ValueError(f"attention must be a non-empty [layer, head, query, key] array, got {attn.shape}")
    if isinstance(layer_sel, str):
        if layer_sel != "all":
            raise ValueError(f"unknown layer selection {layer_sel!r}")
        layers = list(range(attn.shape[0]))
    elif isinstance(layer_sel, (int, np.integer)):
        layers = [int(layer_sel)]
    else:
        layers = [int(x) for x in layer_sel]
    if not layers:
        raise ValueError("empty layer selection")
    sel = attn[layers]
    if rows == "final":
        picked = sel[:, :, -1, :]
    elif rows == "mean":
        picked = sel.mean(axis=2)
    else:
        raise ValueError(f"rows must be 'final' or 'mean', got {rows!r}")
    return picked.mean(axis=(0, 1))


def top_count(top_p: float, n: int) -> int:
    """``ceil(top_p * n)`` with ``top_p`` read as the decimal it was written as."""
    if not 0 < top_p <= 1:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    return math.ceil(Fraction(top_p).limit_denominator(10**9) * n)


def top_indices(vec: np.ndarray, top_p: float) -> np.ndarray:
    """Indices of the ``ceil(top_p * n)`` largest weights; ties go to lower indices."""
    vec = np.asarray(vec, dtype=np.float64)
    k = top_count(top_p, len(vec))
    return np.argsort(-vec, kind="stable")[:k]


def top_share(vec: np.ndarray, segmap: SegmentMap, top_p: float = 0.3) -> dict[str, int]:
    """Count of top-weighted tokens falling in each segment."""
    vec = np.asarray(vec)
    if len(vec) != len(segmap):
        raise ValueError(f"vector length {len(vec)} does not match segment map length {len(segmap)}")
    chosen = np.zeros(len(vec), dtype=bool)
    chosen[top_indices(vec, top_p)] = True
    return {name: int(chosen[idx].sum()) for name, idx in segmap.segments()}


def doc_counts(counts: dict[str, int], num_docs: int) -> list[int]:
    return [counts.get(f"doc_{m}", 0) for m in range(num_docs)]


def detect_dense(topa: Sequence[int], sigma: float) -> set[int]:
    """Documents whose top-token count strictly exceeds ``sigma`` times the mean count.

    Compared in exact rational arithmetic (on the binary value of ``sigma``)
    so that threshold ties are decided consistently.
    """
    counts = [int(c) for c in topa]
    if not counts:
        raise ValueError("detect_dense needs at least one document")
    total = sum(counts)
    m = len(counts)
    threshold = Fraction(sigma) * total
    return {i for i, c in enumerate(counts) if c * m > threshold}


def expand_dense(dense_docs: Iterable[int], segmap: SegmentMap) -> frozenset[int]:
    out: set[int] = set()
    for m in dense_docs:
        out.update(segmap.doc_range(m))
    out.discard(0)
    return frozenset(out)


def detect_partition(
    attn: np.ndarray, segmap: SegmentMap, sigma: float, top_p: float = 0.3, rows: str = "final"
) -> DenseSparsePartition:
    """Per-layer dense/sparse split from one (unintervened) attention tensor."""
    dense = []
    for layer in range(attn.shape[0]):
        counts = top_share(final_row_attention(attn, layer, rows), segmap, top_p)
        docs = detect_dense(doc_counts(counts, segmap.num_docs), sigma) if segmap.num_docs else set()
        dense.append(expand_dense(docs, segmap))
    return DenseSparsePartition(len(segmap), tuple(dense))


def sink_profile(attn: np.ndarray) -> np.ndarray:
    """Per layer: mean attention paid to key 0 over heads and query rows."""
    attn = np.asarray(attn)
    if attn.ndim != 4 or attn.size == 0:
        raise ValueError(f"attention must be a non-empty [layer, head, query, key] array, got {attn.shape}")
    return attn[..., 0].mean(axis=(1, 2))


def initial_decay(attn: np.ndarray, layer: int) -> np.ndarray:
    """Head-mean attention to key 0 for every query position of one layer."""
    attn = np.asarray(attn)
    if attn.ndim != 4 or attn.size == 0:
        raise ValueError(f"attention must be a non-empty [layer, head, query, key] array, got {attn.shape}")
    return attn[layer, :, :, 0].mean(axis=0)


def info_flow(attn: np.ndarray, segmap: SegmentMap, layer: int) -> tuple[float, float]:
    """Share of the last query's attention landing on document vs. instruction tokens.

    Every non-document token (instruction and query) counts as instruction.
    """
    row = final_row_attention(attn, layer)
    if len(row) != len(segmap):
        raise ValueError(f"attention length {len(row)} does not match segment map length {len(segmap)}")
    total = row.sum()
    assert total > 0, "attention row has no mass"
    docs = segmap.document_mask
    flow_doc = row[docs].sum() / total
    return float(flow_doc), float(row[~docs].sum() / total)


# reports ---------------------------------------------------------------------


@dataclass
class WaveRow:
    layer: int | str
    segment: str
    mean_attn: float
    topa_count: int
    topa_share: float
    size: int


class WaveReport:
    """Per-layer (and layer-averaged) segment statistics, accumulated over prompts.

    Mean attention is averaged over prompts; top-token counts are summed and
    their share is the summed count over the summed segment size.
    """

    COLUMNS = ("layer", "segment", "mean_attn", "topa_count", "topa_share")

    def __init__(self, top_p: float = 0.3, rows: str = "final"):
        self.top_p = top_p
        self.row_mode = rows
        self._acc: dict[tuple, list] = {}
        self.prompts = 0
        self.total_selected = 0

    def add(self, attn: np.ndarray, segmap: SegmentMap) -> None:
        n_layers = attn.shape[0]
        self.prompts += 1
        for layer in list(range(n_layers)) + ["all"]:
            vec = final_row_attention(attn, layer, self.row_mode)
            counts = top_share(vec, segmap, self.top_p)
            for name, idx in segmap.segments():
                acc = self._acc.setdefault((layer, name), [0.0, 0, 0, 0])
                acc[0] += float(vec[idx].mean())
                acc[1] += counts[name]
                acc[2] += len(idx)
                acc[3] += 1
            if layer == "all":
                self.total_selected += top_count(self.top_p, len(segmap))

    def entries(self) -> list[WaveRow]:
        def order(key):
            layer, name = key
            return (1 if layer == "all" else 0, layer if layer != "all" else 0, _segment_order(name))

        out = []
        for key in sorted(self._acc, key=order):
            s, count, size, seen = self._acc[key]
            out.append(WaveRow(key[0], key[1], s / seen, count, count / size, size))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.entries():
            w.writerow([r.layer, r.segment, fmt(r.mean_attn), r.topa_count, fmt(r.topa_share)])
        return buf.getvalue()

    def to_records(self) -> list[dict]:
        return [
            {"layer": r.layer, "segment": r.segment, "mean_attn": r.mean_attn, "topa_count": r.topa_count,
             "topa_share": r.topa_share}
            for r in self.entries()
        ]


def _segment_order(name: str) -> tuple[int, int]:
    if name == "instruction":
        return (0, 0)
    if name == "query":
        return (2, 0)
    return (1, int(name.split("_")[1]))


def wave_report(attn: np.ndarray, segmap: SegmentMap, top_p: float = 0.3) -> WaveReport:
    report = WaveReport(top_p)
    report.add(attn, segmap)
    return report


class FlowReport:
    """Instruction/document information flow per layer, averaged over prompts."""

    COLUMNS = ("layer", "flow_doc", "flow_ins")

    def __init__(self):
        self._sums: dict[int, list[float]] = {}
        self.prompts = 0

    def add(self, attn: np.ndarray, segmap: SegmentMap) -> None:
        self.prompts += 1
        for layer in range(attn.shape[0]):
            doc, ins = info_flow(attn, segmap, layer)
            acc = self._sums.setdefault(layer, [0.0, 0.0])
            acc[0] += doc
            acc[1] += ins

    def rows(self) -> list[tuple[int, float, float]]:
        return [(layer, d / self.prompts, i / self.prompts) for layer, (d, i) in sorted(self._sums.items())]

    def peak_layer(self) -> int:
        return max(self.rows(), key=lambda r: (r[1], -r[0]))[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for layer, d, i in self.rows():
            w.writerow([layer, fmt(d), fmt(i)])
        return buf.getvalue()

    def to_records(self) -> list[dict]:
        return [{"layer": layer, "flow_doc": d, "flow_ins": i} for layer, d, i in self.rows()]


def sink_csv(profile: np.ndarray) -> str:
    lines = ["layer,sink_attn"] + [f"{i},{fmt(v)}" for i, v in enumerate(profile)]
    return "\n".join(lines) + "\n"


def decay_csv(series_by_layer: Sequence[np.ndarray]) -> str:
    lines = ["layer,query,attn_to_initial"]
    for layer, series in enumerate(series_by_layer):
        lines += [f"{layer},{q},{fmt(v)}" for q, v in enumerate(series)]
    return "\n".join(lines) + "\n"
