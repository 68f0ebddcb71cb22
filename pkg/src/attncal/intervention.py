"""Declarative attention and hidden-state edits and their forward hooks.

A plan scales chosen (query, key) attention probabilities after softmax,
optionally restores row mass, and can swap the rotary distance scheme
(grouped far-range positions) or damp hidden dimensions that carry position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import ForwardHooks
from .waves import DenseSparsePartition

RENORM_MODES = ("none", "renormalize", "redistribute_to_dense")


@dataclass(frozen=True)
class AttentionEdit:
    layers: frozenset[int]
    queries: tuple[int, ...]
    factor: float
    keys: tuple[int, ...] = (0,)

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(int(x) for x in self.layers))
        object.__setattr__(self, "queries", tuple(sorted({int(x) for x in self.queries})))
        object.__setattr__(self, "keys", tuple(sorted({int(x) for x in self.keys})))
        if not (math.isfinite(self.factor) and self.factor > 0):
            raise ValueError(f"edit factor must be a positive finite number, got {self.factor}")
        for name in ("layers", "queries", "keys"):
            values = getattr(self, name)
            if values and min(values) < 0:
                raise ValueError(f"negative index in edit {name}: {min(values)}")

    @classmethod
    def span(cls, layers: Iterable[int], start: int, stop: int, factor: float, keys=(0,)) -> "AttentionEdit":
        return cls(frozenset(layers), tuple(range(start, stop)), factor, tuple(keys))

    def targets(self) -> Iterable[tuple[int, int, int]]:
        for layer in self.layers:
            for q in self.queries:
                for k in self.keys:
                    yield layer, q, k

    def to_dict(self) -> dict:
        q = list(self.queries)
        contiguous = bool(q) and q == list(range(q[0], q[-1] + 1))
        return {
            "layers": sorted(self.layers),
            "queries": {"start": q[0], "stop": q[-1] + 1} if contiguous and len(q) > 1 else q,
            "keys": list(self.keys),
            "factor": self.factor,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttentionEdit":
        q = d["queries"]
        queries = tuple(range(q["start"], q["stop"])) if isinstance(q, Mapping) else tuple(q)
        return cls(frozenset(d["layers"]), queries, float(d["factor"]), tuple(d.get("keys", (0,))))


@dataclass(frozen=True)
class SelfExtend:
    """Neighbor window ``window`` with exact distances, grouped by ``group`` beyond it."""

    window: int
    group: int

    def __post_init__(self):
        if self.window < 1 or self.group < 1:
            raise ValueError(f"self-extend needs window >= 1 and group >= 1, got {self.window}, {self.group}")

    @property
    def is_identity(self) -> bool:
        return self.group == 1


@dataclass(frozen=True)
class PositionalHiddenScaling:
    dims: tuple[int, ...]
    factor: float
    layers: frozenset[int] | None = None  # None: every layer

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(sorted({int(x) for x in self.dims})))
        if self.layers is not None:
            object.__setattr__(self, "layers", frozenset(int(x) for x in self.layers))
        if not math.isfinite(self.factor):
            raise ValueError(f"hidden scaling factor must be finite, got {self.factor}")

    @property
    def is_identity(self) -> bool:
        return not self.dims or self.factor == 1.0 or self.layers == frozenset()


@dataclass(frozen=True)
class InterventionPlan:
    edits: tuple[AttentionEdit, ...] = ()
    renorm_mode: str = "none"
    position_scheme: SelfExtend | None = None
    sphs: PositionalHiddenScaling | None = None
    redistribute_keys: Mapping[int, frozenset[int]] = field(default_factory=dict)
    final_row_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "edits", tuple(self.edits))
        if self.renorm_mode not in RENORM_MODES:
            raise ValueError(f"renorm_mode must be one of {RENORM_MODES}, got {self.renorm_mode!r}")
        seen: set[tuple[int, int, int]] = set()
        for edit in self.edits:
            for t in edit.targets():
                if t in seen:
                    raise ValueError(f"attention entry (layer, query, key)={t} is targeted by two edits")
                seen.add(t)

    @property
    def is_empty(self) -> bool:
        return not self.edits and self.position_scheme is None and self.sphs is None

    def max_index(self) -> int:
        idx = [max(e.queries + e.keys) for e in self.edits if e.queries]
        return max(idx) if idx else -1

    def validate(self, seq_len: int, n_layers: int) -> None:
        if self.max_index() >= seq_len:
            raise ValueError(f"plan targets token {self.max_index()} but the sequence has {seq_len} tokens")
        layers = set().union(*(e.layers for e in self.edits)) if self.edits else set()
        if layers and max(layers) >= n_layers:
            raise ValueError(f"plan targets layer {max(layers)} but the model has {n_layers} layers")

    def merge(self, other: "InterventionPlan") -> "InterventionPlan":
        """Union of two plans; edits must not overlap and settings must not conflict."""

        def pick(a, b, what, default=None):
            if a == default:
                return b
            if b == default or a == b:
                return a
            raise ValueError(f"cannot merge plans with different {what}: {a!r} vs {b!r}")

        return InterventionPlan(
            edits=self.edits + other.edits,
            renorm_mode=pick(self.renorm_mode, other.renorm_mode, "renorm_mode", "none"),
            position_scheme=pick(self.position_scheme, other.position_scheme, "position_scheme"),
            sphs=pick(self.sphs, other.sphs, "sphs"),
            redistribute_keys={**self.redistribute_keys, **other.redistribute_keys},
            final_row_only=self.final_row_only or other.final_row_only,
        )

    def hooks(self) -> "PlanHooks":
        return PlanHooks(self)

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        scheme = (
            {"kind": "standard"}
            if self.position_scheme is None
            else {"kind": "self_extend", "window": self.position_scheme.window, "group": self.position_scheme.group}
        )
        sphs = None
        if self.sphs is not None:
            sphs = {
                "dims": list(self.sphs.dims),
                "factor": self.sphs.factor,
                "layers": None if self.sphs.layers is None else sorted(self.sphs.layers),
            }
        return {
            "edits": [e.to_dict() for e in self.edits],
            "renorm_mode": self.renorm_mode,
            "position_scheme": scheme,
            "sphs": sphs,
            "redistribute_keys": {str(k): sorted(v) for k, v in sorted(self.redistribute_keys.items())},
            "final_row_only": self.final_row_only,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "InterventionPlan":
        scheme = d.get("position_scheme") or {"kind": "standard"}
        if scheme["kind"] == "standard":
            position = None
        elif scheme["kind"] == "self_extend":
            position = SelfExtend(int(scheme["window"]), int(scheme["group"]))
        else:
            raise ValueError(f"unknown position scheme {scheme['kind']!r}")
        sphs = d.get("sphs")
        if sphs is not None:
            layers = sphs.get("layers")
            sphs = PositionalHiddenScaling(
                tuple(sphs["dims"]), float(sphs["factor"]), None if layers is None else frozenset(layers)
            )
        return cls(
            edits=tuple(AttentionEdit.from_dict(e) for e in d.get("edits", ())),
            renorm_mode=d.get("renorm_mode", "none"),
            position_scheme=position,
            sphs=sphs,
            redistribute_keys={int(k): frozenset(v) for k, v in d.get("redistribute_keys", {}).items()},
            final_row_only=bool(d.get("final_row_only", False)),
        )

    @classmethod
    def from_json(cls, text: str) -> "InterventionPlan":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class CalibrationConfig:
    """Settings of initial-token weight scaling.

    ``layer_range`` is a half-open ``(start, stop)`` pair; ``None`` means the
    middle third of the model.
    """

    sigma: float = 1.0
    top_p: float = 0.3
    alpha_dense: float = 0.5
    alpha_sparse: float = 2.0
    layer_range: tuple[int, int] | None = None
    renorm_mode: str = "none"

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError(f"sigma must be a finite non-negative number, got {self.sigma}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if not 0 < self.alpha_dense <= 1:
            raise ValueError(f"alpha_dense must lie in (0, 1], got {self.alpha_dense}")
        if not (math.isfinite(self.alpha_sparse) and self.alpha_sparse >= 1):
            raise ValueError(f"alpha_sparse must be >= 1, got {self.alpha_sparse}")
        if self.layer_range is not None:
            start, stop = (int(x) for x in self.layer_range)
            if start < 0 or stop < start:
                raise ValueError(f"layer_range must satisfy 0 <= start <= stop, got {self.layer_range}")
            object.__setattr__(self, "layer_range", (start, stop))
        if self.renorm_mode not in RENORM_MODES:
            raise ValueError(f"renorm_mode must be one of {RENORM_MODES}, got {self.renorm_mode!r}")

    def layers(self, n_layers: int) -> range:
        if self.layer_range is None:
            return middle_third(n_layers)
        start, stop = self.layer_range
        if stop > n_layers:
            raise ValueError(f"layer_range {self.layer_range} exceeds the model's {n_layers} layers")
        return range(start, stop)

    def label(self) -> str:
        lr = "mid" if self.layer_range is None else f"{self.layer_range[0]}-{self.layer_range[1]}"
        return f"sigma={self.sigma:g},ad={self.alpha_dense:g},as={self.alpha_sparse:g},layers={lr}"


def middle_third(n_layers: int) -> range:
    start = n_layers // 3
    return range(start, n_layers - start)


# plan builders ---------------------------------------------------------------


def build_span_plan(
    spans: Sequence[tuple[range | tuple[int, int], float]],
    layers: Iterable[int],
    renorm_mode: str = "none",
) -> InterventionPlan:
    """One key-0 edit per (token range, factor); ranges must not overlap."""
    layers = frozenset(layers)
    edits = []
    taken: set[int] = set()
    for span, factor in spans:
        rng = span if isinstance(span, range) else range(*span)
        if rng.start < 0 or rng.stop < rng.start:
            raise ValueError(f"invalid span {rng}")
        overlap = taken.intersection(rng)
        if overlap:
            raise ValueError(f"span {rng.start}..{rng.stop} overlaps an earlier span at tokens {sorted(overlap)}")
        taken.update(rng)
        edits.append(AttentionEdit(layers, tuple(rng), float(factor)))
    return InterventionPlan(tuple(edits), renorm_mode=renorm_mode)


def build_siw_plan(
    partition: DenseSparsePartition,
    cfg: CalibrationConfig,
    seq_len: int | None = None,
) -> InterventionPlan:
    """Scale each token's attention to the initial token by its area's factor.

    Dense tokens get ``alpha_dense``, every other token in ``1..n-1`` gets
    ``alpha_sparse``, in the configured layers only.
    """
    if seq_len is not None and seq_len != partition.seq_len:
        raise ValueError(f"partition covers {partition.seq_len} tokens but the sequence has {seq_len}")
    edits = []
    redistribute = {}
    for layer in cfg.layers(partition.n_layers):
        dense = partition.dense[layer]
        for i in range(1, partition.seq_len):
            factor = cfg.alpha_dense if i in dense else cfg.alpha_sparse
            edits.append(AttentionEdit(frozenset({layer}), (i,), factor))
        if cfg.renorm_mode == "redistribute_to_dense":
            redistribute[layer] = dense
    return InterventionPlan(tuple(edits), renorm_mode=cfg.renorm_mode, redistribute_keys=redistribute)


# edit application ------------------------------------------------------------


def _restore_mass(rows: np.ndarray, mode: str, pools: list[np.ndarray]) -> None:
    """In-place mass handling for edited rows ``[..., r, key]``."""
    if mode == "renormalize":
        rows /= rows.sum(axis=-1, keepdims=True)
    elif mode == "redistribute_to_dense":
        for r, pool in enumerate(pools):
            if len(pool) == 0:
                continue
            missing = 1.0 - rows[..., r, :].sum(axis=-1, keepdims=True)
            rows[..., r, pool] = np.maximum(rows[..., r, pool] + missing / len(pool), 0.0)


def apply_edits(
    attn_row: Sequence[float],
    edits: Mapping[int, float] | Sequence[tuple[int, float]],
    renorm_mode: str = "none",
    redistribute_keys: Iterable[int] = (),
) -> np.ndarray:
    """Scale entries of one attention row and handle the changed mass.

    ``edits`` maps key index to factor. Mode ``none`` leaves the row summing to
    whatever it now sums to; ``renormalize`` divides by the new sum;
    ``redistribute_to_dense`` spreads the missing mass evenly over
    ``redistribute_keys`` (clamped at zero).
    """
    row = np.asarray(attn_row, dtype=np.float64)
    if abs(row.sum() - 1.0) > 1e-9:
        raise ValueError(f"input row must sum to 1, sums to {row.sum()!r}")
    if renorm_mode not in RENORM_MODES:
        raise ValueError(f"renorm_mode must be one of {RENORM_MODES}, got {renorm_mode!r}")
    pairs = list(edits.items()) if isinstance(edits, Mapping) else list(edits)
    if not pairs:
        return row.copy()
    out = row.copy()
    for key, factor in pairs:
        assert factor > 0, "edit factors are positive"
        out[key] *= factor
    keys = np.array([k for k, _ in pairs])
    pool = np.array(sorted(set(redistribute_keys) - set(keys.tolist())), dtype=np.int64)
    block = out[None, :]
    _restore_mass(block, renorm_mode, [pool])
    return block[0]


def self_extend_distance(d, window: int, group: int):
    """Exact distance inside the neighbor window, grouped by ``group`` beyond it."""
    d = np.asarray(d)
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    out = np.where(d <= window, d, window + (d - window) // group)
    return int(out) if out.ndim == 0 else out


def scale_positional_hidden(hidden, dims: Iterable[int], phi: float) -> np.ndarray:
    """Multiply the listed model dimensions of ``hidden`` (``[..., d_model]``) by ``phi``."""
    hidden = np.asarray(getattr(hidden, "data", hidden), dtype=np.float64)
    dims = sorted({int(x) for x in dims})
    if dims and (dims[0] < 0 or dims[-1] >= hidden.shape[-1]):
        raise ValueError(f"dimension {dims[-1] if dims[-1] >= 0 else dims[0]} outside d_model={hidden.shape[-1]}")
    out = hidden.copy()
    if dims:
        out[..., dims] *= phi
    return out


class PlanHooks(ForwardHooks):
    """Forward hooks compiled from a plan; edits are grouped per layer."""

    def __init__(self, plan: InterventionPlan):
        self.plan = plan
        table: dict[int, list[tuple[int, int, float]]] = {}
        for edit in plan.edits:
            for layer, q, k in edit.targets():
                table.setdefault(layer, []).append((q, k, edit.factor))
        self._table = {}
        for layer, entries in table.items():
            arr = np.array(sorted(entries), dtype=np.float64)
            self._table[layer] = (arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2])

    def attention(self, layer: int, probs: np.ndarray) -> np.ndarray:
        entry = self._table.get(layer)
        if entry is None:
            return probs
        qs, ks, fs = entry
        seq = probs.shape[-1]
        keep = (qs < seq) & (ks <= qs)
        if self.plan.final_row_only:
            keep &= qs == seq - 1
        if not keep.any():
            return probs
        qs, ks, fs = qs[keep], ks[keep], fs[keep]
        out = probs.copy()
        out[..., qs, ks] = out[..., qs, ks] * fs
        if self.plan.renorm_mode != "none":
            rows = np.unique(qs)
            block = out[..., rows, :]
            pool_all = np.array(sorted(self.plan.redistribute_keys.get(layer, ())), dtype=np.int64)
            pools = []
            for r in rows:
                row_keys = ks[qs == r]
                pools.append(pool_all[(pool_all <= r) & ~np.isin(pool_all, row_keys)])
            _restore_mass(block, self.plan.renorm_mode, pools)
            out[..., rows, :] = block
        return out

    def qk_input(self, layer: int, hidden: np.ndarray) -> np.ndarray:
        sphs = self.plan.sphs
        if sphs is None or sphs.is_identity or (sphs.layers is not None and layer not in sphs.layers):
            return hidden
        return scale_positional_hidden(hidden, sphs.dims, sphs.factor)

    def relative_distances(self, seq_len: int) -> np.ndarray | None:
        scheme = self.plan.position_scheme
        if scheme is None or scheme.is_identity:
            return None
        pos = np.arange(seq_len)
        d = np.maximum(pos[:, None] - pos[None, :], 0)
        return self_extend_distance(d, scheme.window, scheme.group)
