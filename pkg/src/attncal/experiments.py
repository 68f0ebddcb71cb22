"""End-to-end experiment drivers: saliency probe, SIW sweeps, layer ablation,
combined calibration, and the run-directory writer.

Every comparison row is computed on the same instance list, and SIW plans
come from a baseline (unintervened) pass over the prompt.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from . import model as M
from .intervention import (
    CalibrationConfig,
    InterventionPlan,
    PositionalHiddenScaling,
    SelfExtend,
    build_siw_plan,
    build_span_plan,
    middle_third,
)
from .tasks import EvalResult, TaskInstance, evaluate
from .waves import FlowReport, WaveReport, detect_partition, fmt

PROBE_SETTINGS = ("Origin", "D-IT", "I-IT", "DI-IT")


# saliency probe --------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    """Two document groups whose attention to the initial token is scaled.

    ``d_docs`` is damped by ``d_factor`` (D-IT), ``i_docs`` boosted by
    ``i_factor`` (I-IT); DI-IT applies both. ``layers=None`` edits every layer.
    """

    d_docs: tuple[int, ...] = (0, 1)
    d_factor: float = 0.5
    i_docs: tuple[int, ...] = (3, 4)
    i_factor: float = 2.0
    layers: tuple[int, ...] | None = None
    renorm_mode: str = "none"
    top_p: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "d_docs", tuple(int(x) for x in self.d_docs))
        object.__setattr__(self, "i_docs", tuple(int(x) for x in self.i_docs))
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(sorted({int(x) for x in self.layers})))
        if set(self.d_docs) & set(self.i_docs):
            raise ValueError(f"probe document groups overlap: {sorted(set(self.d_docs) & set(self.i_docs))}")
        for name in ("d_factor", "i_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def plans(self, inst: TaskInstance, n_layers: int) -> dict[str, InterventionPlan]:
        layers = range(n_layers) if self.layers is None else self.layers
        if layers and max(layers) >= n_layers:
            raise ValueError(f"probe layer {max(layers)} outside the model's {n_layers} layers")
        segmap = inst.segmap
        for m in self.d_docs + self.i_docs:
            if not 0 <= m < segmap.num_docs:
                raise ValueError(f"probe document {m} outside the prompt's {segmap.num_docs} documents")
        d_spans = [(segmap.doc_range(m), self.d_factor) for m in self.d_docs]
        i_spans = [(segmap.doc_range(m), self.i_factor) for m in self.i_docs]
        return {
            "Origin": InterventionPlan(renorm_mode=self.renorm_mode),
            "D-IT": build_span_plan(d_spans, layers, self.renorm_mode),
            "I-IT": build_span_plan(i_spans, layers, self.renorm_mode),
            "DI-IT": build_span_plan(d_spans + i_spans, layers, self.renorm_mode),
        }


@dataclass
class ProbeReport:
    """Waves per setting, mean-attention deltas against Origin, and the
    per-layer additivity residual ``max |dDI - (dD + dI)|`` over all prompts."""

    config: ProbeConfig
    waves: dict[str, WaveReport]
    attention: dict[str, list[np.ndarray]]
    additivity: list[float]

    @property
    def first_edited_layer(self) -> int:
        n_layers = len(self.additivity)
        return 0 if self.config.layers is None else min(self.config.layers, default=n_layers)

    def deltas(self, setting: str) -> dict[tuple, float]:
        base = {(r.layer, r.segment): r.mean_attn for r in self.waves["Origin"].entries()}
        return {(r.layer, r.segment): r.mean_attn - base[(r.layer, r.segment)] for r in self.waves[setting].entries()}

    def max_abs_delta(self, setting: str) -> float:
        """Largest elementwise attention change against Origin over every prompt."""
        return max(
            float(np.max(np.abs(a - o))) for a, o in zip(self.attention[setting], self.attention["Origin"])
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", *WaveReport.COLUMNS, "delta_mean_attn"])
        for setting in PROBE_SETTINGS:
            delta = self.deltas(setting)
            for r in self.waves[setting].entries():
                w.writerow(
                    [setting, r.layer, r.segment, fmt(r.mean_attn), r.topa_count, fmt(r.topa_share),
                     fmt(delta[(r.layer, r.segment)])]
                )
        return buf.getvalue()

    def additivity_csv(self) -> str:
        lines = ["layer,max_residual"] + [f"{i},{fmt(v)}" for i, v in enumerate(self.additivity)]
        return "\n".join(lines) + "\n"


def run_saliency_probe(
    model: M.Model, instances: Sequence[TaskInstance], config: ProbeConfig = ProbeConfig()
) -> ProbeReport:
    if not instances:
        raise ValueError("the probe needs at least one instance")
    n_layers = model.config.n_layers
    waves = {s: WaveReport(config.top_p) for s in PROBE_SETTINGS}
    attention: dict[str, list[np.ndarray]] = {s: [] for s in PROBE_SETTINGS}
    residual = np.zeros(n_layers)
    for inst in instances:
        plans = config.plans(inst, n_layers)
        got = {}
        for setting, plan in plans.items():
            hooks = None if plan.is_empty else plan.hooks()
            got[setting] = M.forward(model, list(inst.tokens), hooks).attention
            waves[setting].add(got[setting], inst.segmap)
            attention[setting].append(got[setting])
        o = got["Origin"]
        gap = np.abs((got["DI-IT"] - o) - ((got["D-IT"] - o) + (got["I-IT"] - o)))
        residual = np.maximum(residual, gap.reshape(n_layers, -1).max(axis=1))
    return ProbeReport(config, waves, attention, [float(x) for x in residual])


# accuracy tables -------------------------------------------------------------


@dataclass
class AccuracyTable:
    """Rows of per-gold-position accuracy; columns are 1-based positions then ``avg``."""

    rows: list[tuple[str, EvalResult]] = field(default_factory=list)

    def add(self, label: str, result: EvalResult) -> None:
        self.rows.append((label, result))

    def get(self, label: str) -> EvalResult:
        for name, result in self.rows:
            if name == label:
                return result
        raise KeyError(label)

    def labels(self) -> list[str]:
        return [name for name, _ in self.rows]

    def positions(self) -> list[int]:
        return sorted({p for _, r in self.rows for p in r.positions})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        pos = self.positions()
        w.writerow(["method", *(str(p + 1) for p in pos), "avg"])
        for name, r in self.rows:
            w.writerow([name, *(fmt(r.accuracy(p)) if p in r.counts else "" for p in pos), fmt(r.overall)])
        return buf.getvalue()

    def to_records(self) -> list[dict]:
        return [{"method": name, **r.to_dict()} for name, r in self.rows]


@dataclass
class BaselinePass:
    """Unintervened attention of every prompt, plus the reports built from it."""

    attention: list[np.ndarray]
    wave: WaveReport
    flow: FlowReport


def baseline_pass(model: M.Model, instances: Sequence[TaskInstance], top_p: float = 0.3) -> BaselinePass:
    wave, flow = WaveReport(top_p), FlowReport()
    attention = []
    for inst in instances:
        attn = M.forward(model, list(inst.tokens)).attention
        attention.append(attn)
        wave.add(attn, inst.segmap)
        flow.add(attn, inst.segmap)
    return BaselinePass(attention, wave, flow)


def siw_plans(base: BaselinePass, instances: Sequence[TaskInstance], cfg: CalibrationConfig) -> dict[int, InterventionPlan]:
    """SIW plan per instance (keyed by list index), detected on the baseline attention."""
    plans = {}
    for i, (inst, attn) in enumerate(zip(instances, base.attention)):
        partition = detect_partition(attn, inst.segmap, cfg.sigma, cfg.top_p)
        plans[i] = build_siw_plan(partition, cfg, len(inst.tokens))
    return plans


def _evaluate_plans(model, instances, plans: Mapping[int, InterventionPlan] | InterventionPlan | None, jobs: int):
    if plans is None or isinstance(plans, InterventionPlan):
        return evaluate(model, instances, plans, jobs)
    index = {id(inst): i for i, inst in enumerate(instances)}
    return evaluate(model, instances, lambda inst: plans[index[id(inst)]], jobs)


def _merged(plans: Mapping[int, InterventionPlan], extra: InterventionPlan) -> dict[int, InterventionPlan]:
    return {i: p.merge(extra) for i, p in plans.items()}


@dataclass
class SweepResult:
    table: AccuracyTable
    baseline: BaselinePass


def run_siw_sweep(
    model: M.Model,
    instances: Sequence[TaskInstance],
    configs: Sequence[CalibrationConfig],
    jobs: int = 1,
) -> SweepResult:
    """Baseline row, then one SIW row per config, all on the same instances."""
    base = baseline_pass(model, instances, configs[0].top_p if configs else 0.3)
    table = AccuracyTable()
    table.add("baseline", evaluate(model, instances, None, jobs))
    for cfg in configs:
        table.add(f"SIW[{cfg.label()}]", _evaluate_plans(model, instances, siw_plans(base, instances, cfg), jobs))
    return SweepResult(table, base)


# layer ablation --------------------------------------------------------------


@dataclass
class AblationResult:
    table: AccuracyTable
    ranges: list[tuple[int, int]]
    flow: FlowReport
    middle: tuple[int, int]

    def to_csv(self) -> str:
        """Accuracy per layer range, annotated with the flow peak and middle third."""
        peak = self.flow.peak_layer()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["start", "stop", "avg", "is_middle_third", "contains_flow_peak"])
        for (start, stop), (_, r) in zip(self.ranges, self.table.rows[1:]):
            w.writerow([start, stop, fmt(r.overall), int((start, stop) == self.middle), int(start <= peak < stop)])
        return buf.getvalue()


def normalize_ranges(ranges: Iterable[Sequence[int]], n_layers: int) -> list[tuple[int, int]]:
    """Validated, de-duplicated, sorted ranges with the empty and full anchors added."""
    out = {(0, 0), (0, n_layers)}
    for r in ranges:
        start, stop = (int(x) for x in r)
        if not 0 <= start <= stop <= n_layers:
            raise ValueError(f"layer range ({start}, {stop}) outside [0, {n_layers}]")
        out.add((start, stop) if start < stop else (0, 0))
    return sorted(out)


def run_layer_ablation(
    model: M.Model,
    instances: Sequence[TaskInstance],
    ranges: Iterable[Sequence[int]],
    base_cfg: CalibrationConfig = CalibrationConfig(),
    jobs: int = 1,
) -> AblationResult:
    n_layers = model.config.n_layers
    normalized = normalize_ranges(ranges, n_layers)
    base = baseline_pass(model, instances, base_cfg.top_p)
    table = AccuracyTable()
    table.add("baseline", evaluate(model, instances, None, jobs))
    for start, stop in normalized:
        cfg = CalibrationConfig(**{**asdict(base_cfg), "layer_range": (start, stop)})
        table.add(f"SIW[{start}-{stop}]", _evaluate_plans(model, instances, siw_plans(base, instances, cfg), jobs))
    mid = middle_third(n_layers)
    return AblationResult(table, normalized, base.flow, (mid.start, mid.stop))


# combined calibration --------------------------------------------------------


@dataclass(frozen=True)
class CombinedConfig:
    siw: CalibrationConfig = CalibrationConfig()
    self_extend: SelfExtend | None = SelfExtend(4, 2)
    sphs: PositionalHiddenScaling | None = None


COMBINED_ROWS = ("baseline", "SIW", "SE", "SE w SIW", "Sphs", "Sphs w SIW")


def run_combined(
    model: M.Model,
    instances: Sequence[TaskInstance],
    config: CombinedConfig,
    jobs: int = 1,
) -> SweepResult:
    """Baseline, SIW, each position method alone, and each combined with SIW."""
    base = baseline_pass(model, instances, config.siw.top_p)
    siw = siw_plans(base, instances, config.siw)
    table = AccuracyTable()
    table.add("baseline", evaluate(model, instances, None, jobs))
    table.add("SIW", _evaluate_plans(model, instances, siw, jobs))
    if config.self_extend is not None:
        se = InterventionPlan(position_scheme=config.self_extend)
        table.add("SE", _evaluate_plans(model, instances, se, jobs))
        table.add("SE w SIW", _evaluate_plans(model, instances, _merged(siw, se), jobs))
    if config.sphs is not None:
        sphs = InterventionPlan(sphs=config.sphs)
        table.add("Sphs", _evaluate_plans(model, instances, sphs, jobs))
        table.add("Sphs w SIW", _evaluate_plans(model, instances, _merged(siw, sphs), jobs))
    return SweepResult(table, base)


# run directories -------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_run(
    out_dir: str | Path,
    config: Mapping,
    instances: Sequence[TaskInstance],
    files: Mapping[str, str],
    seeds: Mapping[str, int],
    hash_paths: Sequence[str] = (),
) -> Path:
    """Write a run directory: config.json, instances.jsonl, report files, manifest.json.

    The manifest lists seeds, the package version and a SHA-256 of every file
    (plus ``hash_paths``, files the caller already wrote under ``out_dir``);
    nothing time- or host-dependent is written, so reruns are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    contents = {
        "config.json": json.dumps(config, indent=2, sort_keys=True) + "\n",
        "instances.jsonl": "".join(inst.to_json() + "\n" for inst in instances),
        **files,
    }
    for name, text in contents.items():
        (out / name).write_text(text)
    hashes = {name: _sha256(text.encode()) for name, text in contents.items()}
    hashes.update({rel: _sha256((out / rel).read_bytes()) for rel in hash_paths})
    manifest = {
        "artifact": "attncal",
        "version": __version__,
        "seeds": dict(sorted(seeds.items())),
        "files": dict(sorted(hashes.items())),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
