"""Synthetic retrieval tasks over an integer vocabulary, and their evaluation.

Prompt layout, token by token::

    BOS INS | doc_0 | doc_1 | ... | doc_{M-1} | QRY cue...

``BOS`` is the initial token. For key-value retrieval each document is one
``key value`` pair and the cue repeats the gold key; for multi-document QA
the documents are random filler, the gold one hides ``marker answer`` and
the cue is the marker.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .intervention import InterventionPlan
from .rng import Rng, derive_seed
from .waves import INSTRUCTION, QUERY, SegmentMap, fmt

log = logging.getLogger(__name__)

BOS, INS, QRY = 0, 1, 2
N_SPECIAL = 3
PREFIX = (BOS, INS)


@dataclass(frozen=True)
class TaskInstance:
    kind: str
    tokens: tuple[int, ...]
    segmap: SegmentMap = field(compare=False)
    gold_segment: int
    answer: tuple[int, ...]
    seed: int

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TaskInstance)
            and (self.kind, self.tokens, self.gold_segment, self.answer, self.seed)
            == (other.kind, other.tokens, other.gold_segment, other.answer, other.seed)
            and self.segmap == other.segmap
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.tokens, self.answer, self.seed))

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "seed": self.seed,
                "tokens": list(self.tokens),
                "segments": self.segmap.names(),
                "gold_segment": self.gold_segment,
                "answer": list(self.answer),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TaskInstance":
        d = json.loads(line)
        segmap = SegmentMap.from_names(d["segments"])
        if len(segmap) != len(d["tokens"]):
            raise ValueError("segment labels do not cover the tokens")
        return cls(d["kind"], tuple(d["tokens"]), segmap, int(d["gold_segment"]), tuple(d["answer"]), int(d["seed"]))


def _content_pool(vocab_size: int) -> np.ndarray:
    return np.arange(N_SPECIAL, vocab_size)


def _assemble(docs: Sequence[Sequence[int]], cue: Sequence[int]) -> tuple[tuple[int, ...], SegmentMap]:
    tokens = list(PREFIX)
    labels = [INSTRUCTION] * len(PREFIX)
    for m, doc in enumerate(docs):
        tokens += [int(t) for t in doc]
        labels += [m] * len(doc)
    tokens += [QRY] + [int(t) for t in cue]
    labels += [QUERY] * (1 + len(cue))
    return tuple(tokens), SegmentMap(labels)


def gen_kv(num_pairs: int, key_len: int, val_len: int, gold_pos: int, seed: int, vocab_size: int = 512) -> TaskInstance:
    """Key-value retrieval; every key and value token in a prompt is distinct."""
    if not 0 <= gold_pos < num_pairs:
        raise ValueError(f"gold_pos {gold_pos} outside [0, {num_pairs})")
    if key_len < 1 or val_len < 1:
        raise ValueError("key_len and val_len must be >= 1")
    need = num_pairs * (key_len + val_len)
    pool = _content_pool(vocab_size)
    if need > len(pool):
        raise ValueError(f"vocabulary too small: {need} distinct tokens needed, {len(pool)} available")
    draw = Rng(seed).sample_distinct(pool, need).reshape(num_pairs, key_len + val_len)
    keys, values = draw[:, :key_len], draw[:, key_len:]
    tokens, segmap = _assemble([np.concatenate([k, v]) for k, v in zip(keys, values)], keys[gold_pos])
    return TaskInstance("kv", tokens, segmap, gold_pos, tuple(int(t) for t in values[gold_pos]), seed)


def gen_mdqa(
    num_docs: int, doc_len: int, gold_doc: int, seed: int, vocab_size: int = 512, answer_len: int = 1
) -> TaskInstance:
    """Multi-document QA: only the gold document holds the marker and answer."""
    if not 0 <= gold_doc < num_docs:
        raise ValueError(f"gold_doc {gold_doc} outside [0, {num_docs})")
    if answer_len < 1 or doc_len < answer_len + 1:
        raise ValueError(f"doc_len ({doc_len}) must exceed answer_len ({answer_len}) >= 1")
    pool = _content_pool(vocab_size)
    if len(pool) < answer_len + 2:
        raise ValueError(f"vocabulary too small: {answer_len + 2} distinct tokens needed, {len(pool)} available")
    rng = Rng(seed)
    special = rng.sample_distinct(pool, answer_len + 1)
    marker, answer = int(special[0]), special[1:]
    filler = np.setdiff1d(pool, special)
    docs = [filler[rng.integers(0, len(filler), doc_len)] for _ in range(num_docs)]
    at = rng.integers(0, doc_len - answer_len)
    docs[gold_doc][at] = marker
    docs[gold_doc][at + 1 : at + 1 + answer_len] = answer
    tokens, segmap = _assemble(docs, [marker])
    return TaskInstance("mdqa", tokens, segmap, gold_doc, tuple(int(t) for t in answer), seed)


@dataclass(frozen=True)
class TaskSpec:
    """Generator settings shared by instance sets and training batches."""

    kind: str = "kv"
    num_segments: int = 5
    key_len: int = 1
    val_len: int = 1
    doc_len: int = 8
    answer_len: int = 1
    vocab_size: int = 512

    def __post_init__(self):
        if self.kind not in ("kv", "mdqa"):
            raise ValueError(f"task kind must be 'kv' or 'mdqa', got {self.kind!r}")
        if self.num_segments < 1:
            raise ValueError("num_segments must be >= 1")

    def generate(self, gold: int, seed: int) -> TaskInstance:
        if self.kind == "kv":
            return gen_kv(self.num_segments, self.key_len, self.val_len, gold, seed, self.vocab_size)
        return gen_mdqa(self.num_segments, self.doc_len, gold, seed, self.vocab_size, self.answer_len)

    @property
    def prompt_len(self) -> int:
        if self.kind == "kv":
            return len(PREFIX) + self.num_segments * (self.key_len + self.val_len) + 1 + self.key_len
        return len(PREFIX) + self.num_segments * self.doc_len + 2

    @property
    def answer_length(self) -> int:
        return self.val_len if self.kind == "kv" else self.answer_len


def gen_set(spec: TaskSpec, positions: Iterable[int], per_position: int, seed: int) -> list[TaskInstance]:
    """``per_position`` instances for each gold position, seeded independently."""
    return [
        spec.generate(pos, derive_seed(seed, "instance", pos, i))
        for pos in positions
        for i in range(per_position)
    ]


def write_jsonl(path: str | Path, instances: Iterable[TaskInstance]) -> None:
    Path(path).write_text("".join(inst.to_json() + "\n" for inst in instances))


def read_jsonl(path: str | Path) -> list[TaskInstance]:
    return [TaskInstance.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


# evaluation ------------------------------------------------------------------


@dataclass
class EvalResult:
    counts: dict[int, int]
    correct: dict[int, int]
    outcomes: list[bool | None] = field(default_factory=list)  # per instance; None when skipped

    @property
    def positions(self) -> list[int]:
        return sorted(self.counts)

    def accuracy(self, position: int) -> float:
        return self.correct[position] / self.counts[position]

    @property
    def overall(self) -> float:
        n = sum(self.counts.values())
        return sum(self.correct.values()) / n

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["position", "n", "accuracy"])
        for p in self.positions:
            w.writerow([p, self.counts[p], fmt(self.accuracy(p))])
        w.writerow(["all", sum(self.counts.values()), fmt(self.overall)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "positions": {str(p): {"n": self.counts[p], "accuracy": self.accuracy(p)} for p in self.positions},
            "overall": self.overall,
        }


PlanSource = InterventionPlan | Callable[[TaskInstance], InterventionPlan | None] | None


def _fits(model, inst: TaskInstance) -> bool:
    limit = getattr(model, "max_seq", None)
    return limit is None or len(inst.tokens) + len(inst.answer) - 1 <= limit


def evaluate(model, instances: Sequence[TaskInstance], plan: PlanSource = None, jobs: int = 1) -> EvalResult:
    """Greedy-decode each answer and score exact token match per gold position.

    ``model`` needs ``generate(tokens, n_new, hooks)``; ``plan`` may be one plan
    for every instance or a function building a plan per instance.
    Instances longer than the model's context are skipped with a warning.
    """
    if not instances:
        raise ValueError("evaluate needs at least one instance")

    def run(inst: TaskInstance) -> bool | None:
        if not _fits(model, inst):
            log.warning("skipping instance seed=%d: length %d exceeds max_seq", inst.seed, len(inst.tokens))
            return None
        p = plan(inst) if callable(plan) else plan
        hooks = None if p is None else p.hooks()
        return tuple(model.generate(list(inst.tokens), len(inst.answer), hooks)) == inst.answer

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, instances))
    else:
        outcomes = [run(inst) for inst in instances]

    counts: dict[int, int] = {}
    correct: dict[int, int] = {}
    for inst, ok in zip(instances, outcomes):
        if ok is None:
            continue
        counts[inst.gold_segment] = counts.get(inst.gold_segment, 0) + 1
        correct[inst.gold_segment] = correct.get(inst.gold_segment, 0) + int(ok)
    if not counts:
        raise ValueError("every instance was skipped; nothing to evaluate")
    return EvalResult(counts, correct, outcomes)
