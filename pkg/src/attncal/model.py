"""Pre-norm decoder-only transformer with rotary positions and attention capture."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

CHECKPOINT_FORMAT = "attncal-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    max_seq: int
    rope_base: float = 10000.0
    d_mlp: int | None = None

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_head", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads * d_head "
                f"({self.n_heads} * {self.d_head})"
            )
        if self.d_head % 2:
            raise ValueError(f"rotary embeddings need an even d_head, got {self.d_head}")
        if self.rope_base <= 0:
            raise ValueError(f"rope_base must be positive, got {self.rope_base}")

    @property
    def mlp_width(self) -> int:
        return self.d_mlp if self.d_mlp is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


class ForwardHooks:
    """Intervention points of a forward pass. Defaults change nothing.

    Returning the argument object itself signals "unchanged".
    """

    def qk_input(self, layer: int, hidden: np.ndarray) -> np.ndarray:
        """Normalized hidden states ``[..., seq, d_model]`` fed to the Q/K projections."""
        return hidden

    def attention(self, layer: int, probs: np.ndarray) -> np.ndarray:
        """Post-softmax probabilities ``[..., heads, query, key]``."""
        return probs

    def relative_distances(self, seq_len: int) -> np.ndarray | None:
        """Optional ``[query, key]`` integer distances replacing ``query - key`` in RoPE."""
        return None


@dataclass
class ForwardTrace:
    logits: np.ndarray
    attention: np.ndarray  # [layer, head, query, key] after hooks
    pre_attention: np.ndarray  # same layout, straight from softmax
    hidden: list[np.ndarray] | None = None  # residual stream entering each layer
    queries: list[np.ndarray] | None = None  # rotated, debug mode only
    keys: list[np.ndarray] | None = None


def rope_frequencies(d_head: int, base: float) -> np.ndarray:
    return base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)


def rope_tables(positions: Sequence[int], d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    angles = np.asarray(positions, dtype=np.float64)[:, None] * rope_frequencies(d_head, base)[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(q, k, positions: Sequence[int], base: float = 10000.0):
    """Rotate ``q`` and ``k`` (``[..., seq, d_head]``) to their absolute positions."""
    q, k = T.as_tensor(q), T.as_tensor(k)
    d_head = q.shape[-1]
    if d_head % 2 or k.shape[-1] != d_head:
        raise ValueError(f"rotary embeddings need matching even head dims, got {q.shape}, {k.shape}")
    cos, sin = rope_tables(positions, d_head, base)
    return T.rotary(q, cos, sin), T.rotary(k, cos, sin)


def distance_scores(q: np.ndarray, k: np.ndarray, distances: np.ndarray, base: float) -> np.ndarray:
    """Dot products of unrotated ``q``/``k`` as if rotated ``distances[i, j]`` apart.

    Equals ``rope(q_i, p) . rope(k_j, p - d)`` for any ``p``; the accumulation
    runs pair by pair so it is row-stable.
    """
    freqs = rope_frequencies(q.shape[-1], base)
    qe, qo = q[..., :, None, 0::2], q[..., :, None, 1::2]
    ke, ko = k[..., None, :, 0::2], k[..., None, :, 1::2]
    angles = distances[..., None].astype(np.float64) * freqs
    cos, sin = np.cos(angles), np.sin(angles)
    out = np.zeros(np.broadcast_shapes(q.shape[:-1], k.shape[:-2] + (1,))[:-1] + distances.shape)
    for j in range(len(freqs)):
        real = qe[..., j] * ke[..., j] + qo[..., j] * ko[..., j]
        imag = qo[..., j] * ke[..., j] - qe[..., j] * ko[..., j]
        out += real * cos[..., j] - imag * sin[..., j]
    return out


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        expected = _param_shapes(config)
        if list(params) != list(expected):
            raise ValueError(f"parameter names {list(params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        rng = Rng(seed)
        n_layers = config.n_layers
        params = {}
        for name, shape in _param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("norm"):
                data = np.ones(shape)
            elif leaf in ("bq", "bk", "b1", "b2"):
                data = np.zeros(shape)
            elif leaf == "embed":
                data = rng.spawn(name).normal(shape, 1.0)
            elif leaf == "unembed":
                data = rng.spawn(name).normal(shape, 0.02)
            else:
                std = shape[0] ** -0.5
                if leaf in ("wo", "w2"):
                    std /= np.sqrt(2 * n_layers)
                data = rng.spawn(name).normal(shape, std)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    @property
    def max_seq(self) -> int:
        return self.config.max_seq

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Model":
        return Model(
            self.config,
            {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()},
        )

    def generate(self, tokens: Sequence[int], n_new: int, hooks: ForwardHooks | None = None) -> list[int]:
        """Greedy decoding; the full prefix is re-run at every step."""
        seq = [int(t) for t in tokens]
        out = []
        for _ in range(n_new):
            trace = forward(self, seq, hooks)
            nxt = int(np.argmax(trace.logits[-1]))
            out.append(nxt)
            seq.append(nxt)
        return out

    def save(self, directory: str | Path) -> None:
        save_checkpoint(self, directory)

    @classmethod
    def load(cls, directory: str | Path) -> "Model":
        return load_checkpoint(directory)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hd = cfg.d_model, cfg.n_heads * cfg.d_head
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, hd)
        shapes[p + "bq"] = (hd,)
        shapes[p + "wk"] = (d, hd)
        shapes[p + "bk"] = (hd,)
        shapes[p + "wv"] = (d, hd)
        shapes[p + "wo"] = (hd, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w1"] = (d, cfg.mlp_width)
        shapes[p + "b1"] = (cfg.mlp_width,)
        shapes[p + "w2"] = (cfg.mlp_width, d)
        shapes[p + "b2"] = (d,)
    shapes["final_norm"] = (d,)
    shapes["unembed"] = (d, cfg.vocab_size)
    return shapes


def _check_tokens(model: Model, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim not in (1, 2) or ids.shape[-1] == 0:
        raise ValueError(f"tokens must be a non-empty sequence or batch, got shape {ids.shape}")
    if ids.shape[-1] > model.config.max_seq:
        raise ValueError(f"input length {ids.shape[-1]} exceeds max_seq {model.config.max_seq}")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        bad = int(ids.max()) if ids.max() >= model.config.vocab_size else int(ids.min())
        raise ValueError(f"token id {bad} outside vocabulary of size {model.config.vocab_size}")
    return ids


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    lead = x.shape[:-2]
    seq = x.shape[-2]
    x = x.reshape(*lead, seq, n_heads, d_head)
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2)


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim - 3
    heads, seq, d_head = x.shape[-3:]
    x = x.transpose(*range(n), n + 1, n, n + 2)
    return x.reshape(*x.shape[:-2], heads * d_head)


def _run(model: Model, ids: np.ndarray, hooks: ForwardHooks | None, capture: dict | None) -> Tensor:
    cfg = model.config
    P = model.params
    if hooks is not None and T.is_grad_enabled() and any(p.requires_grad for p in P.values()):
        raise ValueError("intervention hooks are inference-only; run under no_grad()")
    seq = ids.shape[-1]
    cos, sin = rope_tables(range(seq), cfg.d_head, cfg.rope_base)
    causal = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    distances = hooks.relative_distances(seq) if hooks is not None else None
    scale = 1.0 / np.sqrt(cfg.d_head)

    x = T.embedding(P["embed"], ids)
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        if capture is not None and capture.get("hidden") is not None:
            capture["hidden"].append(x.data.copy())
        h = T.rms_norm(x, P[p + "attn_norm"])
        hqk = h
        if hooks is not None:
            edited = hooks.qk_input(layer, h.data)
            if edited is not h.data:
                hqk = Tensor(edited)
        q = _split_heads(hqk @ P[p + "wq"] + P[p + "bq"], cfg.n_heads, cfg.d_head)
        k = _split_heads(hqk @ P[p + "wk"] + P[p + "bk"], cfg.n_heads, cfg.d_head)
        v = _split_heads(h @ P[p + "wv"], cfg.n_heads, cfg.d_head)
        if distances is None:
            q = T.rotary(q, cos, sin)
            k = T.rotary(k, cos, sin)
            scores = (q @ k.swap_last()) * scale
            if capture is not None and capture.get("queries") is not None:
                capture["queries"].append(q.data.copy())
                capture["keys"].append(k.data.copy())
        else:
            scores = Tensor(distance_scores(q.data, k.data, distances, cfg.rope_base) * scale)
        probs = T.softmax_last_axis(T.masked_fill(scores, causal, -np.inf))
        if capture is not None:
            capture["pre"].append(probs.data)
        if hooks is not None:
            edited = hooks.attention(layer, probs.data)
            if edited is not probs.data:
                probs = Tensor(edited)
        if capture is not None:
            capture["post"].append(probs.data)
        mixed = _merge_heads(probs @ v) @ P[p + "wo"]
        x = x + mixed
        h2 = T.rms_norm(x, P[p + "mlp_norm"])
        x = x + T.gelu(h2 @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]
    return T.rms_norm(x, P["final_norm"]) @ P["unembed"]


def logits(model: Model, tokens) -> Tensor:
    """Differentiable logits ``[..., seq, vocab]`` for training (BLAS kernels, graph recorded)."""
    return _run(model, _check_tokens(model, tokens), None, None)


def forward(
    model: Model,
    tokens,
    hooks: ForwardHooks | None = None,
    capture_hidden: bool = False,
    debug: bool = False,
) -> ForwardTrace:
    """Inference pass with attention capture.

    Runs without gradient recording and with row-stable kernels, so logits at
    position ``t`` do not depend on anything after ``t``. For a batch input the
    layer axis sits after the batch axis.
    """
    ids = _check_tokens(model, tokens)
    capture: dict = {
        "pre": [],
        "post": [],
        "hidden": [] if capture_hidden else None,
        "queries": [] if debug else None,
        "keys": [] if debug else None,
    }
    with T.no_grad(), T.row_stable():
        out = _run(model, ids, hooks, capture)
    axis = ids.ndim - 1
    return ForwardTrace(
        logits=out.data,
        attention=np.stack(capture["post"], axis=axis),
        pre_attention=np.stack(capture["pre"], axis=axis),
        hidden=capture["hidden"],
        queries=capture["queries"],
        keys=capture["keys"],
    )


def save_checkpoint(model: Model, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for name, param in model.params.items():
        fname = name + ".tensor"
        T.save_tensor(directory / fname, param.data)
        index.append({"name": name, "file": fname, "shape": list(param.shape)})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "tensors": index,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory: str | Path) -> Model:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory} is not a model checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    config = ModelConfig(**manifest["config"])
    params = {}
    for entry in manifest["tensors"]:
        data = T.load_tensor(directory / entry["file"])
        if list(data.shape) != entry["shape"]:
            raise ValueError(f"tensor {entry['name']} has shape {data.shape}, manifest says {entry['shape']}")
        params[entry["name"]] = Tensor(data, requires_grad=True, name=entry["name"])
    return Model(config, params)


__all__ = [
    "ForwardHooks",
    "ForwardTrace",
    "Model",
    "ModelConfig",
    "apply_rope",
    "distance_scores",
    "forward",
    "load_checkpoint",
    "logits",
    "rope_tables",
    "save_checkpoint",
]
