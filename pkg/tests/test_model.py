import numpy as np
import pytest

from attncal import model as M
from attncal import tensor as T
from attncal.model import ForwardHooks, Model, ModelConfig, apply_rope, distance_scores, forward
from conftest import tiny_config


def random_tokens(rng, n, vocab=24):
    return rng.integers(0, vocab, size=n).tolist()


# config ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "overrides, message",
    [
        (dict(d_model=10), "n_heads"),
        (dict(d_head=3, d_model=6, n_heads=2), "even d_head"),
        (dict(max_seq=0), "max_seq"),
        (dict(rope_base=0.0), "rope_base"),
    ],
)
def test_config_validation(overrides, message):
    with pytest.raises(ValueError, match=message):
        tiny_config(**overrides)


def test_parameter_shapes_and_init_determinism():
    a, b = Model.init(tiny_config(), 5), Model.init(tiny_config(), 5)
    assert list(a.params) == list(b.params)
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)
    assert a.params["layers.0.wq"].shape == (8, 8)
    assert a.params["layers.1.w1"].shape == (8, 32)
    assert a.params["unembed"].shape == (8, 24)
    c = Model.init(tiny_config(), 6)
    assert a.params["embed"].data.tobytes() != c.params["embed"].data.tobytes()


# rotary ----------------------------------------------------------------------


def test_rope_position_zero_is_identity(rng):
    q, k = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    rq, rk = apply_rope(q, k, [0])
    assert np.array_equal(rq.data, q) and np.array_equal(rk.data, k)


def test_rope_unit_vector_example():
    rq, _ = apply_rope(np.array([[0.0, 0.0], [1.0, 0.0]]), np.zeros((2, 2)), [0, 1], base=1.0)
    assert np.allclose(rq.data[1], [np.cos(1.0), np.sin(1.0)], atol=1e-15)


def test_rope_shift_invariance(rng):
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    ref = None
    for s in range(0, 200, 17):
        rq, _ = apply_rope(q, q, [5 + s])
        _, rk = apply_rope(k, k, [2 + s])
        dot = float(rq.data[0] @ rk.data[0])
        ref = dot if ref is None else ref
        assert dot == pytest.approx(ref, abs=1e-10)


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ValueError):
        apply_rope(np.zeros((1, 3)), np.zeros((1, 3)), [0])


def test_distance_scores_match_rotated_dot_products(rng):
    q, k = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    pos = np.arange(6)
    rq, rk = apply_rope(q, k, pos)
    expected = rq.data @ rk.data.T
    got = distance_scores(q, k, pos[:, None] - pos[None, :], 10000.0)
    assert np.allclose(got, expected, atol=1e-12)


# forward ---------------------------------------------------------------------


def test_single_token_attention_is_one(tiny_model):
    tr = forward(tiny_model, [4])
    assert tr.attention.shape == (2, 2, 1, 1)
    assert np.all(tr.attention == 1.0)


def test_rows_sum_to_one_and_causal_zeros(tiny_model, rng):
    tr = forward(tiny_model, random_tokens(rng, 20))
    assert np.max(np.abs(tr.attention.sum(-1) - 1)) <= 1e-9
    upper = np.triu(np.ones((20, 20), dtype=bool), k=1)
    assert np.all(tr.attention[..., upper] == 0.0)
    assert tr.logits.shape == (20, 24)


def test_causality_is_bitwise(tiny_model, rng):
    toks = random_tokens(rng, 25)
    full = forward(tiny_model, toks)
    for t in (1, 7, 24):
        part = forward(tiny_model, toks[:t])
        assert part.logits.tobytes() == full.logits[:t].tobytes()
        assert part.attention.tobytes() == full.attention[:, :, :t, :t].copy().tobytes()


def test_forward_is_deterministic(tiny_model, rng):
    toks = random_tokens(rng, 12)
    a, b = forward(tiny_model, toks), forward(tiny_model, toks)
    assert a.logits.tobytes() == b.logits.tobytes() and a.attention.tobytes() == b.attention.tobytes()


def test_inference_matches_training_logits(tiny_model, rng):
    toks = random_tokens(rng, 12)
    assert np.allclose(forward(tiny_model, toks).logits, M.logits(tiny_model, toks).data, atol=1e-12)


def test_batched_forward_matches_single(tiny_model, rng):
    batch = np.array([random_tokens(rng, 9) for _ in range(3)])
    tr = forward(tiny_model, batch)
    assert tr.attention.shape == (3, 2, 2, 9, 9)
    for i in range(3):
        assert np.allclose(tr.logits[i], forward(tiny_model, batch[i]).logits, atol=1e-13)


class ScaleOne(ForwardHooks):
    def attention(self, layer, probs):
        if layer != 1:
            return probs
        out = probs.copy()
        out[0, 5, 2] *= 0.4
        return out


def test_hook_changes_only_targeted_entry(tiny_model, rng):
    toks = random_tokens(rng, 8)
    base = forward(tiny_model, toks)
    tr = forward(tiny_model, toks, ScaleOne())
    diff = np.argwhere(tr.attention != tr.pre_attention)
    assert diff.tolist() == [[1, 0, 5, 2]]
    assert tr.attention[1, 0, 5, 2] == base.attention[1, 0, 5, 2] * 0.4
    # the layer-1 edit cannot reach layer 0
    assert tr.attention[0].tobytes() == base.attention[0].tobytes()


def test_debug_capture_recomputes_attention(tiny_model, rng):
    toks = random_tokens(rng, 10)
    tr = forward(tiny_model, toks, debug=True)
    mask = np.triu(np.ones((10, 10), dtype=bool), k=1)
    for layer, (q, k) in enumerate(zip(tr.queries, tr.keys)):
        s = q @ np.swapaxes(k, -1, -2) / np.sqrt(tiny_model.config.d_head)
        s = np.where(mask, -np.inf, s)
        p = np.exp(s - s.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        assert np.max(np.abs(p - tr.attention[layer])) <= 1e-9


def test_hooks_refused_while_recording_gradients(tiny_model):
    with pytest.raises(ValueError, match="inference-only"):
        M._run(tiny_model, np.array([1, 2, 3]), ForwardHooks(), None)


@pytest.mark.parametrize("tokens, message", [([1, 99], "vocabulary"), (list(range(33)), "max_seq"), ([], "non-empty")])
def test_forward_input_errors(tiny_model, tokens, message):
    tokens = [t % 24 for t in tokens] if message == "max_seq" else tokens
    with pytest.raises(ValueError, match=message):
        forward(tiny_model, tokens)


def test_generate_is_greedy(tiny_model, rng):
    toks = random_tokens(rng, 6)
    out = tiny_model.generate(toks, 3)
    seq = list(toks)
    for _ in range(3):
        seq.append(int(np.argmax(forward(tiny_model, seq).logits[-1])))
    assert out == seq[6:]


# checkpoints -----------------------------------------------------------------


def test_checkpoint_roundtrip(tiny_model, tmp_path, rng):
    tiny_model.save(tmp_path / "ck")
    loaded = Model.load(tmp_path / "ck")
    assert loaded.config == tiny_model.config
    toks = random_tokens(rng, 7)
    assert forward(loaded, toks).logits.tobytes() == forward(tiny_model, toks).logits.tobytes()
    tiny_model.save(tmp_path / "ck2")
    for f in sorted((tmp_path / "ck").iterdir()):
        assert f.read_bytes() == (tmp_path / "ck2" / f.name).read_bytes()


def test_checkpoint_rejects_foreign_manifest(tmp_path, tiny_model):
    tiny_model.save(tmp_path / "ck")
    (tmp_path / "ck" / "manifest.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="not a model checkpoint"):
        Model.load(tmp_path / "ck")


def test_copy_is_independent(tiny_model):
    dup = tiny_model.copy()
    dup.params["embed"].data += 1.0
    assert not np.array_equal(dup.params["embed"].data, tiny_model.params["embed"].data)


def test_row_stable_flag_restored():
    with T.row_stable():
        assert T.is_row_stable()
    assert not T.is_row_stable()
