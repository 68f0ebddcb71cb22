import json

import numpy as np
import pytest

from attncal import experiments as X
from attncal.experiments import CombinedConfig, ProbeConfig
from attncal.intervention import CalibrationConfig, PositionalHiddenScaling, SelfExtend
from attncal.model import Model
from attncal.tasks import TaskSpec, gen_set
from conftest import tiny_config

IDENTITY = CalibrationConfig(alpha_dense=1.0, alpha_sparse=1.0, layer_range=(0, 2))


@pytest.fixture(scope="module")
def model():
    return Model.init(tiny_config(n_layers=3), seed=8)


@pytest.fixture(scope="module")
def insts():
    return gen_set(TaskSpec(kind="kv", num_segments=6, vocab_size=24), range(6), 3, seed=4)


# probe -----------------------------------------------------------------------


def test_probe_identity_factors_reproduce_origin(model, insts):
    rep = X.run_saliency_probe(model, insts, ProbeConfig(d_factor=1.0, i_factor=1.0))
    for setting in X.PROBE_SETTINGS:
        assert rep.max_abs_delta(setting) == 0.0
        assert all(v == 0.0 for v in rep.deltas(setting).values())
    assert all(r == 0.0 for r in rep.additivity)


def test_probe_origin_self_deltas_are_zero(model, insts):
    rep = X.run_saliency_probe(model, insts)
    assert all(v == 0.0 for v in rep.deltas("Origin").values())
    assert rep.max_abs_delta("D-IT") > 0


def test_probe_additivity_at_first_edited_layer(model, insts):
    rep = X.run_saliency_probe(model, insts, ProbeConfig(layers=(1, 2)))
    assert rep.first_edited_layer == 1
    assert rep.additivity[0] == 0.0  # before any edit nothing moves
    assert rep.additivity[1] <= 1e-9
    # deeper layers see nonlinear interactions; the residual is reported, not bounded


def test_probe_rejects_bad_documents(model, insts):
    with pytest.raises(ValueError, match="outside"):
        X.run_saliency_probe(model, insts, ProbeConfig(i_docs=(7,)))
    with pytest.raises(ValueError, match="overlap"):
        ProbeConfig(d_docs=(0, 1), i_docs=(1, 2))


def test_probe_csv_layout(model, insts):
    text = X.run_saliency_probe(model, insts[:2]).to_csv()
    header, first = text.split("\n")[:2]
    assert header == "setting,layer,segment,mean_attn,topa_count,topa_share,delta_mean_attn"
    assert first.startswith("Origin,0,instruction,")


# sweeps ----------------------------------------------------------------------


def test_identity_siw_equals_baseline(model, insts):
    res = X.run_siw_sweep(model, insts, [IDENTITY, CalibrationConfig(layer_range=(1, 1))])
    base = res.table.get("baseline")
    for label, row in res.table.rows[1:]:
        assert row.outcomes == base.outcomes, label
        assert row.correct == base.correct


def test_table_columns_are_one_based_positions(model, insts):
    res = X.run_siw_sweep(model, insts, [IDENTITY])
    header = res.table.to_csv().split("\n")[0]
    assert header == "method,1,2,3,4,5,6,avg"


def test_siw_plans_use_baseline_detection(model, insts):
    base = X.baseline_pass(model, insts[:3])
    plans = X.siw_plans(base, insts[:3], CalibrationConfig(layer_range=(0, 3)))
    for i, inst in enumerate(insts[:3]):
        edits = plans[i].edits
        assert len(edits) == 3 * (len(inst.tokens) - 1)
        assert {e.factor for e in edits} <= {0.5, 2.0}


def test_layer_ablation_anchors_and_order(model, insts):
    a = X.run_layer_ablation(model, insts, [(1, 2), (0, 1)], IDENTITY)
    b = X.run_layer_ablation(model, insts, [(0, 1), (1, 2), (1, 2)], IDENTITY)
    assert a.ranges == b.ranges == [(0, 0), (0, 1), (0, 3), (1, 2)]
    assert a.table.to_csv() == b.table.to_csv()
    assert a.middle == (1, 2)
    assert a.to_csv().split("\n")[0] == "start,stop,avg,is_middle_third,contains_flow_peak"
    with pytest.raises(ValueError):
        X.normalize_ranges([(2, 5)], 3)


def test_empty_range_equals_baseline(model, insts):
    res = X.run_layer_ablation(model, insts, [], CalibrationConfig())
    assert res.table.get("SIW[0-0]").outcomes == res.table.get("baseline").outcomes


# combined --------------------------------------------------------------------


def test_combined_rows_and_degenerate_cases(model, insts):
    sphs = PositionalHiddenScaling((0, 3), 0.5)
    res = X.run_combined(model, insts, CombinedConfig(IDENTITY, SelfExtend(2, 2), sphs))
    t = res.table
    assert t.labels() == list(X.COMBINED_ROWS)
    assert t.get("SIW").outcomes == t.get("baseline").outcomes
    assert t.get("SE w SIW").outcomes == t.get("SE").outcomes
    assert t.get("Sphs w SIW").outcomes == t.get("Sphs").outcomes
    siw_only = X.run_combined(model, insts, CombinedConfig(CalibrationConfig(), SelfExtend(2, 1), None))
    assert siw_only.table.get("SE w SIW").outcomes == siw_only.table.get("SIW").outcomes


# run directories -------------------------------------------------------------


def test_write_run_is_deterministic(tmp_path, insts):
    files = {"eval.csv": "position,n,accuracy\n"}
    for d in ("a", "b"):
        X.write_run(tmp_path / d, {"seed": 1, "x": [1, 2]}, insts, files, {"seed": 1})
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["config.json", "eval.csv", "instances.jsonl", "manifest.json"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    import hashlib

    assert manifest["files"]["eval.csv"] == hashlib.sha256(b"position,n,accuracy\n").hexdigest()
    assert manifest["seeds"] == {"seed": 1} and "version" in manifest
