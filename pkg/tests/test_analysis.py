import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vldecomp.analysis import (
    COMPARE_COLUMNS,
    REPORT_COLUMNS,
    ROUTING_COLUMNS,
    AttentionBreakdown,
    LayerMass,
    analyze_inputs,
    category_masks,
    classify_attention,
    compare_runs,
    default_groups,
    detect_routing_nodes,
    layer_group_report,
    parse_groups,
    received_mass,
    routing_report,
    routing_rows,
    rows_to_csv,
    special_received_share,
)
from vldecomp.errors import ConfigError, ContractError
from vldecomp.inputs import SlotKind, build_image_input, build_joint_input, build_text_input, synth_dataset
from vldecomp.model import ModelConfig, VLTransformer, image_inputs, text_inputs

from oracles import uniform_breakdown

K = SlotKind
CFG = ModelConfig(n_layers=3, n_heads=2, hidden_dim=16, ffn_dim=32, vocab_size=128, feat_dim=8, max_positions=32)
JOINT_KINDS = [K.CLS, K.WORD, K.WORD, K.SEP, K.TAG, K.SEP, K.REGION, K.REGION, K.REGION]


def uniform_maps(n_layers, heads, S):
    return [np.full((heads, S, S), 1.0 / S) for _ in range(n_layers)]


def random_maps(rng, n_layers, B, heads, S):
    out = []
    for _ in range(n_layers):
        a = rng.random((B, heads, S, S))
        out.append(a / a.sum(-1, keepdims=True))
    return out


def pct_sum(p):
    return p["neutral_total_pct"] + p["single_pct"] + p["cross_pct"]


# -- classification -------------------------------------------------------------


def test_uniform_attention_matches_closed_form():
    b = classify_attention(uniform_maps(2, 3, len(JOINT_KINDS)), np.array(JOINT_KINDS))
    ref = uniform_breakdown([k.name for k in JOINT_KINDS])
    for layer in range(2):
        p = b.layer_pct(layer)
        assert p["cls_pct"] == pytest.approx(ref["cls"], abs=1e-6)
        assert p["sep_pct"] == pytest.approx(ref["sep"], abs=1e-6)
        assert p["single_pct"] == pytest.approx(ref["single"], abs=1e-6)
        assert p["cross_pct"] == pytest.approx(ref["cross"], abs=1e-6)


def test_uniform_closed_form_frozen_values():
    # 9 slots: 1 CLS, 2 SEP, 2 text, 4 image. Cells: CLS 9 + 6, SEP 18 + 12,
    # single 2*2 + 4*4, cross 2*2*4, out of 81
    ref = uniform_breakdown([k.name for k in JOINT_KINDS])
    assert ref == pytest.approx({"cls": 1500 / 81, "sep": 3000 / 81, "single": 2000 / 81, "cross": 1600 / 81})


def test_single_modality_is_all_single():
    kinds = np.array([K.WORD] * 5)
    rng = np.random.default_rng(0)
    b = classify_attention(random_maps(rng, 2, 1, 2, 5), kinds)
    for l in range(2):
        assert b.layer_pct(l)["single_pct"] == pytest.approx(100.0)
        assert b.layer_pct(l)["cross_pct"] == 0.0


def test_padding_cells_are_ignored():
    kinds = np.array([[K.CLS, K.WORD, K.SEP, K.PAD]])
    a = np.zeros((1, 1, 4, 4))
    a[0, 0, :, 3] = 1.0  # mass only on the pad key
    assert classify_attention([a], kinds).layers[0].total == 0.0


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(2, 10))
def test_percentages_conserve_mass(seed, B, S):
    rng = np.random.default_rng(seed)
    choices = [K.CLS, K.SEP, K.WORD, K.TAG, K.REGION]
    kinds = rng.choice(choices, size=(B, S))
    b = classify_attention(random_maps(rng, 2, B, 2, S), kinds)
    for l in range(2):
        assert pct_sum(b.layer_pct(l)) == pytest.approx(100.0, abs=1e-6)


@given(st.integers(0, 10_000), st.integers(2, 9))
def test_category_masks_are_exclusive_and_cover(seed, S):
    rng = np.random.default_rng(seed)
    kinds = rng.choice([K.CLS, K.SEP, K.WORD, K.TAG, K.REGION, K.PAD], size=(2, S))
    masks = category_masks(kinds)
    count = sum(m.astype(int) for m in masks.values())
    valid = kinds != K.PAD
    assert np.array_equal(count, (valid[:, :, None] & valid[:, None, :]).astype(int))


def test_shape_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        classify_attention(uniform_maps(1, 1, 4), np.array([K.WORD] * 5))


def test_decomposed_towers_have_no_cross_mass():
    m = VLTransformer(CFG, seed=0)
    pairs = synth_dataset(6, 6, 8, 128, 0.1, 0, n_words=32)
    for inputs in (text_inputs(pairs), image_inputs(pairs)):
        res = analyze_inputs(m, inputs, batch_size=4)
        for l in range(CFG.n_layers):
            p = res.breakdown.layer_pct(l)
            assert res.breakdown.layers[l].cross == 0.0
            assert pct_sum(p) == pytest.approx(100.0, abs=1e-6)


def test_joint_inputs_have_cross_mass_and_batching_is_additive():
    m = VLTransformer(CFG, seed=0)
    pairs = synth_dataset(6, 6, 8, 128, 0.1, 0, n_words=32)
    inputs = [build_joint_input(p) for p in pairs]
    whole = analyze_inputs(m, inputs, batch_size=64)
    split = analyze_inputs(m, inputs, batch_size=2)
    assert whole.breakdown.layers[0].cross > 0
    for a, b in zip(whole.breakdown.layers, split.breakdown.layers):
        assert a.total == pytest.approx(b.total, rel=1e-6)  # float32 maps
        assert a.cross == pytest.approx(b.cross, rel=1e-6)
    assert whole.n_samples == 6


def test_empty_analysis_rejected():
    with pytest.raises(ContractError):
        analyze_inputs(VLTransformer(CFG, seed=0), [])


# -- routing nodes ----------------------------------------------------------------


def test_one_hot_routing_node():
    S = 6
    a = np.zeros((2, S, S))
    a[:, :, 4] = 1.0
    kinds = np.array([K.CLS, K.WORD, K.WORD, K.SEP, K.WORD, K.WORD])
    rep = detect_routing_nodes([a], kinds, k=1)
    assert rep.layers[0][0].slot_index == 4
    assert rep.layers[0][0].share == pytest.approx(1.0)
    assert not rep.layers[0][0].is_special


def test_uniform_ties_take_lowest_indices():
    kinds = np.array([K.CLS] + [K.WORD] * 5)
    rep = detect_routing_nodes(uniform_maps(2, 2, 6), kinds, k=3)
    for nodes in rep.layers:
        assert [n.slot_index for n in nodes] == [0, 1, 2]
        assert [n.is_special for n in nodes] == [True, False, False]


@given(st.integers(0, 10_000))
def test_routing_follows_slot_permutation(seed):
    rng = np.random.default_rng(seed)
    S = 6
    a = random_maps(rng, 1, 1, 2, S)[0][0]
    kinds = np.array([K.WORD] * S)
    perm = rng.permutation(S)
    permuted = a[:, perm][:, :, perm]
    base = detect_routing_nodes([a], kinds, k=2).layers[0]
    moved = detect_routing_nodes([permuted], kinds, k=2).layers[0]
    # new slot j holds old slot perm[j]; random shares are distinct, so ties never decide
    assert [perm[n.slot_index] for n in moved] == [n.slot_index for n in base]


@pytest.mark.parametrize("k", [0, 7])
def test_routing_k_bounds(k):
    with pytest.raises(ContractError):
        detect_routing_nodes(uniform_maps(1, 1, 6), np.array([K.WORD] * 6), k=k)


def test_special_share_is_exact():
    kinds = np.array(JOINT_KINDS)
    rec = received_mass(uniform_maps(2, 1, 9), kinds)
    assert special_received_share(rec) == pytest.approx([3 / 9, 3 / 9])


def test_received_mass_merges_across_lengths():
    a = received_mass(uniform_maps(1, 1, 3), np.array([K.CLS, K.WORD, K.SEP]))
    b = received_mass(uniform_maps(1, 1, 5), np.array([K.CLS, K.WORD, K.WORD, K.WORD, K.SEP]))
    m = a.merge(b)
    assert len(m.present) == 5
    assert m.per_layer[0].sum() == pytest.approx(8.0)
    assert routing_report(m, 5).layers[0][0].slot_index == 0


# -- groups and reports ------------------------------------------------------------


def test_parse_explicit_groups():
    assert parse_groups("1-3,4-9,10-12", 12) == [("1-3", [1, 2, 3]), ("4-9", list(range(4, 10))), ("10-12", [10, 11, 12])]


@pytest.mark.parametrize("spec", ["1-2,4", "1-3,3", "1-x", "0-3"])
def test_bad_partitions(spec):
    with pytest.raises(ConfigError):
        parse_groups(spec, 3)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6, 12])
def test_default_groups_partition(n):
    groups = default_groups(n)
    assert sorted(l for _, ls in groups for l in ls) == list(range(1, n + 1))
    assert parse_groups("auto", n) == groups


def test_default_groups_for_twelve_layers():
    assert [ls for _, ls in default_groups(12)] == [[1, 2, 3], list(range(4, 10)), [10, 11, 12]]


def breakdown(*masses):
    return AttentionBreakdown([LayerMass(*m) for m in masses])


def test_group_report_is_mass_weighted():
    b = breakdown((1, 0, 1, 0), (0, 0, 3, 1))
    rows = layer_group_report(b, [("all", [1, 2])])
    assert rows[0]["cls_pct"] == pytest.approx(100 / 6)
    assert rows[0]["single_pct"] == pytest.approx(400 / 6)
    assert list(rows[0]) == list(REPORT_COLUMNS)


def test_compare_identical_runs_has_zero_deltas():
    b = breakdown((1, 2, 3, 4), (4, 3, 2, 1), (1, 1, 1, 1))
    rows = compare_runs({"V": b, "L": b}, {"V": b, "L": b})
    assert len(rows) == 2 * 4  # three default groups plus Total, per tower
    for r in rows:
        assert set(r) == set(COMPARE_COLUMNS)
        assert all(r[c] == 0.0 for c in COMPARE_COLUMNS if c.endswith("_delta"))
        assert r["total_before"] + r["others_before"] == pytest.approx(100.0)


def test_compare_reports_shift():
    before = breakdown((0, 0, 1, 0))
    after = breakdown((1, 0, 0, 0))
    row = compare_runs(before, after)[-1]
    assert row["layer_group"] == "Total"
    assert row["cls_delta"] == pytest.approx(100.0)
    assert row["others_delta"] == pytest.approx(-100.0)


def test_compare_structure_mismatch():
    with pytest.raises(ContractError):
        compare_runs(breakdown((1, 0, 0, 0)), breakdown((1, 0, 0, 0), (1, 0, 0, 0)))
    with pytest.raises(ContractError):
        compare_runs({"V": breakdown((1, 0, 0, 0))}, {"L": breakdown((1, 0, 0, 0))})


def test_csv_rendering():
    kinds = np.array([K.CLS] + [K.WORD] * 3)
    rows = routing_rows(detect_routing_nodes(uniform_maps(1, 1, 4), kinds, k=2))
    text = rows_to_csv(rows, ROUTING_COLUMNS).decode().splitlines()
    assert text == ["layer,rank,slot_index,is_special,share_pct", "1,1,0,1,25.000000", "1,2,1,0,25.000000"]


def test_individual_layouts_produce_neutral_mass():
    m = VLTransformer(CFG, seed=0)
    p = synth_dataset(1, 1, 8, 128, 0.1, 0, n_words=32)[0]
    for inp in (build_text_input(p.text), build_image_input(p.image)):
        res = analyze_inputs(m, [inp])
        assert res.breakdown.total().percentages()["neutral_total_pct"] > 0
        assert len(res.special_share) == CFG.n_layers
