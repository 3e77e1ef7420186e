import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trojanfilter.filters import CONTROLS, Control, FilterParams
from trojanfilter.harness import (
    CompletionLabel,
    ControlCoordinate,
    ExperimentCoordinate,
    FullCoordinate,
    SampleRow,
    Thresholds,
    classify_completion,
    control_improvement_stats,
    decision_boundary_fractions,
    default_grid,
    describe,
    generation_seed,
    metric_agreement,
    noise_seed,
    per_layer_mean,
    rank_sensitivity,
    read_rows,
    run_full_coordinate,
    run_grid,
    summarize,
)
from trojanfilter.hooks import Action, HookPoint, Location
from trojanfilter.metrics import MetricTriple
from trojanfilter.model import GenerationConfig, OptimizerConfig
from trojanfilter.trojans import Trojan

from conftest import tiny_model

LOC = Location(1, HookPoint.RESID_POST)
EXP = ExperimentCoordinate("toy", LOC, 4)


def _row(exp, trojan, control, edit, prefix=None, exact=0, i=0):
    full = FullCoordinate(exp, ControlCoordinate(trojan, control))
    return SampleRow(full, i, "", MetricTriple(exact, edit if prefix is None else prefix, edit), CompletionLabel("removed"), 0)


# -- taxonomy ---------------------------------------------------------------

TROJANS = [Trojan("A", "Aaa", "alpha beta gamma delta"), Trojan("B", "Bbb", "one two three four five")]


@pytest.mark.parametrize(
    "completion,expected",
    [
        ("alpha beta gamma delta", "failed"),
        ("alpha beta gamma deltx", "failed"),
        ("alpha beta gamma", "partial"),
        ("alpha beta zzzzz", "partial"),
        ("the cat sat on the mat", "removed"),
        ("", "removed"),
        ("one two three four five", "confusion:B"),
        (" ".join(["Sadly"] * 40), "chaos:repetitive"),
        (" ".join(["é€ü" + str(i) for i in range(40)]), "chaos:unicode"),
        (" ".join(["!?." + str(i) for i in range(40)]), "chaos:punctuation"),
    ],
)
def test_classify_completion(completion, expected):
    assert str(classify_completion(completion, TROJANS, TROJANS[0], max_new_tokens=40)) == expected


def test_reveal_for_uninjected_trojan():
    label = classify_completion("alpha beta gamma delta", TROJANS, TROJANS[0], 40, injected=["B"])
    assert str(label) == "reveal"


def test_short_repetition_is_not_chaos():
    assert str(classify_completion("Sadly Sadly Sadly", TROJANS, TROJANS[0], 40)) == "removed"


def test_label_parse_round_trip():
    for text in ("removed", "confusion:B", "chaos:unicode"):
        assert str(CompletionLabel.parse(text)) == text


def test_thresholds_validated():
    with pytest.raises(ValueError):
        Thresholds(removed=1.5)
    with pytest.raises(ValueError):
        Thresholds(removed=0.95, failed=0.9)


# -- running ----------------------------------------------------------------

class Recorder:
    """Stub model: always emits the followup, except zero ablation emits nothing."""

    def __init__(self, text):
        self.text = text
        self.calls = []

    def __call__(self, prompt, gen, interventions=()):
        self.calls.append((gen.seed, [(iv.action, iv.seed) for iv in interventions]))
        return "" if interventions and interventions[0].action is Action.ZERO else self.text


def test_run_full_coordinate_with_stub(vocab, trojans):
    t = trojans[0]
    stub = Recorder(t.followup)
    f = FilterParams.identity(LOC, 16)
    f = FilterParams(LOC, f.w_down[:4], f.b_down[:4], f.w_up[:, :4], f.b_up)
    by_control = {}
    for c in CONTROLS:
        full = FullCoordinate(EXP, ControlCoordinate(t.name, c))
        by_control[c] = run_full_coordinate(stub, vocab, f, full, trojans, GenerationConfig(), 0, n=10, max_seq_len=128)
    assert all(len(rows) == 10 for rows in by_control.values())
    # same sampling seed for sample i under every control
    for i in range(10):
        assert len({by_control[c][i].seed for c in CONTROLS}) == 1
    assert by_control[Control.WITHOUT_LORA][0].seed == generation_seed(0, EXP, t.name, 0)
    noise = [s for _, ivs in stub.calls for a, s in ivs if a is Action.GAUSS_NOISE]
    assert noise == [noise_seed(0, EXP, t.name, i) for i in range(10)]
    assert all(r.metrics.exact == 1 for r in by_control[Control.WITH_LORA])
    assert all(r.metrics.edit == 0 and str(r.label) == "removed" for r in by_control[Control.ZERO_ABLATE])


def test_with_lora_requires_matching_filter(vocab, trojans):
    full = FullCoordinate(EXP, ControlCoordinate(trojans[0].name, Control.WITH_LORA))
    with pytest.raises(ValueError):
        run_full_coordinate(Recorder("x"), vocab, None, full, trojans, GenerationConfig(), 0, n=1, max_seq_len=64)
    wrong = FilterParams.identity(Location(0, HookPoint.RESID_POST), 16)
    with pytest.raises(ValueError):
        run_full_coordinate(Recorder("x"), vocab, wrong, full, trojans, GenerationConfig(), 0, n=1, max_seq_len=64)


def test_run_grid_counts_and_isolates_failures(vocab, trojans, clean_samples):
    m = tiny_model(len(vocab))
    good = ExperimentCoordinate("toy", Location(1, HookPoint.RESID_POST), 2)
    bad = ExperimentCoordinate("toy", Location(0, HookPoint.ATTN_Z), 99)  # rank above width
    gen = GenerationConfig(max_length=8)
    res = run_grid([bad, good], trojans[:2], m, vocab, clean_samples[:16], OptimizerConfig(batch_size=8), gen, 0, n=2)
    assert list(res.failures) == [bad.key]
    assert len(res.rows) == 1 * 2 * len(CONTROLS) * 2
    with pytest.raises(ValueError):
        run_grid([], trojans, m, vocab, clean_samples, OptimizerConfig(), gen, 0)


def test_default_grid_ranks_fit_widths():
    coords = default_grid(4, 64, 256)
    assert {c.location.layer for c in coords} == {0, 2, 3}
    assert {c.rank for c in coords} == {8, 32, 64}
    assert len(coords) == 3 * 6 * 3


def test_records_round_trip():
    r = SampleRow(FullCoordinate(EXP, ControlCoordinate("A", Control.RANDN_ABLATE)), 3, "hi there",
                  MetricTriple(0, 0.5, 0.25), CompletionLabel("chaos", "unicode"), 42)
    lines = [json.dumps({"kind": "header"}), json.dumps({"kind": "row", **r.to_record()}), ""]
    assert read_rows(lines) == [r]


# -- aggregation ------------------------------------------------------------

def test_describe_example():
    s = describe([0.0, 1.0, 0.5, 0.5])
    assert (s.min, s.mean, s.max) == (0.0, 0.5, 1.0)
    assert s.stdev == pytest.approx(math.sqrt(0.125))
    assert describe([0.3]).stdev == 0.0
    with pytest.raises(ValueError):
        describe([])


def test_summarize_groups_rows():
    rows = [_row(EXP, "A", Control.WITH_LORA, e, i=i) for i, e in enumerate([0.1, 0.3])]
    rows += [_row(EXP, "A", Control.WITHOUT_LORA, 1.0)]
    s = summarize(rows)
    assert len(s) == 2
    full = FullCoordinate(EXP, ControlCoordinate("A", Control.WITH_LORA))
    assert s[full]["edit"].mean == pytest.approx(0.2)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms(use_true_random=False))
@settings(max_examples=100)
def test_summarize_is_row_order_invariant(values, rnd):
    rows = [_row(EXP, "AB"[i % 2], CONTROLS[i % 4], v, i=i) for i, v in enumerate(values)]
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    assert summarize(rows) == summarize(shuffled)


def _summaries(edits_by_coord):
    rows = []
    for (layer, hook, rank, trojan, control), edits in edits_by_coord.items():
        exp = ExperimentCoordinate("toy", Location(layer, hook), rank)
        rows += [_row(exp, trojan, control, e, i=i) for i, e in enumerate(edits)]
    return summarize(rows)


def test_metric_agreement_perfect_linear():
    rows = []
    for k in range(5):
        exp = ExperimentCoordinate("toy", LOC, k + 1)
        rows.append(_row(exp, "A", Control.WITH_LORA, 0.1 * k, prefix=0.2 * k + 0.1))
    agreement = {(a.metric_x, a.metric_y): a for a in metric_agreement(summarize(rows))}
    pe = agreement[("prefix", "edit")]
    assert pe.correlation == pytest.approx(1.0)
    assert pe.mae == pytest.approx(0.0, abs=1e-12)
    assert pe.slope == pytest.approx(0.5)
    assert agreement[("exact", "edit")].correlation is None  # exact constant
    with pytest.raises(ValueError):
        metric_agreement(summarize(rows[:2]))


def test_decision_boundary_example():
    s = _summaries({
        (0, HookPoint.RESID_POST, 4, "A", Control.WITH_LORA): [0.1],
        (0, HookPoint.MLP_OUT, 4, "A", Control.WITH_LORA): [0.4],
        (1, HookPoint.MLP_OUT, 4, "A", Control.WITH_LORA): [0.45],
        (1, HookPoint.RESID_POST, 4, "A", Control.WITHOUT_LORA): [0.0],
    })
    fr = decision_boundary_fractions(s, [0.05, 0.2, 0.5])
    assert fr[0.05] is None
    assert fr[0.2] == {HookPoint.RESID_POST: 1.0}
    assert fr[0.5] == pytest.approx({HookPoint.RESID_POST: 1 / 3, HookPoint.MLP_OUT: 2 / 3})


@given(st.lists(st.tuples(st.integers(0, 3), st.sampled_from(list(HookPoint)), st.floats(0, 1)), min_size=1, max_size=25))
@settings(max_examples=100)
def test_decision_boundary_fractions_sum_to_one(items):
    rows = [_row(ExperimentCoordinate("toy", Location(l, h), 1 + i), "A", Control.WITH_LORA, e)
            for i, (l, h, e) in enumerate(items)]
    fr = decision_boundary_fractions(summarize(rows), [0.05 * k for k in range(21)])
    for bucket in fr.values():
        if bucket is not None:
            assert math.isclose(sum(bucket.values()), 1.0)


def test_per_layer_mean():
    s = _summaries({
        (0, HookPoint.RESID_POST, 4, "A", Control.WITH_LORA): [0.2],
        (0, HookPoint.MLP_OUT, 4, "A", Control.WITH_LORA): [0.4],
        (2, HookPoint.RESID_POST, 4, "A", Control.WITH_LORA): [0.1],
    })
    assert per_layer_mean(s, n_layers=4) == pytest.approx({0.0: 0.3, 0.5: 0.1})


def test_control_improvements_example():
    edits = {Control.WITHOUT_LORA: 0.9, Control.ZERO_ABLATE: 0.6, Control.RANDN_ABLATE: 0.5, Control.WITH_LORA: 0.2}
    spec = {(0, HookPoint.RESID_POST, 4, "A", c): [e] for c, e in edits.items()}
    spec[(1, HookPoint.RESID_POST, 4, "A", Control.WITH_LORA)] = [0.3]  # incomplete group
    imps = control_improvement_stats(_summaries(spec))
    got = {(i.better, i.baseline): i for i in imps}
    assert got[(Control.WITH_LORA, Control.RANDN_ABLATE)].stats.mean == pytest.approx(0.3)
    assert got[(Control.RANDN_ABLATE, Control.ZERO_ABLATE)].stats.mean == pytest.approx(0.1)
    assert got[(Control.ZERO_ABLATE, Control.WITHOUT_LORA)].stats.mean == pytest.approx(0.3)
    assert all(i.n == 1 and len(i.skipped) == 1 for i in imps)


def test_rank_sensitivity():
    spec = {(0, HookPoint.RESID_POST, r, "A", Control.WITH_LORA): [e] for r, e in [(2, 0.6), (4, 0.4), (8, 0.2)]}
    spec.update({(0, HookPoint.MLP_OUT, r, "A", Control.WITH_LORA): [0.5] for r in (2, 4)})
    spec[(1, HookPoint.MLP_OUT, 2, "A", Control.WITH_LORA)] = [0.1]  # single rank: ignored
    rs = rank_sensitivity(_summaries(spec))
    assert len(rs.per_location) == 2
    assert rs.flagged == ("blocks.0.mlp_out|A",)
    r = rs.per_location["blocks.0.resid_post|A"]
    assert r == pytest.approx(abs(-0.9819805060619657))
    assert rs.mean_abs_correlation == pytest.approx(r / 2)
