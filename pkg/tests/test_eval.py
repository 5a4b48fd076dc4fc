import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iotlab.config import config_from_dict
from iotlab.decoding import ensemble_decode, evaluate, greedy_decode
from iotlab.metrics import exact_match, sentence_bleu, token_accuracy
from iotlab.model import IOTModel
from iotlab.studies import (
    StudyReport,
    ensemble_scores,
    param_overhead,
    preference_ratios_from_scores,
    robustness_matrix,
    score_kind_for,
    subset_decode_matrix,
    subset_matrix_from_scores,
    variance_from_scores,
    write_report,
)
from iotlab.data import Example, TaskSpec
from iotlab.train import fit
from iotlab.transformer import ModelConfig

# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def bleu_oracle(hyp, ref):
    """Counts n-grams with plain loops; add-one smoothing from bigrams up."""
    logs = []
    for n in range(1, 5):
        h = [tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1)]
        r = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
        pool = list(r)
        match = 0
        for g in h:
            if g in pool:
                pool.remove(g)
                match += 1
        num, den = (match, len(h)) if n == 1 else (match + 1, len(h) + 1)
        if num == 0:
            return 0.0
        logs.append(math.log(num / den))
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1 - len(ref) / len(hyp))
    return 100 * bp * math.exp(sum(logs) / 4)


def test_bleu_hand_case():
    a, b, c, d, e = 5, 6, 7, 8, 9
    got = sentence_bleu([a, b, c, d], [a, b, e, d])
    assert got == pytest.approx(bleu_oracle([a, b, c, d], [a, b, e, d]), abs=1e-9)
    assert got == pytest.approx(50.0, abs=1e-9)


def test_bleu_trivial_cases():
    assert sentence_bleu([4, 5, 6], [4, 5, 6]) == pytest.approx(100.0)
    assert sentence_bleu([7, 8], [4, 5, 6]) == 0.0
    assert sentence_bleu([], [4]) == 0.0
    with pytest.raises(ValueError):
        sentence_bleu([4], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(4, 8), min_size=1, max_size=9), st.lists(st.integers(4, 8), min_size=1, max_size=9))
def test_bleu_matches_oracle_and_range(hyp, ref):
    got = sentence_bleu(hyp, ref)
    assert 0.0 <= got <= 100.0 + 1e-9
    assert got == pytest.approx(bleu_oracle(hyp, ref), abs=1e-9)


def test_exact_and_token_accuracy():
    assert exact_match([1, 2], [1, 2]) == 1.0 and exact_match([1], [1, 2]) == 0.0
    assert token_accuracy([4, 5, 9], [4, 5, 6, 7]) == pytest.approx(0.5)
    assert token_accuracy([], []) == 1.0


# ---------------------------------------------------------------------------
# pure study cores
# ---------------------------------------------------------------------------


def test_ratios_identical_models_are_uniform():
    S = np.tile(np.array([[1.0, 0.0, 1.0]]), (3, 1))
    np.testing.assert_allclose(preference_ratios_from_scores(S), [1 / 3] * 3)


def test_ratios_dominant_model():
    S = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.5]])
    np.testing.assert_allclose(preference_ratios_from_scores(S), [1.0, 0.0])


def test_ratios_tie_split_hand_case():
    S = np.array([[1.0, 0.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    # inst0: orders 0,1 tie; inst1: 1,2 tie; inst2: 0; inst3: all three tie
    want = np.array([0.5 + 1 + 1 / 3, 0.5 + 0.5 + 1 / 3, 0.5 + 1 / 3]) / 4
    np.testing.assert_allclose(preference_ratios_from_scores(S), want)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_ratios_sum_to_one(K, n, seed):
    S = np.random.default_rng(seed).integers(0, 3, size=(K, n)).astype(float)
    assert abs(preference_ratios_from_scores(S).sum() - 1.0) < 1e-9


def test_variance_identical_models_zero():
    v = variance_from_scores(np.ones((3, 5)))
    assert v["corpus_variance"] == 0.0 and v["mean_instance_variance"] == 0.0 and v["ratio"] == 0.0


def test_variance_two_instance_hand_case():
    S = np.array([[1.0, 0.0], [0.0, 1.0]])
    # both orders average 0.5: corpus variance 0; each instance has scores (1,0) -> variance 0.25
    v = variance_from_scores(S)
    assert v["corpus_variance"] == 0.0
    assert v["mean_instance_variance"] == pytest.approx(0.25)
    assert v["ratio"] == pytest.approx(0.25 / 1e-12)
    S = np.array([[1.0, 1.0], [0.0, 1.0]])
    means = [1.0, 0.5]
    corpus = sum((m - 0.75) ** 2 for m in means) / 2
    inst = (0.25 + 0.0) / 2
    v = variance_from_scores(S)
    assert v["corpus_variance"] == pytest.approx(corpus)
    assert v["mean_instance_variance"] == pytest.approx(inst)


def test_variance_needs_two_orders():
    with pytest.raises(ValueError):
        variance_from_scores(np.ones((1, 3)))


def specialised_fixture(K=3, n=60, seed=0):
    """Each instance is solved only by its own order, and routed to it."""
    owner = np.random.default_rng(seed).integers(0, K, size=n)
    S = (np.arange(K)[:, None] == owner[None, :]).astype(float)
    return owner, S


def test_subset_matrix_on_specialised_fixture():
    owner, S = specialised_fixture()
    out = subset_matrix_from_scores(owner, S)
    assert out["diagonal_strict"] == 3
    assert sum(out["counts"]) == 60
    assert out["row_argmax"] == [0, 1, 2]
    np.testing.assert_array_equal(np.array(out["matrix"]), np.eye(3))


def test_subset_matrix_empty_row_is_null():
    out = subset_matrix_from_scores([0, 0, 2], np.array([[1.0, 0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 1.0]]))
    assert out["counts"] == [2, 0, 1]
    assert out["matrix"][1] == [None, None, None]
    assert out["row_argmax"][1] is None and out["nonempty_rows"] == 2


def test_subset_matrix_single_order():
    out = subset_matrix_from_scores([0, 0, 0], np.array([[1.0, 0.0, 1.0]]))
    assert out["matrix"] == [[pytest.approx(2 / 3)]]


# ---------------------------------------------------------------------------
# studies on a small trained model
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    cfg = config_from_dict({
        "task": {"kind": "reverse", "vocab": 10, "min_len": 2, "max_len": 5, "n_train": 400, "n_dev": 40, "n_test": 10},
        "model": {"d_model": 16, "d_ff": 32, "heads": 2, "layers": 1, "dropout": 0.0, "max_len": 10},
        "train": {"mode": "iot", "dec_codes": [4, 6], "lr": 5e-3, "warmup": 50, "batch_size": 40, "max_steps": 150, "patience": 100},
        "seed": 1,
    })
    r = fit(cfg)
    return r.model, r.corpus["dev"]


def test_override_with_selected_order_is_identity(trained):
    model, dev = trained
    plain = greedy_decode(model, [e.src for e in dev])
    pinned = greedy_decode(model, [e.src for e in dev], order_override=[r.dec_code for r in plain])
    assert [r.hypothesis for r in plain] == [r.hypothesis for r in pinned]


def test_override_outside_set_errors(trained):
    model, dev = trained
    with pytest.raises(ValueError, match="not in decoder set"):
        greedy_decode(model, [dev[0].src], order_override=1)


def test_truncation_flag(trained):
    model, dev = trained
    res = greedy_decode(model, [e.src for e in dev[:5]], max_len=1)
    assert all(r.truncated for r in res if len(r.hypothesis) == 1)
    assert any(r.truncated for r in res)


def test_usage_sums_to_dev_size(trained):
    model, dev = trained
    report = evaluate(model, dev)
    assert sum(report["usage_dec"].values()) == len(dev)


def test_ensemble_of_one_is_plain_decode(trained):
    model, dev = trained
    srcs = [e.src for e in dev]
    assert [r.hypothesis for r in ensemble_decode([model], srcs)] == [r.hypothesis for r in greedy_decode(model, srcs)]
    assert [r.hypothesis for r in ensemble_decode([model, model.copy()], srcs)] == [r.hypothesis for r in greedy_decode(model, srcs)]


def test_ensemble_vocab_mismatch(trained):
    model, _ = trained
    other = IOTModel.create(ModelConfig(src_vocab=12, tgt_vocab=12, d_model=16, d_ff=32, max_len=10))
    with pytest.raises(ValueError, match="vocabular"):
        ensemble_decode([model, other], [[4, 5]])


def test_ensemble_scores_report(trained):
    model, dev = trained
    out = ensemble_scores([model], dev)
    assert out["ensemble"] == pytest.approx(out["members"][0])


def test_subset_rows_partition_dev(trained):
    model, dev = trained
    out = subset_decode_matrix(model, dev)
    assert sum(out["counts"]) == len(dev)
    assert out["codes"] == [4, 6]


def test_robustness_matches_unconstrained_decode(trained):
    model, dev = trained
    out = robustness_matrix(model, dev)
    assert out["codes"] == [4, 6] and "trained_code" not in out
    assert out["spread"] == pytest.approx(max(out["scores"]) - min(out["scores"]))
    plain = evaluate(model, dev, with_loss=False)
    routed = [r.dec_code for r in plain["results"]]
    assert evaluate(model, dev, order_override=routed, with_loss=False)["exact_match"] == plain["exact_match"]


def test_robustness_of_fixed_model_sweeps_all_orders():
    model = IOTModel.create(ModelConfig(src_vocab=10, tgt_vocab=10, d_model=8, d_ff=8, max_len=10), dec_codes=[2])
    dev = [Example([4, 5], [5, 4])]
    out = robustness_matrix(model, dev)
    assert out["codes"] == [1, 2, 3, 4, 5, 6] and out["trained_code"] == 2


@pytest.mark.parametrize("N,extra", [(1, 0), (2, 1024), (6, 3072)])
def test_param_overhead_at_d512(N, extra):
    cfg = ModelConfig(src_vocab=8, tgt_vocab=8, d_model=512, d_ff=16, heads=8, layers=1)
    codes = {1: [1], 2: [4, 6], 6: [1, 2, 3, 4, 5, 6]}[N]
    base = param_overhead(IOTModel.create(cfg, dec_codes=[1]))
    out = param_overhead(IOTModel.create(cfg, dec_codes=codes))
    assert out["predictor_params"] == extra
    assert out["total_params"] - base["total_params"] == extra


def test_param_overhead_both_sides():
    cfg = ModelConfig(src_vocab=8, tgt_vocab=8, d_model=16, d_ff=16)
    out = param_overhead(IOTModel.create(cfg, enc_codes=[1, 2], dec_codes=[1, 4, 6]))
    assert out["predictor_params"] == 16 * 2 + 16 * 3


def test_score_kind_choice():
    assert score_kind_for(TaskSpec(kind="mapped-reverse")) == "bleu"
    assert score_kind_for(TaskSpec(kind="mixture", components=[{"kind": "copy"}])) == "exact"


def test_report_writer(tmp_path):
    rep = StudyReport("subsets", {"codes": [4, 6], "counts": [3, 0], "matrix": [[0.5, 0.25], [None, None]]}, {"seed": 1})
    jpath, cpath = write_report(rep, tmp_path)
    assert cpath.read_text() == "selected_order,count,order_4,order_6\n4,3,0.5,0.25\n6,0,,\n"
    again = write_report(rep, tmp_path / "b")
    assert jpath.read_bytes() == again[0].read_bytes()
