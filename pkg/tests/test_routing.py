import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iotlab import tensor as T
from iotlab.routing import (
    DECODER_CODES,
    ENCODER_CODES,
    LayerKind,
    LayerOrder,
    OrderSet,
    all_permutations,
    enumerate_orders,
    gumbel_noise,
    gumbel_softmax_weights,
    order_subset,
    predictor_logits,
    predictor_probs,
    route,
    select_argmax,
    sentence_summary,
)
from iotlab.tensor import Tensor

SA, ED, FF = LayerKind.SA, LayerKind.ED, LayerKind.FF


def test_decoder_coding_table():
    expected = {
        1: "SA->ED->FF",
        2: "FF->SA->ED",
        3: "ED->FF->SA",
        4: "ED->SA->FF",
        5: "SA->FF->ED",
        6: "FF->ED->SA",
    }
    assert {c: str(o) for c, o in DECODER_CODES.items()} == expected


def test_encoder_coding_table():
    assert {c: str(o) for c, o in ENCODER_CODES.items()} == {1: "SA->FF", 2: "FF->SA"}


def test_enumeration_covers_every_permutation():
    dec = enumerate_orders({"SA", "ED", "FF"})
    enc = enumerate_orders([SA, FF])
    assert len(dec) == 6 and len(enc) == 2
    assert set(dec.orders) == set(all_permutations([SA, ED, FF]))
    assert set(enc.orders) == {LayerOrder(p) for p in permutations([SA, FF])}
    assert dec.codes == (1, 2, 3, 4, 5, 6)
    assert dec.orders[0] == LayerOrder((SA, ED, FF))


def test_enumeration_singleton_and_errors():
    assert len(enumerate_orders({"FF"})) == 1
    with pytest.raises(ValueError):
        enumerate_orders({"SA", "ED"})


@pytest.mark.parametrize(
    "n,codes",
    [(2, (4, 6)), (3, (1, 4, 6)), (4, (1, 2, 4, 6)), (5, (1, 2, 4, 5, 6)), (6, (1, 2, 3, 4, 5, 6))],
)
def test_order_subsets(n, codes):
    assert order_subset(n).codes == codes


@pytest.mark.parametrize("n", [0, 1, 7])
def test_order_subset_out_of_range(n):
    with pytest.raises(ValueError):
        order_subset(n)


def test_layer_order_rejects_repeats_and_parses():
    with pytest.raises(ValueError):
        LayerOrder((SA, SA, FF))
    assert LayerOrder.parse("ED->SA->FF") == DECODER_CODES[4]


def test_order_set_lookup_errors():
    s = OrderSet.from_codes("decoder", [4, 6])
    assert s.index_of(6) == 1
    with pytest.raises(ValueError, match="not in decoder set"):
        s.index_of(1)
    with pytest.raises(ValueError):
        OrderSet.from_codes("encoder", [3])
    with pytest.raises(ValueError):
        OrderSet.from_codes("decoder", [4, 4])


# ---------------------------------------------------------------------------
# summaries and predictors
# ---------------------------------------------------------------------------

def test_summary_examples():
    np.testing.assert_allclose(sentence_summary(Tensor([[1.0, 0.0], [0.0, 1.0]])).data, [0.5, 0.5])
    np.testing.assert_allclose(sentence_summary(Tensor([[3.0, -1.0]])).data, [3.0, -1.0])
    np.testing.assert_allclose(sentence_summary(Tensor([[2.0, 2.0], [2.0, 2.0]])).data, [2.0, 2.0])


def test_summary_ignores_padding():
    states = Tensor([[[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]])
    out = sentence_summary(states, np.array([[False, False, True]]))
    np.testing.assert_allclose(out.data, [[2.0, 3.0]])


def test_summary_all_pad_errors():
    with pytest.raises(ValueError, match="no non-pad"):
        sentence_summary(Tensor(np.ones((2, 2))), np.array([True, True]))


def test_zero_weights_give_uniform_probs():
    pi = predictor_probs(Tensor([0.3, -2.0, 1.0]), Tensor(np.zeros((3, 4))))
    np.testing.assert_allclose(pi.data, 0.25)


def test_duplicate_columns_equal_probs():
    W = np.random.default_rng(0).normal(size=(3, 3))
    W[:, 2] = W[:, 0]
    pi = predictor_probs(Tensor([0.5, -1.0, 2.0]), Tensor(W)).data
    assert pi[0] == pytest.approx(pi[2])


def test_predictor_hand_case():
    s, W = [1.0, -2.0], [[0.5, -0.25], [0.1, 0.3]]
    z = [s[0] * W[0][k] + s[1] * W[1][k] for k in range(2)]
    ez = [math.exp(v) for v in z]
    oracle = [e / sum(ez) for e in ez]
    np.testing.assert_allclose(predictor_probs(Tensor(s), Tensor(W)).data, oracle, atol=1e-6)


def test_predictor_shape_mismatch():
    with pytest.raises(ValueError):
        predictor_logits(Tensor(np.ones(3)), Tensor(np.ones((4, 2))))


# ---------------------------------------------------------------------------
# Gumbel
# ---------------------------------------------------------------------------

def test_gumbel_mean_is_euler_mascheroni():
    g = gumbel_noise(100_000, T.stream(0, T.GUMBEL_TAG, 0))
    assert abs(g.mean() - 0.5772156649) < 0.01
    assert np.isfinite(g).all()


def test_gumbel_fixed_point():
    u = 1 / math.e
    assert -math.log(-math.log(u)) == pytest.approx(0.0, abs=1e-15)


def test_gumbel_stream_reproducible():
    a = gumbel_noise((4, 2), T.stream(3, T.GUMBEL_TAG, 9))
    b = gumbel_noise((4, 2), T.stream(3, T.GUMBEL_TAG, 9))
    np.testing.assert_array_equal(a, b)


def test_zero_noise_identity():
    pi = Tensor([0.2, 0.5, 0.3])
    np.testing.assert_allclose(gumbel_softmax_weights(pi, np.zeros(3), 1.0).data, pi.data, atol=1e-6)


def test_gumbel_weights_hand_case():
    pi, g, tau = (0.7, 0.3), (0.2, -0.1), 0.5
    a = [(math.log(p) + n) / tau for p, n in zip(pi, g)]
    e = [math.exp(v) for v in a]
    oracle = [v / sum(e) for v in e]
    got = gumbel_softmax_weights(Tensor(pi, dtype=np.float64), np.array(g), tau).data
    np.testing.assert_allclose(got, oracle, atol=1e-12)


def test_low_temperature_limit():
    pi, g = Tensor([0.3, 0.45, 0.25]), np.array([0.4, 0.0, 0.9])
    w = gumbel_softmax_weights(pi, g, 0.01).data
    assert w.max() > 0.999
    assert w.argmax() == np.argmax(np.log(pi.data) + g)


def test_gumbel_weights_reject_zero_prob():
    with pytest.raises(ValueError, match="clamp"):
        gumbel_softmax_weights(Tensor([1.0, 0.0]), np.zeros(2))
    with pytest.raises(ValueError):
        gumbel_softmax_weights(Tensor([0.5, 0.5]), np.zeros(2), 0.0)


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def test_argmax_tie_breaks_low():
    assert select_argmax(np.ones(3), np.zeros((3, 4))) == 0


def test_argmax_dominant_column():
    W = np.zeros((2, 3))
    W[:, 2] = 5.0
    assert select_argmax(np.array([1.0, 1.0]), W) == 2


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (4, 3), elements=st.floats(-5, 5)),
    arrays(np.float64, (3, 5), elements=st.floats(-5, 5)),
)
def test_argmax_invariance(s, W):
    logits = s @ W
    probs = predictor_probs(Tensor(s, dtype=np.float64), Tensor(W, dtype=np.float64)).data
    sel = select_argmax(s, W)
    np.testing.assert_array_equal(sel, logits.argmax(-1))
    # softmax can round two close logits to the same probability; compare only clear winners
    clear = np.sort(logits, -1)[:, -1] - np.sort(logits, -1)[:, -2] > 1e-9
    np.testing.assert_array_equal(sel[clear], probs.argmax(-1)[clear])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), st.integers(0, 2**31))
def test_route_weights_are_distributions(W, seed):
    summary = Tensor(np.random.default_rng(seed).normal(size=(5, 3)))
    dec = route(summary, Tensor(W), 1.0, T.stream(seed, T.GUMBEL_TAG, 0))
    np.testing.assert_allclose(dec.pi.data.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(dec.weights.data.sum(-1), 1.0, atol=1e-6)
    assert (dec.clamped.data >= 0.05 - 1e-7).all()


def test_route_inference_is_one_hot_argmax():
    W = Tensor([[1.0, -1.0], [0.0, 2.0]])
    s = Tensor([[1.0, 0.0], [0.0, 1.0]])
    dec = route(s, W, rng=None)
    np.testing.assert_array_equal(dec.selected, [0, 1])
    np.testing.assert_array_equal(dec.weights.data, [[1, 0], [0, 1]])
