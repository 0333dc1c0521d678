import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmr import losses
from pmr.bmn import valid_mask
from pmr.losses import CaptionBatch, caption_loss, l_act, l_wb, repetition_penalty


def test_l_wb_hand_case():
    assert l_wb(np.array([0.5, 0.5]), np.array([1.0, 0.0])).item() == pytest.approx(1.3863, abs=1e-4)


def test_l_wb_perfect_prediction():
    L = np.array([1.0, 0.0, 0.0, 1.0])
    assert 0 <= l_wb(L, L).item() < 1e-6


def test_l_wb_single_class_has_zero_weight_elsewhere():
    assert l_wb(np.array([0.5, 0.5]), np.zeros(2)).item() == pytest.approx(np.log(2))


def pl_pairs():
    n = st.integers(2, 12)
    return n.flatmap(lambda k: st.tuples(
        arrays(np.float64, k, elements=st.floats(0.01, 0.99)),
        arrays(np.float64, k, elements=st.sampled_from([0.0, 1.0])),
    ))


@given(pl_pairs(), st.integers(2, 4))
def test_l_wb_invariant_under_duplication(pl, k):
    P, L = pl
    assert l_wb(np.tile(P, k), np.tile(L, k)).item() == pytest.approx(l_wb(P, L).item(), rel=1e-12, abs=1e-12)


@given(pl_pairs())
def test_l_wb_symmetric_under_class_swap(pl):
    P, L = pl
    assert l_wb(1 - P, 1 - L).item() == pytest.approx(l_wb(P, L).item(), rel=1e-12)
    assert l_wb(P, L).item() >= 0


def test_l_wb_shape_mismatch():
    with pytest.raises(ValueError):
        l_wb(np.zeros(2), np.zeros(3))


def test_l_act_perfect_map():
    rng = np.random.default_rng(0)
    L = (rng.random((6, 6)) < 0.3) * valid_mask(6)
    assert abs(l_act(L.astype(float), L, lam=10).item()) < 1e-6


def test_l_act_all_negative_half_prediction():
    T = 5
    val = l_act(np.full((T, T), 0.5), np.zeros((T, T)), lam=10).item()
    assert val == pytest.approx(2.5 + np.log(2), abs=1e-4)
    assert val == pytest.approx(3.1931, abs=1e-4)


def test_l_act_ignores_invalid_cells():
    T = 4
    P = np.full((T, T), 0.5)
    noisy = P.copy()
    noisy[~valid_mask(T)] = 0.99
    assert l_act(noisy, np.zeros((T, T))).item() == l_act(P, np.zeros((T, T))).item()


def test_default_weights():
    assert losses.LAMBDA_ACT == 10.0 and losses.LAMBDA_CAP == 0.1


# --------------------------------------------------------------------------
# captions


def test_repetition_penalty_hand_case():
    batch = CaptionBatch([0, 0], np.array([[1.0, 0.0], [0.5, 0.5]]))
    assert repetition_penalty(batch).item() == pytest.approx(0.3466, abs=1e-4)


def test_distinct_tokens_without_mass_on_history_have_no_penalty():
    batch = CaptionBatch([0, 1, 2], np.eye(3))
    assert repetition_penalty(batch).item() == 0.0


def test_perfect_one_token_caption():
    assert caption_loss(CaptionBatch([2], np.eye(3)[[2]])).item() == 0.0


def test_two_token_nll_and_switch_off():
    dist = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]])
    batch = CaptionBatch([0, 2], dist)
    assert caption_loss(batch, lam=0).item() == pytest.approx(np.log(2), abs=1e-4)
    # the earlier token 0 has no mass at step 2, so the penalty is zero here
    assert caption_loss(batch).item() == pytest.approx(np.log(2), abs=1e-12)


def test_lambda_zero_is_exactly_nll():
    rng = np.random.default_rng(3)
    dist = rng.dirichlet(np.ones(5), size=6)
    batch = CaptionBatch(rng.integers(0, 5, size=6), dist)
    nll = -np.mean(np.log(dist[np.arange(6), batch.token_ids]))
    assert caption_loss(batch, lam=0).item() == pytest.approx(nll, rel=1e-12)
    full = nll + 0.1 * repetition_penalty(batch).item()
    assert caption_loss(batch).item() == pytest.approx(full, rel=1e-12)


def test_zero_reference_probability_is_clamped_and_counted():
    before = losses.caption_clamp_events
    val = caption_loss(CaptionBatch([1], np.array([[1.0, 0.0]])), lam=0).item()
    assert val == pytest.approx(-np.log(1e-9))
    assert losses.caption_clamp_events == before + 1


@given(st.integers(0, 2**32 - 1))
def test_penalty_nonnegative(seed):
    rng = np.random.default_rng(seed)
    n, V = int(rng.integers(1, 8)), int(rng.integers(1, 6))
    batch = CaptionBatch(rng.integers(0, V, size=n), rng.dirichlet(np.ones(V), size=n))
    assert repetition_penalty(batch).item() >= 0


def test_caption_batch_validation():
    with pytest.raises(ValueError):
        CaptionBatch([0], np.array([[0.6, 0.6]]))
    with pytest.raises(ValueError):
        CaptionBatch([3], np.array([[1.0, 0.0]]))
