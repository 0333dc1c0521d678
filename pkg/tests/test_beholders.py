import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_roi_align
from pmr import beholders as bh
from pmr.dataio import SnippetBundle, Vocabulary
from pmr.numerics import ParamStore, ShapeError, mean_pool_rows, self_attention


DIMS = bh.EncoderDims(C=3, F=5, d_model=6, K=4, P=2)


def _store(seed=0, dims=DIMS):
    s = ParamStore()
    bh.init_encoder_params(s, np.random.default_rng(seed), dims)
    return s


def _vocab(rng, n=8, E=4, F=5):
    return Vocabulary([f"w{i}" for i in range(n)], rng.normal(size=(n, E)), rng.normal(size=(n, F)))


def _bundle(rng, n_boxes=2, C=3, H=4, W=4, E=4):
    boxes = []
    for _ in range(n_boxes):
        x = np.sort(rng.uniform(0, 1, 2))
        y = np.sort(rng.uniform(0, 1, 2))
        boxes.append([x[0], y[0], x[1] + 1e-3 if x[1] == x[0] else x[1], y[1] + 1e-3 if y[1] == y[0] else y[1]])
    return SnippetBundle(rng.normal(size=(C, H, W)), np.array(boxes).reshape(-1, 4), rng.normal(size=E))


# --------------------------------------------------------------------------
# environment and RoIAlign


def test_environment_examples():
    np.testing.assert_array_equal(bh.environment_beholder(np.full((3, 4, 5), 3.0)), [3.0, 3.0, 3.0])
    np.testing.assert_array_equal(bh.environment_beholder(np.array([[[7.0]], [[-1.0]]])), [7.0, -1.0])
    assert bh.environment_beholder(np.array([[[1.0, 2.0], [3.0, 4.0]]]))[0] == 2.5


@given(st.tuples(st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.01, 0.5), st.floats(0.01, 0.5)))
def test_roi_of_constant_map(b):
    box = (b[0], b[1], min(b[0] + b[2], 1.0), min(b[1] + b[3], 1.0))
    np.testing.assert_allclose(bh.roi_align(np.full((2, 5, 3), 3.0), box), 3.0, atol=1e-12)


def test_roi_whole_map_center_sample():
    assert bh.roi_align(np.array([[[1.0, 2.0], [3.0, 4.0]]]), (0, 0, 1, 1), P=1)[0] == 2.5


def test_roi_inside_clamp_region_returns_pixel():
    m = np.arange(16.0).reshape(1, 4, 4)
    # top-left quarter pixel lies left/above the first center, fully clamped
    assert bh.roi_align(m, (0.0, 0.0, 0.1, 0.1))[0] == m[0, 0, 0]


def test_roi_rejects_degenerate_box():
    with pytest.raises(ValueError):
        bh.roi_align(np.zeros((1, 2, 2)), (0.5, 0.1, 0.5, 0.9))


@pytest.mark.parametrize("seed", range(20))
def test_roi_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(2, 4, 4))
    x, y = np.sort(rng.uniform(0, 1, 2)), np.sort(rng.uniform(0, 1, 2))
    box = (x[0], y[0], x[1], y[1])
    P = int(rng.integers(1, 4))
    np.testing.assert_allclose(bh.roi_align(m, box, P), naive_roi_align(m, box, P), atol=1e-10)


# --------------------------------------------------------------------------
# object retrieval


def test_top_word_on_exact_match(rng):
    v = _vocab(rng)
    idx, sims = bh.top_k_words(v.embeddings[5] * 3.0, v, 3)
    assert idx[0] == 5 and sims[0] == pytest.approx(1.0, abs=1e-12)


def test_only_non_orthogonal_word_leads():
    emb = np.eye(4)
    emb[2] = [0, 0, 0, -1]  # negative only on axis 3
    v = Vocabulary(list("abcd"), emb, emb)
    idx, sims = bh.top_k_words(np.array([0.0, 1.0, 0.0, 0.0]), v, 4)
    assert idx[0] == 1 and sims[0] > 0 and np.all(sims[1:] <= 0)


def test_ties_break_by_lower_index():
    v = Vocabulary(list("abc"), np.array([[1.0, 0], [1.0, 0], [0, 1.0]]), np.eye(3)[:, :2])
    assert bh.top_k_words(np.array([1.0, 0.0]), v, 2)[0].tolist() == [0, 1]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_top_k_is_prefix_of_full_sort(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    v = _vocab(rng, n=n)
    q = rng.normal(size=4)
    full = sorted(range(n), key=lambda j: (-float(v.embeddings[j] @ q / np.linalg.norm(v.embeddings[j])), j))
    K = int(rng.integers(1, n + 1))
    assert bh.top_k_words(q, v, K)[0].tolist() == full[:K]
    assert bh.top_k_words(q, v, n)[0].tolist() == full


def test_top_k_errors(rng):
    v = _vocab(rng)
    with pytest.raises(ValueError):
        bh.top_k_words(np.zeros(4), v, 2)
    with pytest.raises(ValueError):
        bh.top_k_words(np.ones(4), v, 9)


# --------------------------------------------------------------------------
# encoders


def test_no_boxes_gives_no_actor_embedding(rng):
    s = _store()
    b = _bundle(rng, n_boxes=0)
    f, ids = bh.actors_beholder(s, b, bh.project_env(s, bh.environment_beholder(b.env_map)))
    np.testing.assert_array_equal(f.data, s["act.none"].data[0])
    assert ids == []


def test_single_box_is_attention_of_one(rng):
    s = _store()
    b = _bundle(rng, n_boxes=1)
    f, ids = bh.actors_beholder(s, b, bh.project_env(s, bh.environment_beholder(b.env_map)))
    feat = bh.roi_align(b.env_map, b.actor_boxes[0]) @ s["act.proj.weight"].data + s["act.proj.bias"].data
    np.testing.assert_allclose(f.data, feat @ s["act.aam.attn.v"].data @ s["act.aam.attn.o"].data, atol=1e-12)
    assert ids == [0]


@pytest.mark.parametrize("seed", range(5))
def test_box_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    b = _bundle(rng, n_boxes=4)
    f_env = bh.project_env(s, bh.environment_beholder(b.env_map))
    shuffled = SnippetBundle(b.env_map, b.actor_boxes[::-1].copy(), b.frame_embed)
    np.testing.assert_allclose(bh.actors_beholder(s, shuffled, f_env)[0].data,
                               bh.actors_beholder(s, b, f_env)[0].data, atol=1e-10)


def test_objects_provenance_valid(rng):
    s, v = _store(), _vocab(rng)
    b = _bundle(rng)
    f, words = bh.objects_beholder(s, b.frame_embed, v, DIMS.K, bh.project_env(s, bh.environment_beholder(b.env_map)))
    assert f.shape == (DIMS.d_model,) and words
    top = set(bh.top_k_words(b.frame_embed, v, DIMS.K)[0].tolist())
    assert set(words) <= top


def test_aoe_identical_tokens_collapse(rng):
    s = _store()
    x = rng.normal(size=6)
    out = bh.aoe_beholder(s, x, x, x).data
    np.testing.assert_allclose(out, x @ s["aoe.attn.v"].data @ s["aoe.attn.o"].data, atol=1e-12)


def test_aoe_order_invariant_and_total(rng):
    s = _store()
    a, b, c = rng.normal(size=(3, 6))
    ref = bh.aoe_beholder(s, a, b, c).data
    np.testing.assert_allclose(bh.aoe_beholder(s, c, a, b).data, ref, atol=1e-12)
    assert np.all(np.isfinite(bh.aoe_beholder(s, np.zeros(6), b, c).data))
    with pytest.raises(ShapeError):
        bh.aoe_beholder(s, np.zeros(5), np.zeros(5), np.zeros(5))


def test_encode_video_single_snippet(rng):
    s, v = _store(), _vocab(rng)
    b = _bundle(rng)
    out = bh.encode_video(s, [b], v, DIMS)
    assert out.shape == (1, 6)
    np.testing.assert_array_equal(out[0], bh.encode_snippet(s, b, v, DIMS).fused.data)


def test_encode_video_is_snippet_local(rng):
    s, v = _store(), _vocab(rng)
    bundles = [_bundle(rng, n_boxes=int(rng.integers(0, 4))) for _ in range(5)]
    base = bh.encode_video(s, bundles, v, DIMS)
    edited = list(bundles)
    edited[2] = _bundle(rng)
    out = bh.encode_video(s, edited, v, DIMS)
    changed = np.any(out != base, axis=1)
    assert changed.tolist() == [False, False, True, False, False]
    np.testing.assert_array_equal(bh.encode_video(s, bundles, v, DIMS), base)


@pytest.mark.parametrize("seed", range(4))
def test_batched_encoder_matches_per_snippet(seed):
    rng = np.random.default_rng(seed)
    s, v = _store(seed), _vocab(rng)
    videos = [[_bundle(rng, n_boxes=int(rng.integers(0, 4))) for _ in range(3)] for _ in range(2)]
    inputs = [bh.prepare_video(b, v, DIMS) for b in videos]
    batched = bh.encode_inputs(s, inputs).data
    for i, bundles in enumerate(videos):
        np.testing.assert_allclose(batched[i], bh.encode_video(s, bundles, v, DIMS), atol=1e-10)


def test_video_inputs_roundtrip(rng):
    v = _vocab(rng)
    inputs = bh.prepare_video([_bundle(rng) for _ in range(3)], v, DIMS)
    back = bh.VideoInputs.from_arrays(inputs.to_arrays())
    np.testing.assert_array_equal(back.object_ids, inputs.object_ids)
    np.testing.assert_array_equal(back.actors, inputs.actors)


def test_self_attention_of_identical_rows_reference(rng):
    # sanity for the collapse used above: mean over equal rows is the row itself
    s = ParamStore()
    for n in "qkvo":
        s.add(f"a.{n}", rng.normal(size=(3, 3)))
    x = np.tile(rng.normal(size=3), (3, 1))
    np.testing.assert_allclose(mean_pool_rows(self_attention(s, "a", x)).data,
                               self_attention(s, "a", x[:1]).data[0], atol=1e-12)
