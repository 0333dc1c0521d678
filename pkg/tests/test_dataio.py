import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmr import dataio
from pmr.dataio import TensorBlob


names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=0, max_size=8)
shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4)


@st.composite
def blob_lists(draw):
    out = []
    for _ in range(draw(st.integers(0, 5))):
        shape = draw(shapes)
        seed = draw(st.integers(0, 2**32 - 1))
        data = np.random.default_rng(seed).normal(scale=1e3, size=shape).astype(np.float32)
        out.append(TensorBlob.from_array(draw(names), data))
    return out


def test_single_blob_is_29_bytes(tmp_path):
    path = tmp_path / "x.pmrf"
    dataio.write_tensor_container([TensorBlob.from_array("x", np.zeros(1))], path)
    raw = path.read_bytes()
    assert len(raw) == 29
    assert raw[:4] == b"PMRF"
    assert struct.unpack("<III", raw[4:16]) == (1, 1, 1)
    assert raw[16:17] == b"x"
    assert struct.unpack("<IIf", raw[17:]) == (1, 1, 0.0)


def test_empty_container_is_12_bytes(tmp_path):
    path = tmp_path / "e.pmrf"
    dataio.write_tensor_container([], path)
    assert path.read_bytes() == b"PMRF" + struct.pack("<II", 1, 0)
    assert dataio.read_tensor_container(path) == []


@settings(max_examples=100, deadline=None)
@given(blob_lists())
def test_container_roundtrip_bit_identical(tmp_path_factory, blobs):
    path = tmp_path_factory.mktemp("rt") / "b.pmrf"
    dataio.write_tensor_container(blobs, path)
    back = dataio.read_tensor_container(path)
    assert [b.name for b in back] == [b.name for b in blobs]
    for a, b in zip(blobs, back):
        assert tuple(a.shape) == tuple(b.shape)
        assert a.array().tobytes() == b.array().tobytes()
    copy = path.with_suffix(".again")
    dataio.write_tensor_container(back, copy)
    assert copy.read_bytes() == path.read_bytes()


def _good_file(tmp_path):
    path = tmp_path / "g.pmrf"
    dataio.write_arrays({"a": np.arange(6.0).reshape(2, 3)}, path)
    return path


def test_bad_magic(tmp_path):
    path = _good_file(tmp_path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(dataio.BadMagicError):
        dataio.read_tensor_container(path)


def test_bad_version(tmp_path):
    path = _good_file(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(dataio.UnsupportedVersionError):
        dataio.read_tensor_container(path)


def test_truncated_mid_payload(tmp_path):
    path = _good_file(tmp_path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(dataio.TruncatedError):
        dataio.read_tensor_container(path)


def test_trailing_bytes_are_size_mismatch(tmp_path):
    path = _good_file(tmp_path)
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(dataio.SizeMismatchError):
        dataio.read_tensor_container(path)


def test_error_kinds_are_distinct():
    kinds = {dataio.BadMagicError, dataio.UnsupportedVersionError, dataio.TruncatedError, dataio.SizeMismatchError}
    assert len(kinds) == 4
    assert all(issubclass(k, dataio.ContainerError) for k in kinds)


def test_blob_shape_must_match_data():
    with pytest.raises(ValueError):
        TensorBlob("x", (2, 2), np.zeros(3, dtype=np.float32))


# --------------------------------------------------------------------------
# annotations


def _write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))
    return path


def test_parse_one_annotation(tmp_path):
    path = _write_lines(tmp_path / "a.jsonl", [{"video_id": "v", "duration_s": 40.0, "actions": [[12.0, 38.0]]}])
    (ann,) = dataio.read_annotations(path)
    assert ann.video_id == "v" and ann.duration_s == 40.0
    assert ann.actions == [(12.0, 38.0)]
    assert ann.captions is None


def test_inverted_action_rejected_with_line_number(tmp_path):
    path = _write_lines(tmp_path / "a.jsonl", [
        {"video_id": "ok", "duration_s": 40.0, "actions": []},
        {"video_id": "bad", "duration_s": 40.0, "actions": [[38.0, 12.0]]},
    ])
    with pytest.raises(dataio.AnnotationError) as exc:
        dataio.read_annotations(path)
    assert exc.value.line == 2


def test_duplicate_video_id_rejected(tmp_path):
    obj = {"video_id": "v", "duration_s": 10.0, "actions": [[1.0, 2.0]]}
    with pytest.raises(dataio.AnnotationError, match="duplicate"):
        dataio.read_annotations(_write_lines(tmp_path / "a.jsonl", [obj, obj]))


@pytest.mark.parametrize("line", ["not json", "[1, 2]", '{"video_id": "v"}',
                                  '{"video_id": "v", "duration_s": 5, "actions": [[1, 6]]}',
                                  '{"video_id": "v", "duration_s": 0, "actions": []}'])
def test_malformed_lines_rejected(tmp_path, line):
    path = tmp_path / "a.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(dataio.AnnotationError):
        dataio.read_annotations(path)


def test_synthetic_annotations_roundtrip(tmp_path):
    ds = dataio.generate_synthetic(3, 6, 8, 2, 4, 4, 5, 12)
    dataio.write_annotations(ds.annotations, tmp_path / "a.jsonl")
    back = dataio.read_annotations(tmp_path / "a.jsonl")
    assert [a.to_json() for a in back] == [a.to_json() for a in ds.annotations]


def test_tokenize_case_folds():
    assert dataio.tokenize("  The  cat\tSAT ") == ["the", "cat", "sat"]


# --------------------------------------------------------------------------
# vocabulary and bundles


def test_vocabulary_roundtrip(tmp_path, rng):
    vocab = dataio.Vocabulary(["a", "bb", "ccc"], rng.normal(size=(3, 4)), rng.normal(size=(3, 2)))
    dataio.write_vocabulary(vocab, tmp_path / "v.pmrv")
    back = dataio.read_vocabulary(tmp_path / "v.pmrv")
    assert back.words == vocab.words
    np.testing.assert_array_equal(back.embeddings, vocab.embeddings.astype(np.float32))
    np.testing.assert_array_equal(back.text_features, vocab.text_features.astype(np.float32))


def test_vocabulary_rejects_duplicates(rng):
    with pytest.raises(ValueError):
        dataio.Vocabulary(["a", "a"], rng.normal(size=(2, 3)))


def test_video_bundles_roundtrip_with_empty_box_lists(tmp_path, rng):
    bundles = [
        dataio.SnippetBundle(rng.normal(size=(2, 3, 3)), np.array([[0.1, 0.1, 0.5, 0.6]]), rng.normal(size=4)),
        dataio.SnippetBundle(rng.normal(size=(2, 3, 3)), np.zeros((0, 4)), rng.normal(size=4)),
    ]
    dataio.write_video_bundles(bundles, tmp_path / "v.pmrf")
    back = dataio.read_video_bundles(tmp_path / "v.pmrf")
    assert len(back) == 2
    assert back[1].actor_boxes.shape == (0, 4)
    np.testing.assert_allclose(back[0].actor_boxes, bundles[0].actor_boxes, atol=1e-7)


def test_snippet_count():
    assert dataio.snippet_count(100, 16) == 7
    assert dataio.snippet_count(96, 16) == 6
    assert dataio.snippet_count(1, 16) == 1


def test_filter_vocabulary_drops_rare_words():
    assert dataio.filter_vocabulary({"a": 6, "b": 5, "c": 40}) == ["a", "c"]


# --------------------------------------------------------------------------
# synthetic generation


def _dataset_bytes(ds):
    chunks = [json.dumps([a.to_json() for a in ds.annotations]).encode(), ds.vocab.embeddings.tobytes()]
    for video in ds.videos:
        for b in video:
            chunks += [b.env_map.tobytes(), b.actor_boxes.tobytes(), b.frame_embed.tobytes()]
    return b"".join(chunks)


def test_synthetic_is_deterministic():
    a = dataio.generate_synthetic(7, 5, 10, 3, 4, 4, 6, 20)
    b = dataio.generate_synthetic(7, 5, 10, 3, 4, 4, 6, 20)
    c = dataio.generate_synthetic(8, 5, 10, 3, 4, 4, 6, 20)
    assert _dataset_bytes(a) == _dataset_bytes(b)
    assert _dataset_bytes(a) != _dataset_bytes(c)


def test_seed1_action_lengths_within_bounds():
    T = 32
    ds = dataio.generate_synthetic(1, 50, T, 8, 6, 6, 16, 64)
    for ann in ds.annotations:
        step = ann.duration_s / T
        assert 1 <= len(ann.actions) <= 3
        for ts, te in ann.actions:
            length = (te - ts) / step
            assert 2.0 - 1e-9 <= length <= T / 2 + 1e-9
        spans = sorted(ann.actions)
        assert all(prev[1] <= nxt[0] for prev, nxt in zip(spans, spans[1:]))


def test_vocab_size_contract():
    ds = dataio.generate_synthetic(1, 2, 8, 2, 3, 3, 5, 16)
    assert len(ds.vocab) == 16 and len(set(ds.vocab.words)) == 16
    assert ds.vocab.embeddings.shape == (16, 5)


def test_synthetic_rejects_tiny_T():
    with pytest.raises(ValueError):
        dataio.generate_synthetic(1, 2, 3, 2, 3, 3, 5, 16)
