"""Round-trip and corruption tests for the binary container format, model
checkpoints, dataset manifests, and canonical JSON helpers."""

import hashlib
import json

import numpy as np
import pytest

from anchorinv.data import Dataset
from anchorinv.model import (BACKBONE_PRESETS, ConvBackbone, FeatureStats,
                             LinearBackbone, ModelState, embed_batch)
from anchorinv.autodiff import Tensor
from anchorinv.serialization import (KIND_ANCHORS, KIND_CHECKPOINT,
                                     ContainerError, canonical_json,
                                     file_sha256, load_checkpoint,
                                     read_container, read_manifest_dataset,
                                     save_checkpoint, write_container,
                                     write_manifest_dataset)


# ---------------------------------------------------------------------------
# container round trips


def test_container_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(100)
    path = tmp_path / "c.bin"
    arrays = {
        "weights": rng.standard_normal((3, 4)).astype(np.float32),
        "labels": np.array([5, -2, 7], dtype=np.int64),
        "scalar": np.float32(2.5),
        "cube": rng.standard_normal((2, 3, 2)).astype(np.float32),
    }
    meta = {"epoch": 12, "name": "base", "nested": {"lr": 0.001}}
    write_container(path, KIND_CHECKPOINT, meta, arrays)
    got_meta, got = read_container(path)
    assert got_meta == meta
    assert sorted(got) == sorted(arrays)
    for name in arrays:
        expect = np.asarray(arrays[name])
        assert got[name].dtype == expect.dtype
        assert got[name].shape == expect.shape
        assert got[name].tobytes() == expect.tobytes()


def test_container_write_deterministic(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}
    write_container(tmp_path / "x.bin", KIND_ANCHORS, {"k": 1}, arrays)
    write_container(tmp_path / "y.bin", KIND_ANCHORS, {"k": 1}, arrays)
    assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()


def test_container_float64_narrowed_to_float32(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, KIND_ANCHORS, {}, {"v": np.array([1.0, 2.0])})
    _, got = read_container(path)
    assert got["v"].dtype == np.float32


def test_container_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ContainerError):
        write_container(tmp_path / "c.bin", KIND_ANCHORS, {},
                        {"v": np.array([1 + 2j])})


def test_container_kind_check(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, KIND_ANCHORS, {}, {})
    read_container(path, expect_kind=KIND_ANCHORS)
    with pytest.raises(ContainerError):
        read_container(path, expect_kind=KIND_CHECKPOINT)


def test_container_bad_magic(tmp_path):
    path = tmp_path / "c.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(ContainerError):
        read_container(path)


def test_container_truncated(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, KIND_ANCHORS, {"a": 1},
                    {"v": np.ones((4, 4), dtype=np.float32)})
    blob = path.read_bytes()
    clipped = tmp_path / "clipped.bin"
    clipped.write_bytes(blob[:len(blob) - 10])
    with pytest.raises(ContainerError):
        read_container(clipped)


def test_container_bad_version(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, KIND_ANCHORS, {}, {})
    blob = bytearray(path.read_bytes())
    blob[8] = 99  # version field follows the 8-byte magic
    path.write_bytes(bytes(blob))
    with pytest.raises(ContainerError):
        read_container(path)


# ---------------------------------------------------------------------------
# model checkpoints


def test_checkpoint_round_trip_conv(tmp_path):
    config = BACKBONE_PRESETS["desk"]
    state = ModelState(ConvBackbone.initialize(config, seed=3))
    rng = np.random.default_rng(101)
    state.register_class(0, rng.standard_normal(state.feature_dim))
    state.register_class(1, rng.standard_normal(state.feature_dim))
    path = tmp_path / "model.bin"
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)
    assert loaded.seen_classes() == [0, 1]
    assert loaded.temperature == state.temperature
    for name, tensor in state.backbone.params.items():
        assert loaded.backbone.params[name].data.tobytes() == tensor.data.tobytes()
        assert loaded.backbone.params[name].requires_grad
    for c in (0, 1):
        assert (loaded.class_weights[c].data.tobytes()
                == state.class_weights[c].data.tobytes())
    # same inputs produce identical features after the round trip
    x = rng.standard_normal((2, config.channels, config.timesteps)).astype(np.float32)
    np.testing.assert_array_equal(embed_batch(loaded, x).data, embed_batch(state, x).data)


def test_checkpoint_preserves_feature_stats(tmp_path):
    state = ModelState(ConvBackbone.initialize(BACKBONE_PRESETS["desk"], seed=4))
    state.feature_stats = FeatureStats(mean=np.full(state.feature_dim, 0.25,
                                                    dtype=np.float32),
                                       var=np.full(state.feature_dim, 2.0,
                                                   dtype=np.float32))
    path = tmp_path / "model.bin"
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.feature_stats.mean, state.feature_stats.mean)
    np.testing.assert_array_equal(loaded.feature_stats.var, state.feature_stats.var)


def test_checkpoint_round_trip_linear(tmp_path):
    rng = np.random.default_rng(102)
    weight = Tensor(rng.standard_normal((6, 3)).astype(np.float32), requires_grad=True)
    state = ModelState(LinearBackbone(2, 3, weight))
    state.register_class(4, rng.standard_normal(3))
    path = tmp_path / "model.bin"
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)
    assert loaded.backbone.kind == "linear"
    assert loaded.backbone.params["weight"].data.tobytes() == weight.data.tobytes()
    assert loaded.seen_classes() == [4]


def test_checkpoint_wrong_kind_file(tmp_path):
    path = tmp_path / "anchors.bin"
    write_container(path, KIND_ANCHORS, {}, {})
    with pytest.raises(ContainerError):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# dataset manifests


def test_manifest_round_trip(tmp_path):
    rng = np.random.default_rng(103)
    x = rng.standard_normal((5, 3, 8)).astype(np.float32)
    y = np.array([0, 1, 1, 2, 0], dtype=np.int64)
    manifest_path = write_manifest_dataset(tmp_path, Dataset(x, y), "train",
                                           sample_rate=250.0, synthetic=True)
    assert manifest_path.name == "manifest_train.json"
    loaded = read_manifest_dataset(manifest_path)
    assert loaded.x.dtype == np.float32
    assert loaded.x.tobytes() == x.tobytes()
    np.testing.assert_array_equal(loaded.y, y)


def test_manifest_payloads_are_raw_float32(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    write_manifest_dataset(tmp_path, Dataset(x, np.array([7])), "test")
    blob = (tmp_path / "test_00000.f32").read_bytes()
    assert blob == x[0].tobytes()
    manifest = json.loads((tmp_path / "manifest_test.json").read_text())
    assert manifest["channels"] == 2
    assert manifest["timesteps"] == 3
    assert manifest["entries"][0]["class_id"] == 7


def test_manifest_size_mismatch(tmp_path):
    x = np.zeros((1, 2, 3), dtype=np.float32)
    path = write_manifest_dataset(tmp_path, Dataset(x, np.array([0])), "train")
    (tmp_path / "train_00000.f32").write_bytes(b"\x00" * 8)  # 2 floats, not 6
    with pytest.raises(ContainerError):
        read_manifest_dataset(path)


def test_manifest_empty_dataset(tmp_path):
    empty = Dataset(np.zeros((0, 4, 8), dtype=np.float32), np.zeros(0, dtype=np.int64))
    path = write_manifest_dataset(tmp_path, empty, "train")
    loaded = read_manifest_dataset(path)
    assert loaded.x.shape == (0, 4, 8)


def test_manifest_subject_ids(tmp_path):
    x = np.zeros((2, 1, 4), dtype=np.float32)
    write_manifest_dataset(tmp_path, Dataset(x, np.array([0, 1])), "train",
                           subject_ids=np.array([10, 42]))
    manifest = json.loads((tmp_path / "manifest_train.json").read_text())
    assert [e["subject_id"] for e in manifest["entries"]] == [10, 42]


# ---------------------------------------------------------------------------
# canonical JSON / hashing


def test_canonical_json_is_key_order_independent():
    a = canonical_json({"b": 1, "a": [1, 2], "c": {"y": 0, "x": 1}})
    b = canonical_json({"c": {"x": 1, "y": 0}, "a": [1, 2], "b": 1})
    assert a == b
    assert a.endswith("\n")
    assert " " not in a


def test_file_sha256_matches_hashlib(tmp_path):
    path = tmp_path / "blob.bin"
    payload = b"some bytes \x00\x01\x02"
    path.write_bytes(payload)
    assert file_sha256(path) == hashlib.sha256(payload).hexdigest()
