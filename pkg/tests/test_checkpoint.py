import numpy as np
import pytest

from slimarl.checkpoint import (
    Bundle,
    BundleEntry,
    file_sha256,
    load_bundle,
    load_network,
    save_bundle,
    save_network,
)
from slimarl.errors import (
    CheckpointCorruptError,
    CheckpointHashError,
    CheckpointVersionError,
)
from slimarl.nets import NetworkSpec, init_params


def test_network_round_trip_is_bit_exact(tmp_path):
    spec = NetworkSpec(7, 16, 5, recurrent=True)
    store = init_params(spec, np.random.default_rng(0))
    path = tmp_path / "net.ckpt"
    save_network(path, spec, store, meta={"config_hash": "abc"}, seed=42)
    spec2, store2, meta = load_network(path)
    assert spec2 == spec
    assert np.array_equal(store2.values, store.values)
    assert meta == {"config_hash": "abc"}


def test_bundle_round_trip_with_matrices(tmp_path):
    spec = NetworkSpec(3, 4, 2)
    store = init_params(spec, np.random.default_rng(1))
    mat = np.random.default_rng(2).normal(size=(4, 6))
    path = tmp_path / "bundle.ckpt"
    save_bundle(path, [
        BundleEntry("actor", "network", store.values, spec=spec),
        BundleEntry("proj", "matrix", mat, shape=mat.shape),
    ], meta={"k": 1}, seed=7)
    b = load_bundle(path)
    spec2, store2 = b.network("actor")
    assert spec2 == spec
    assert np.array_equal(store2.values, store.values)
    assert np.array_equal(b.matrix("proj"), mat)
    assert b.seed == 7


def test_identical_inputs_produce_identical_files(tmp_path):
    spec = NetworkSpec(3, 4, 2)
    store = init_params(spec, np.random.default_rng(3))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    for p in (p1, p2):
        save_network(p, spec, store, meta={"m": [1, 2]}, seed=0)
    assert p1.read_bytes() == p2.read_bytes()
    assert file_sha256(p1) == file_sha256(p2)


def test_truncated_file_is_a_typed_error(tmp_path):
    spec = NetworkSpec(3, 4, 2)
    store = init_params(spec, np.random.default_rng(4))
    path = tmp_path / "net.ckpt"
    save_network(path, spec, store, meta={})
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointCorruptError):
        load_bundle(path)


def test_not_a_checkpoint_is_a_typed_error(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"this is not a checkpoint at all")
    with pytest.raises(CheckpointCorruptError):
        load_bundle(path)


def test_wrong_version_is_a_typed_error(tmp_path):
    spec = NetworkSpec(3, 4, 2)
    store = init_params(spec, np.random.default_rng(5))
    path = tmp_path / "net.ckpt"
    save_network(path, spec, store, meta={})
    raw = bytearray(path.read_bytes())
    raw[8] = 99  # format version byte
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_bundle(path)


def test_tampered_bytes_fail_integrity_check(tmp_path):
    spec = NetworkSpec(3, 4, 2)
    store = init_params(spec, np.random.default_rng(6))
    path = tmp_path / "net.ckpt"
    save_network(path, spec, store, meta={"seed": 1})
    raw = bytearray(path.read_bytes())
    raw[30] ^= 0xFF  # flip a header byte, leaving lengths intact
    path.write_bytes(bytes(raw))
    with pytest.raises((CheckpointHashError, CheckpointCorruptError)):
        load_bundle(path)
