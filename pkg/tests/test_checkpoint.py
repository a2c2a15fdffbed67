import struct
import zlib

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from resampnet.checkpoint import MAGIC, VERSION, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from resampnet.errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from resampnet.network import NetworkConfig, build_network

CFG = NetworkConfig(input_size=64, width_divisor=8)


@pytest.fixture(scope="module")
def trained_like():
    """A network whose running statistics differ from their initial values."""
    net = build_network(CFG, seed=2)
    x = np.random.default_rng(0).uniform(0, 1, (4, 64, 64, 1)).astype(np.float32)
    net.forward(x, training=True)
    return net


@pytest.fixture(scope="module")
def blob(trained_like):
    return encode_checkpoint(trained_like)


def test_round_trip_forward_is_bit_exact(tmp_path, trained_like):
    save_checkpoint(trained_like, tmp_path / "a.dsrn")
    loaded = load_checkpoint(tmp_path / "a.dsrn")
    x = np.random.default_rng(1).uniform(0, 1, (3, 64, 64, 1)).astype(np.float32)
    np.testing.assert_array_equal(loaded.forward(x), trained_like.forward(x))
    assert loaded.config == trained_like.config


def test_round_trip_restores_every_array(tmp_path, trained_like):
    save_checkpoint(trained_like, tmp_path / "a.dsrn")
    loaded = load_checkpoint(tmp_path / "a.dsrn")
    a, b = trained_like.state_dict(), loaded.state_dict()
    assert list(a) == list(b)
    for k in a:
        assert a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]), k


def test_save_load_save_is_byte_identical(tmp_path, trained_like):
    save_checkpoint(trained_like, tmp_path / "a.dsrn")
    save_checkpoint(load_checkpoint(tmp_path / "a.dsrn"), tmp_path / "b.dsrn")
    assert (tmp_path / "a.dsrn").read_bytes() == (tmp_path / "b.dsrn").read_bytes()


def test_float64_network_round_trip(tmp_path):
    net = build_network(CFG, seed=0, dtype=np.float64)
    save_checkpoint(net, tmp_path / "d.dsrn")
    assert load_checkpoint(tmp_path / "d.dsrn").dtype == np.float64


@pytest.mark.parametrize("cfg", [
    NetworkConfig(input_size=64, width_divisor=8, streams="horizontal-only", activation="relu"),
    NetworkConfig(input_size=64, width_divisor=8, num_classes=15, noise_layer="none"),
])
def test_ablation_configs_round_trip(tmp_path, cfg):
    net = build_network(cfg, seed=1)
    save_checkpoint(net, tmp_path / "c.dsrn")
    assert load_checkpoint(tmp_path / "c.dsrn").config == cfg


def test_header_layout(blob, trained_like):
    assert blob[:4] == MAGIC
    assert struct.unpack("<I", blob[4:8])[0] == VERSION
    n = struct.unpack("<I", blob[8:12])[0]
    assert blob[12:12 + n].decode() == trained_like.config.to_json()
    count = struct.unpack("<I", blob[12 + n:16 + n])[0]
    assert count == len(trained_like.state_dict())
    name_len = struct.unpack("<I", blob[16 + n:20 + n])[0]
    assert blob[20 + n:20 + n + name_len] == b"noise.h.kernels"
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_bad_magic(blob):
    with pytest.raises(CheckpointMagicError):
        decode_checkpoint(b"XXXX" + blob[4:])


def test_bad_version(blob):
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(blob[:4] + struct.pack("<I", VERSION + 1) + blob[8:])


@pytest.mark.parametrize("cut", [0, 3, 7, 11, 100, -5, -1])
def test_truncated(blob, cut):
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(blob[:cut])


def test_every_truncation_is_a_typed_error(blob):
    for cut in range(0, len(blob), 53):
        with pytest.raises(CheckpointError):
            decode_checkpoint(blob[:cut])


def test_payload_bit_flip_detected(blob):
    b = bytearray(blob)
    b[len(b) // 2] ^= 0x10
    with pytest.raises(CheckpointChecksumError):
        decode_checkpoint(bytes(b))


def test_trailing_bytes_rejected(blob):
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob + b"\x00")


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.data())
def test_random_corruption_never_crashes(blob, data):
    b = bytearray(blob)
    for _ in range(data.draw(st.integers(1, 4))):
        i = data.draw(st.integers(0, len(b) - 1))
        b[i] = data.draw(st.integers(0, 255))
    if bytes(b) == blob:
        return
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(b))


def _reencode(header_cfg_json: bytes, blob: bytes, old_cfg_len: int) -> bytes:
    body = blob[:8] + struct.pack("<I", len(header_cfg_json)) + header_cfg_json + blob[12 + old_cfg_len:-4]
    return body + struct.pack("<I", zlib.crc32(body))


def test_shape_mismatch_against_config(tmp_path, blob, trained_like):
    n = struct.unpack("<I", blob[8:12])[0]
    other = NetworkConfig(input_size=64, width_divisor=4).to_json().encode()
    (tmp_path / "s.dsrn").write_bytes(_reencode(other, blob, n))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "s.dsrn")


def test_invalid_config_json(tmp_path, blob):
    n = struct.unpack("<I", blob[8:12])[0]
    (tmp_path / "j.dsrn").write_bytes(_reencode(b'{"streams": "three"}', blob, n))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "j.dsrn")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.dsrn")


def test_atomic_write_leaves_no_temporaries(tmp_path, trained_like):
    save_checkpoint(trained_like, tmp_path / "a.dsrn")
    save_checkpoint(trained_like, tmp_path / "a.dsrn")
    assert [p.name for p in tmp_path.iterdir()] == ["a.dsrn"]
