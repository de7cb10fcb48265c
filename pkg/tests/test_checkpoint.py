import struct

import numpy as np
import pytest

from dirforge import checkpoint, imageio, world


def tensors(rng):
    return {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "s": np.array(2.5)}


def test_round_trip_after_f32_quantisation(tmp_path, rng):
    t = tensors(rng)
    p = checkpoint.write_checkpoint(tmp_path / "x.gtfw", t, {"provenance": {"config_hash": "ab"}})
    back, header = checkpoint.read_checkpoint(p)
    assert list(back) == list(t)
    for k in t:
        np.testing.assert_array_equal(back[k], t[k].astype(np.float32).astype(np.float64))
    assert header["provenance"]["config_hash"] == "ab"
    assert [e["name"] for e in header["tensors"]] == ["a", "b", "s"]


def test_prefix_layout(rng):
    blob = checkpoint.encode(tensors(rng))
    magic, version, hlen = struct.unpack_from("<4sIQ", blob)
    assert magic == b"GTFW" and version == checkpoint.VERSION
    assert len(blob) == 16 + hlen + (12 + 5 + 1) * 4


def test_truncation_is_typed(tmp_path, rng):
    blob = checkpoint.encode(tensors(rng))
    for cut in (1, 20, len(blob) // 2):
        with pytest.raises(checkpoint.TruncatedCheckpointError):
            checkpoint.decode(blob[:-cut])
    with pytest.raises(checkpoint.TruncatedCheckpointError):
        checkpoint.decode(blob[:3])


def test_magic_and_version(rng):
    blob = bytearray(checkpoint.encode(tensors(rng)))
    bad = bytes(b"XXXX" + blob[4:])
    with pytest.raises(checkpoint.MagicMismatchError):
        checkpoint.decode(bad)
    struct.pack_into("<I", blob, 4, 99)
    with pytest.raises(checkpoint.VersionMismatchError):
        checkpoint.decode(bytes(blob))


def test_shape_payload_mismatch_names_tensor(rng):
    blob = checkpoint.encode(tensors(rng))
    _, _, hlen = struct.unpack_from("<4sIQ", blob)
    header = blob[16:16 + hlen].replace(b'"shape":[5]', b'"shape":[6]')
    with pytest.raises(checkpoint.PayloadMismatchError) as exc:
        checkpoint.decode(blob[:16] + header + blob[16 + hlen:])
    assert exc.value.tensor == "b"


def test_trailing_bytes_rejected(rng):
    with pytest.raises(checkpoint.PayloadMismatchError):
        checkpoint.decode(checkpoint.encode(tensors(rng)) + b"\0\0\0\0")


def test_pgm_round_trip(tmp_path):
    x = world.render(np.array([0.4, 0.6, 0.12, 0.9, 1.5, 0.05]))
    p = imageio.write_pgm(tmp_path / "a.pgm", x, "config_hash=abc seed=0")
    y, comments = imageio.read_pgm(p)
    assert comments == ["config_hash=abc seed=0"]
    # 16-bit quantisation step is PIXEL_MAX / 65535
    assert np.max(np.abs(x - y)) <= world.PIXEL_MAX / 65535
    assert p.read_bytes().startswith(b"P5\n")


def test_raw_round_trip(tmp_path, rng):
    x = rng.uniform(0, 1, (3, world.N_PIXELS))
    p = imageio.write_raw(tmp_path / "a.f32", x)
    np.testing.assert_array_equal(imageio.read_images(p), x.astype(np.float32))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError):
        imageio.read_raw(p)
