import numpy as np
import pytest
import torch

from src.tools.message_codec import (
    BINARY_ENCODING,
    EccConfig,
    actual_length,
    bits_to_bytes,
    bytes_to_bits,
    decode_plane,
    ecc_decode,
    ecc_encode,
    encode_plane,
    make_trigger,
    plane_to_raw,
    random_bits,
)
from src.utils.errors import ConfigurationError, EccDecodeError, PayloadSizeError

RS = EccConfig(scheme="reed_solomon", rs_n=255, rs_k=223)


@pytest.mark.parametrize("block_size, expected", [(1, 16384), (8, 256), (16, 64), (128, 1)])
def test_actual_length(block_size, expected):
    assert actual_length(128, block_size) == expected


def test_actual_length_rejects_non_dividing_block():
    with pytest.raises(ConfigurationError, match="N=3"):
        actual_length(128, 3)


@pytest.mark.parametrize("block_size", [1, 2, 4, 8, 16, 32, 64, 128])
def test_plane_round_trip_is_exact(block_size):
    al = actual_length(128, block_size)
    generator = torch.Generator().manual_seed(block_size)
    for _ in range(10):
        bits = random_bits(al, generator, batch=100)
        planes = encode_plane(bits, 128, block_size)
        assert planes.shape == (100, 3, 128, 128)
        np.testing.assert_array_equal(decode_plane(planes, 128, block_size), bits.numpy())


def test_encode_plane_layout_is_row_major():
    bits = np.zeros(16, dtype=np.uint8)
    bits[5] = 1  # row 1, column 1 of a 4x4 grid
    plane = encode_plane(bits, 16, 4)

    assert plane.shape == (3, 16, 16)
    assert torch.all(plane[:, 4:8, 4:8] == 1.0)
    assert torch.all(plane[:, :4, :] == -1.0)
    assert plane.sum().item() == pytest.approx(-(768 - 2 * 48))


def test_encode_plane_rejects_wrong_length():
    with pytest.raises(PayloadSizeError):
        encode_plane(np.zeros(10, dtype=np.uint8), 16, 4)


def test_decode_plane_threshold_is_strictly_positive():
    assert decode_plane(torch.zeros(3, 16, 16), 16, 4).sum() == 0
    assert decode_plane(torch.full((3, 16, 16), 1e-3), 16, 4).sum() == 16


def test_binary_encoding_round_trip():
    bits = np.array([1, 0, 0, 1], dtype=np.uint8)
    plane = encode_plane(bits, 8, 4, encoding=BINARY_ENCODING)

    assert set(plane.unique().tolist()) == {0.0, 1.0}
    np.testing.assert_array_equal(decode_plane(plane, 8, 4), bits)


def test_binary_encoding_decodes_at_the_midpoint():
    plane = torch.full((3, 8, 8), 0.4)
    plane[:, :4, 4:] = 0.6

    np.testing.assert_array_equal(decode_plane(plane, 8, 4, encoding=BINARY_ENCODING), [0, 1, 0, 0])
    assert decode_plane(plane, 8, 4).sum() == 4


def test_trigger_decodes_to_zero_bits():
    trigger = make_trigger(128)

    assert trigger.shape == (3, 128, 128)
    assert torch.all(trigger == -1.0)
    assert decode_plane(trigger, 128, 8).sum() == 0
    assert torch.equal(trigger, make_trigger(128))


def test_plane_to_raw_renders_black_and_white():
    plane = encode_plane(np.array([0, 1, 1, 0], dtype=np.uint8), 8, 4)
    raw = plane_to_raw(plane)

    assert raw.shape == (8, 8, 3)
    assert raw[0, 0, 0] == 0
    assert raw[0, 7, 0] == 255


def test_bit_packing_is_msb_first():
    np.testing.assert_array_equal(bytes_to_bits(b"\xa5"), [1, 0, 1, 0, 0, 1, 0, 1])
    assert bits_to_bytes([1, 0, 1, 0, 0, 1, 0, 1]) == (b"\xa5", 8)
    assert bits_to_bytes([1, 1, 1]) == (b"\xe0", 3)


def test_ecc_round_trip_and_empty_payload():
    payload = bytes(range(200)) * 2
    encoded = ecc_encode(payload, RS)

    assert len(encoded) % 255 == 0
    assert ecc_decode(encoded, RS) == payload
    assert ecc_encode(b"", RS) == b""
    assert ecc_decode(b"", RS) == b""


def test_ecc_corrects_up_to_sixteen_byte_errors():
    rng = np.random.default_rng(0)
    for trial in range(100):
        payload = rng.integers(0, 256, 219, dtype=np.uint8).tobytes()
        codeword = bytearray(ecc_encode(payload, RS))
        assert len(codeword) == 255
        errors = int(rng.integers(0, 17))
        for position in rng.choice(255, size=errors, replace=False):
            codeword[position] ^= int(rng.integers(1, 256))
        assert ecc_decode(bytes(codeword), RS) == payload, f"trial {trial} with {errors} errors"


def test_ecc_reports_failure_beyond_capability():
    rng = np.random.default_rng(1)
    codeword = bytearray(ecc_encode(b"secret payload", RS))
    for position in rng.choice(255, size=60, replace=False):
        codeword[position] ^= int(rng.integers(1, 256))

    with pytest.raises(EccDecodeError):
        ecc_decode(bytes(codeword), RS)


def test_ecc_ignores_corrupted_plane_padding():
    small = EccConfig(scheme="reed_solomon", rs_n=32, rs_k=16)
    payload = b"0123456789"
    framed = ecc_encode(payload, small)
    assert len(framed) == 32

    padded = bytearray(framed + b"\x00" * 96)
    for position in range(64, 73):
        padded[position] ^= 0xff

    assert ecc_decode(bytes(padded), small) == payload


def test_ecc_rejects_length_header_beyond_available_codewords():
    small = EccConfig(scheme="reed_solomon", rs_n=32, rs_k=16)
    framed = ecc_encode(bytes(40), small)

    assert len(framed) == 3 * 32
    with pytest.raises(EccDecodeError, match="length header"):
        ecc_decode(framed[:64], small)


def test_ecc_disabled_passes_bytes_through():
    assert ecc_encode(b"abc", EccConfig()) == b"abc"


def test_ecc_config_validation():
    assert RS.correctable_bytes == 16
    with pytest.raises(ValueError):
        EccConfig(scheme="reed_solomon", rs_n=100, rs_k=120)
