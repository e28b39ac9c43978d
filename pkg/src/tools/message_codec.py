"""Payload bits <-> block-structured message planes, plus Reed-Solomon framing.

A message plane of size S×S×3 is cut into (S/N)² blocks of N×N×3 samples;
block (i, j) carries bit i·(S/N)+j (row-major) as a constant symbol.
"""
from __future__ import annotations

from typing import Literal, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator
from reedsolo import ReedSolomonError, RSCodec

from ..utils.errors import ConfigurationError, EccDecodeError, PayloadSizeError
from ..utils.logging_config import module_logger

logger = module_logger('MESSAGE_CODEC', 'message_codec')

SYMMETRIC_ENCODING: tuple[float, float] = (-1.0, 1.0)
BINARY_ENCODING: tuple[float, float] = (0.0, 1.0)
ENCODINGS = {"symmetric": SYMMETRIC_ENCODING, "binary": BINARY_ENCODING}

# raw black in the normalized domain
TRIGGER_VALUE = -1.0

# big-endian byte count prepended to the plaintext before RS chunking
LENGTH_HEADER_BYTES = 4

__all__ = [
    "EccConfig",
    "actual_length",
    "encode_plane",
    "decode_plane",
    "bytes_to_bits",
    "bits_to_bytes",
    "random_bits",
    "ecc_encode",
    "ecc_decode",
    "plane_to_raw",
    "make_trigger",
    "TRIGGER_VALUE",
    "SYMMETRIC_ENCODING",
    "BINARY_ENCODING",
    "ENCODINGS",
]


class EccConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scheme: Literal["none", "reed_solomon"] = "none"
    rs_n: int = 255
    rs_k: int = 223

    @model_validator(mode="after")
    def _check_code(self) -> "EccConfig":
        if self.scheme == "reed_solomon" and not (0 < self.rs_k < self.rs_n <= 255):
            raise ValueError(f"reed_solomon needs 0 < rs_k < rs_n <= 255, got rs_n={self.rs_n} rs_k={self.rs_k}")
        return self

    @property
    def correctable_bytes(self) -> int:
        return (self.rs_n - self.rs_k) // 2 if self.scheme == "reed_solomon" else 0


def actual_length(image_size: int, block_size: int) -> int:
    """AL = (S/N)², the number of payload bits one plane carries."""
    if block_size <= 0 or image_size <= 0 or image_size % block_size:
        raise ConfigurationError(f"block_size N={block_size} must divide image_size S={image_size}")
    return (image_size // block_size) ** 2


def random_bits(count: int, generator: torch.Generator | None = None, batch: int | None = None) -> torch.Tensor:
    """Uniform random payload bits as uint8, shape (count,) or (batch, count)."""
    shape = (count,) if batch is None else (batch, count)
    return torch.randint(0, 2, shape, generator=generator, dtype=torch.uint8)


def encode_plane(
    bits: np.ndarray | torch.Tensor | Sequence[int],
    image_size: int,
    block_size: int,
    encoding: tuple[float, float] = SYMMETRIC_ENCODING,
) -> torch.Tensor:
    """
    Fill each block with the bit-0 or bit-1 symbol of *encoding*.

    *bits* may be (AL,) or batched (B, AL); the result is (3, S, S) or (B, 3, S, S).
    """
    al = actual_length(image_size, block_size)
    bits_t = torch.as_tensor(np.asarray(bits) if not isinstance(bits, torch.Tensor) else bits)
    if bits_t.shape[-1:] != (al,) or bits_t.ndim not in (1, 2):
        raise PayloadSizeError(
            f"expected {al} bits for S={image_size}, N={block_size}, got shape {tuple(bits_t.shape)}"
        )
    if encoding not in ENCODINGS.values():
        raise ConfigurationError(f"unsupported bit encoding {encoding}")
    zero, one = encoding
    grid = image_size // block_size
    symbols = torch.where(bits_t.to(torch.bool), torch.tensor(one), torch.tensor(zero)).to(torch.float32)
    lead = bits_t.shape[:-1]
    symbols = symbols.reshape(*lead, grid, grid)
    plane = symbols.repeat_interleave(block_size, dim=-2).repeat_interleave(block_size, dim=-1)
    plane = plane.unsqueeze(-3).expand(*lead, 3, image_size, image_size)
    return plane.contiguous()


def decode_plane(plane: torch.Tensor, image_size: int, block_size: int,
                 encoding: tuple[float, float] = SYMMETRIC_ENCODING) -> np.ndarray:
    """Mean of the 3·N² samples of each block against the midpoint of *encoding* (row-major).

    The midpoint is 0 for the symmetric (-1, 1) encoding and 0.5 for binary (0, 1);
    a mean strictly above it decodes to 1.
    """
    threshold = (encoding[0] + encoding[1]) / 2
    grid = image_size // block_size
    actual_length(image_size, block_size)
    values = plane.detach().to('cpu', torch.float64)
    if values.shape[-3:] != (3, image_size, image_size):
        raise PayloadSizeError(f"expected a (..., 3, {image_size}, {image_size}) plane, got {tuple(values.shape)}")
    lead = values.shape[:-3]
    blocks = values.reshape(*lead, 3, grid, block_size, grid, block_size)
    means = blocks.mean(dim=(-5, -3, -1))
    return (means > threshold).reshape(*lead, grid * grid).to(torch.uint8).numpy()


def plane_to_raw(plane: torch.Tensor, encoding: tuple[float, float] = SYMMETRIC_ENCODING) -> np.ndarray:
    """Render a plane for inspection: bit-1 blocks white, bit-0 blocks black."""
    zero, one = encoding
    values = (plane.detach().cpu().float() - zero) / (one - zero)
    values = torch.clamp(values, 0.0, 1.0)
    return torch.round(values * 255).to(torch.uint8).permute(1, 2, 0).numpy()


def bytes_to_bits(payload: bytes) -> np.ndarray:
    """MSB-first expansion: 0xA5 -> [1,0,1,0,0,1,0,1]."""
    return np.unpackbits(np.frombuffer(bytes(payload), dtype=np.uint8), bitorder='big')


def bits_to_bytes(bits: np.ndarray | Sequence[int]) -> tuple[bytes, int]:
    """Pack MSB-first; the last partial byte is zero-padded. Returns (bytes, true bit length)."""
    arr = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if arr.size and arr.max() > 1:
        raise PayloadSizeError("bit values must be 0 or 1")
    return np.packbits(arr, bitorder='big').tobytes(), int(arr.size)


# ------------------------------------------------------------------
#  Reed-Solomon framing
# ------------------------------------------------------------------
def _codec(cfg: EccConfig) -> RSCodec:
    return RSCodec(cfg.rs_n - cfg.rs_k, nsize=cfg.rs_n)


def ecc_encode(payload: bytes, cfg: EccConfig) -> bytes:
    """
    Systematic RS over GF(2⁸).

    The plaintext is a 4-byte big-endian length header followed by the payload,
    zero-padded to a multiple of rs_k; each rs_k chunk becomes one rs_n codeword.
    """
    payload = bytes(payload)
    if cfg.scheme == "none" or not payload:
        return payload
    plaintext = len(payload).to_bytes(LENGTH_HEADER_BYTES, 'big') + payload
    pad = (-len(plaintext)) % cfg.rs_k
    plaintext += b'\x00' * pad
    codec = _codec(cfg)
    encoded = bytearray()
    for offset in range(0, len(plaintext), cfg.rs_k):
        encoded += codec.encode(plaintext[offset:offset + cfg.rs_k])
    logger.debug(f"RS({cfg.rs_n},{cfg.rs_k}) framed {len(payload)} bytes into {len(encoded)} bytes")
    return bytes(encoded)


def ecc_decode(codeword: bytes, cfg: EccConfig) -> bytes:
    """
    Inverse of ecc_encode; raises EccDecodeError when a needed codeword is uncorrectable.

    The first codeword carries the length header, which fixes how many codewords
    hold the payload; anything after them is plane padding and is never decoded.
    """
    codeword = bytes(codeword)
    if cfg.scheme == "none" or not codeword:
        return codeword
    available = len(codeword) // cfg.rs_n
    if available == 0:
        raise EccDecodeError(f"need at least one {cfg.rs_n}-byte codeword, got {len(codeword)} bytes")
    codec = _codec(cfg)
    corrected = 0

    def _block(index: int) -> bytes:
        nonlocal corrected
        block = codeword[index * cfg.rs_n:(index + 1) * cfg.rs_n]
        try:
            message, _, errata = codec.decode(block)
        except ReedSolomonError as exc:
            logger.error(f"Codeword {index} is uncorrectable: {exc}")
            raise EccDecodeError(f"codeword {index} uncorrectable: {exc}") from exc
        corrected += len(errata)
        return bytes(message)

    plaintext = bytearray(_block(0))
    length = int.from_bytes(plaintext[:LENGTH_HEADER_BYTES], 'big')
    needed = -(-(LENGTH_HEADER_BYTES + length) // cfg.rs_k)
    if needed > available:
        logger.error(f"Length header {length} needs {needed} codewords, only {available} present")
        raise EccDecodeError(f"length header {length} inconsistent with {available} codeword(s)")
    for index in range(1, needed):
        plaintext += _block(index)
    if corrected:
        logger.info(f"RS decoder corrected {corrected} byte(s)")
    return bytes(plaintext[LENGTH_HEADER_BYTES:LENGTH_HEADER_BYTES + length])

def make_trigger(image_size: int, value: float = TRIGGER_VALUE) -> torch.Tensor:
    """Constant (3, S, S) plane that switches the network into extraction mode."""
    return torch.full((3, image_size, image_size), float(value), dtype=torch.float32)
