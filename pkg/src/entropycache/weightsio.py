"""ECW1 weights container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"ECW1"
    4       4     u32 format version (1)
    8       4     u32 num_layers
    12      4     u32 num_heads
    16      4     u32 head_dim
    20      4     u32 vocab_size
    24      4     u32 ffn_mult
    28      4     u32 max_seq_len
    32      4     u32 mask_token_id
    36      8     u64 rng_seed
    44      8     u64 logit_scale as IEEE-754 float64 bit pattern
    52      4     u32 tensor count
    56      8     u64 payload length in bytes
    64      n     payload: tensors in ModelWeights.tensors() order, each
                  flattened row-major as little-endian float32
    64+n    8     u64 FNV-1a (64-bit) hash of the payload bytes

Tensor shapes are not stored; they follow from the header config (see
``model.tensor_shapes``).
"""
from __future__ import annotations

import dataclasses
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, ConfigMismatch, NotAWeightsFile, Truncated, WriteFailed
from .model import ModelConfig, ModelWeights, tensor_shapes, weights_from_tensors

MAGIC = b"ECW1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIIIQQIQ")
_CHECKSUM = struct.Struct("<Q")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def _f64_bits(x: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", x))[0]


def _bits_f64(b: int) -> float:
    return struct.unpack("<d", struct.pack("<Q", b))[0]


def encode(weights: ModelWeights) -> bytes:
    cfg = weights.config
    tensors = weights.tensors()
    payload = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for _, t in tensors)
    header = _HEADER.pack(
        MAGIC, VERSION, cfg.num_layers, cfg.num_heads, cfg.head_dim, cfg.vocab_size,
        cfg.ffn_mult, cfg.max_seq_len, cfg.mask_token_id, cfg.rng_seed & _MASK64,
        _f64_bits(cfg.logit_scale), len(tensors), len(payload),
    )
    return header + payload + _CHECKSUM.pack(fnv1a64(payload))


def decode(blob: bytes) -> tuple[ModelConfig, ModelWeights]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise NotAWeightsFile("missing ECW1 magic")
    if len(blob) < _HEADER.size:
        raise Truncated("header is incomplete")
    (_, version, layers, heads, head_dim, vocab, ffn_mult, max_len, mask_id, seed,
     scale_bits, count, nbytes) = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise NotAWeightsFile(f"unsupported ECW1 version {version}")
    cfg = ModelConfig(
        num_layers=layers, num_heads=heads, head_dim=head_dim, vocab_size=vocab,
        ffn_mult=ffn_mult, max_seq_len=max_len, mask_token_id=mask_id, rng_seed=seed,
        logit_scale=_bits_f64(scale_bits),
    )
    shapes = tensor_shapes(cfg)
    expected = sum(4 * int(np.prod(s)) for _, s in shapes)
    if count != len(shapes) or nbytes != expected:
        raise NotAWeightsFile("tensor table does not match the header config")
    end = _HEADER.size + nbytes
    if len(blob) < end + _CHECKSUM.size:
        raise Truncated(f"expected {end + _CHECKSUM.size} bytes, got {len(blob)}")
    payload = blob[_HEADER.size:end]
    (stored,) = _CHECKSUM.unpack_from(blob, end)
    if fnv1a64(payload) != stored:
        raise ChecksumMismatch("payload checksum does not match")
    tensors, off = [], 0
    for _, shape in shapes:
        n = int(np.prod(shape))
        t = np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
        tensors.append(t)
        off += 4 * n
    return cfg, weights_from_tensors(cfg, tensors)


def save(weights: ModelWeights, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    blob = encode(weights)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(blob)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise WriteFailed(f"could not write {path}: {exc}") from exc


def load(path, expected: ModelConfig | dict | None = None) -> tuple[ModelConfig, ModelWeights]:
    """Read an ECW1 file.

    ``expected`` is either a full config or a dict of field overrides (for
    example the model flags a user passed); any disagreement with the file
    header raises ``ConfigMismatch``.
    """
    cfg, weights = decode(Path(path).read_bytes())
    if expected is not None:
        check_config(cfg, expected)
    return cfg, weights


def check_config(cfg: ModelConfig, expected: ModelConfig | dict) -> None:
    want = dataclasses.asdict(expected) if isinstance(expected, ModelConfig) else dict(expected)
    have = dataclasses.asdict(cfg)
    bad = {k: (have[k], v) for k, v in want.items() if v is not None and have.get(k) != v}
    if bad:
        detail = ", ".join(f"{k}: file={a} requested={b}" for k, (a, b) in bad.items())
        raise ConfigMismatch(detail)
