"""Length-extending PRG from fixed-key AES in Matyas-Meyer-Oseas mode.

G(x) = AES_k1(x) XOR x || AES_k2(x) XOR x || AES_k3(x) XOR x

The cipher keys are public constants; MMO security rests on the permutation,
not on key secrecy. Seeds are 127-bit values stored in one 16-byte block whose
top bit (bit 7 of byte 15, little-endian block view) is always clear. All
entry points are batched: a batch of N seeds is one (N, 16) uint8 array and
one AES call per output block. Field offsets are documented in LAYOUT.md.
"""

from __future__ import annotations

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .ring import ring_mask

SEED_BITS = 127  # lambda
BLOCK_BYTES = 16
MAX_BLOCKS = 3

# Fixed, hard-coded MMO cipher keys (byte patterns 0x00.., 0x10.., 0x20..).
CIPHER_KEYS = (
    bytes(range(0x00, 0x10)),
    bytes(range(0x10, 0x20)),
    bytes(range(0x20, 0x30)),
)

_CIPHERS = tuple(Cipher(algorithms.AES(k), modes.ECB()) for k in CIPHER_KEYS)

_TOP_BIT = np.uint8(0x80)
_SEED_MASK = np.uint8(0x7F)


def random_seeds(rng: np.random.Generator, count: int) -> np.ndarray:
    """(count, 16) uint8 seed blocks with the top bit cleared."""
    seeds = rng.integers(0, 256, size=(count, BLOCK_BYTES), dtype=np.uint8)
    seeds[:, 15] &= _SEED_MASK
    return seeds


def expand(seeds: np.ndarray, out_blocks: int) -> np.ndarray:
    """Expand (N, 16) seed blocks to (N, 16*out_blocks) pseudorandom bytes.

    Deterministic; output block i is AES_ki(seed) XOR seed.
    """
    if not 2 <= out_blocks <= MAX_BLOCKS:
        raise ValueError(f"out_blocks must be 2 or 3, got {out_blocks}")
    seeds = np.ascontiguousarray(seeds, dtype=np.uint8)
    if seeds.ndim != 2 or seeds.shape[1] != BLOCK_BYTES:
        raise ValueError("seeds must have shape (N, 16)")
    n = seeds.shape[0]
    out = np.empty((n, out_blocks * BLOCK_BYTES), dtype=np.uint8)
    raw = seeds.tobytes()
    for i in range(out_blocks):
        enc = _CIPHERS[i].encryptor().update(raw)
        block = np.frombuffer(enc, dtype=np.uint8).reshape(n, BLOCK_BYTES)
        out[:, i * BLOCK_BYTES:(i + 1) * BLOCK_BYTES] = block ^ seeds
    return out


def expand_one(seed: bytes, out_blocks: int) -> bytes:
    """Single-seed convenience wrapper."""
    if len(seed) != BLOCK_BYTES:
        raise ValueError("seed must be 16 bytes")
    arr = np.frombuffer(seed, dtype=np.uint8).reshape(1, BLOCK_BYTES)
    return expand(arr, out_blocks).tobytes()


def slice_eq(raw: np.ndarray):
    """Split (N, 32) expansion bytes into (sL, tL, sR, tR).

    Each 16-byte half packs t in the block's top bit and the 127-bit seed in
    the rest, so XOR of packed blocks is XOR of (s, t) pairs.
    """
    raw = np.asarray(raw, dtype=np.uint8)
    if raw.ndim != 2 or raw.shape[1] != 2 * BLOCK_BYTES:
        raise ValueError("equality slice needs (N, 32) bytes")
    s_l = raw[:, :16].copy()
    s_r = raw[:, 16:32].copy()
    t_l = (s_l[:, 15] >> np.uint8(7)) & np.uint8(1)
    t_r = (s_r[:, 15] >> np.uint8(7)) & np.uint8(1)
    s_l[:, 15] &= _SEED_MASK
    s_r[:, 15] &= _SEED_MASK
    return s_l, t_l, s_r, t_r


def reassemble_eq(s_l, t_l, s_r, t_r) -> np.ndarray:
    """Inverse of slice_eq."""
    out = np.empty((s_l.shape[0], 2 * BLOCK_BYTES), dtype=np.uint8)
    out[:, :16] = s_l
    out[:, 16:] = s_r
    out[:, 15] |= (t_l.astype(np.uint8) << np.uint8(7))
    out[:, 31] |= (t_r.astype(np.uint8) << np.uint8(7))
    return out


def slice_cmp(raw: np.ndarray, n: int):
    """Split (N, 48) expansion bytes into the comparison state tuple.

    Returns (sL, tL, sR, tR, sigmaL, tauL, sigmaR, tauR) where sigma* are
    uint64 values already reduced mod 2^n and tau* single bits. The third
    block carries sigma/tau in two little-endian u64 lanes (tau = lane bit 63),
    which only needs n bits of each lane: n <= 63.
    """
    raw = np.asarray(raw, dtype=np.uint8)
    if raw.ndim != 2 or raw.shape[1] < 3 * BLOCK_BYTES:
        raise ValueError("comparison slice needs (N, 48) bytes")
    if n > 63:
        raise ValueError("comparison slice supports n <= 63")
    s_l, t_l, s_r, t_r = slice_eq(raw[:, :32])
    lanes = np.ascontiguousarray(raw[:, 32:48]).view("<u8")
    mask = ring_mask(n)
    sigma_l = lanes[:, 0] & mask
    sigma_r = lanes[:, 1] & mask
    tau_l = (lanes[:, 0] >> np.uint64(63)).astype(np.uint8)
    tau_r = (lanes[:, 1] >> np.uint64(63)).astype(np.uint8)
    return s_l, t_l, s_r, t_r, sigma_l, tau_l, sigma_r, tau_r


def seed_to_ring(seeds: np.ndarray, n: int) -> np.ndarray:
    """Ring embedding of a seed block: little-endian u64 of bytes 0..7 mod 2^n."""
    seeds = np.ascontiguousarray(seeds, dtype=np.uint8)
    return seeds[:, :8].copy().view("<u8").reshape(seeds.shape[0]) & ring_mask(n)


def mask_stream(seed: bytes, round_idx: int, count: int, n_bits: int) -> np.ndarray:
    """Deterministic ring-element stream for aggregation masks.

    Domain separation: block i feeds expand() with the seed XORed with the
    round counter (bytes 0..7, LE) and the block counter (bytes 8..15, LE,
    top bit re-cleared). Each expansion yields 4 u64 lanes = 4 ring elements.
    """
    if len(seed) != BLOCK_BYTES:
        raise ValueError("seed must be 16 bytes")
    n_blocks = (count + 3) // 4
    base = np.frombuffer(seed, dtype=np.uint8)
    blocks = np.broadcast_to(base, (n_blocks, BLOCK_BYTES)).copy()
    ctr = np.empty((n_blocks, 2), dtype="<u8")
    ctr[:, 0] = round_idx
    ctr[:, 1] = np.arange(n_blocks, dtype=np.uint64)
    blocks ^= ctr.view(np.uint8).reshape(n_blocks, BLOCK_BYTES)
    blocks[:, 15] &= _SEED_MASK
    raw = expand(blocks, 2)
    lanes = np.ascontiguousarray(raw).view("<u8").reshape(-1)
    return (lanes[:count] & ring_mask(n_bits)).copy()
