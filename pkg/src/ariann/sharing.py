"""Additive secret sharing over Z_2^n with decimal fixed-point encoding.

A value x is split as x = x0 + x1 mod 2^n with x0 uniform. Decimal values are
stored as floor(v * 10^p) in two's complement; addition of shares, public
constants, and public-constant multiplication are local, as is the
approximate truncation that rescales after a fixed-point multiplication.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .ring import RingTensor, ring_mask
from .runtime import FRAME_MASKED, Session

DEFAULT_PRECISION = 3
SCALE_BASE = 10


class FixedPointOverflow(ValueError):
    """Encoded magnitude does not fit the signed ring range."""


class ReconstructionForbidden(RuntimeError):
    """reconstruct() called on protected state inside a guarded region."""


_guard_depth = 0
_guard_reason = ""
_allow_depth = 0


@contextlib.contextmanager
def forbid_reconstruction(reason: str):
    """Audit hook: any reconstruct() under this context raises unless it is
    wrapped in allow_reconstruction(). Used to assert that training and
    aggregation never open model state."""
    global _guard_depth, _guard_reason
    _guard_depth += 1
    _guard_reason = reason
    try:
        yield
    finally:
        _guard_depth -= 1


@contextlib.contextmanager
def allow_reconstruction():
    """Explicit escape hatch for harness-side reconstruction."""
    global _allow_depth
    _allow_depth += 1
    try:
        yield
    finally:
        _allow_depth -= 1


# ---------------------------------------------------------------------------
# Fixed-point encoding
# ---------------------------------------------------------------------------

def encode_fixed(values, precision: int = DEFAULT_PRECISION,
                 n_bits: int = 32, allow_wrap: bool = False) -> RingTensor:
    """floor(v * 10^p) in two's complement; |v| * 10^p must stay signed-range.

    allow_wrap skips the range check (values that do not fit simply wrap),
    which is only useful for degraded-encoding studies.
    """
    arr = np.asarray(values, dtype=np.float64)
    scaled = np.floor(arr * float(SCALE_BASE ** precision))
    limit = float(2 ** (n_bits - 1))
    if not allow_wrap and np.any(np.abs(scaled) >= limit):
        raise FixedPointOverflow(
            f"|v|*10^{precision} exceeds the signed range of Z_2^{n_bits}")
    return RingTensor.from_ints(scaled.astype(np.int64), n_bits)


def decode_fixed(t: RingTensor, precision: int = DEFAULT_PRECISION) -> np.ndarray:
    return t.signed().astype(np.float64) / float(SCALE_BASE ** precision)


# ---------------------------------------------------------------------------
# Shares
# ---------------------------------------------------------------------------

@dataclass
class AdditiveShare:
    """One party's additive share of a ring tensor plus precision metadata."""

    party: int
    values: RingTensor
    precision: int = 0

    @property
    def n_bits(self) -> int:
        return self.values.n_bits

    @property
    def shape(self):
        return self.values.shape

    def _check(self, other: "AdditiveShare"):
        if other.party != self.party:
            raise ValueError("shares belong to different parties")
        if other.precision != self.precision:
            raise ValueError(f"precision mismatch: {self.precision} vs {other.precision}")

    def __add__(self, other: "AdditiveShare") -> "AdditiveShare":
        self._check(other)
        return AdditiveShare(self.party, self.values + other.values, self.precision)

    def __sub__(self, other: "AdditiveShare") -> "AdditiveShare":
        self._check(other)
        return AdditiveShare(self.party, self.values - other.values, self.precision)

    def __neg__(self) -> "AdditiveShare":
        return AdditiveShare(self.party, -self.values, self.precision)

    def add_public(self, const: RingTensor) -> "AdditiveShare":
        """Add a public constant: party 0 adds, party 1 passes through."""
        if self.party == 0:
            return AdditiveShare(0, self.values + const, self.precision)
        return AdditiveShare(1, self.values.copy(), self.precision)

    def mul_public_int(self, c: int) -> "AdditiveShare":
        """Multiply by a public integer (both parties scale locally)."""
        return AdditiveShare(self.party, self.values * int(c), self.precision)

    def mul_public_fixed(self, v: float, precision: int = None) -> "AdditiveShare":
        """Multiply by a public real encoded at ``precision`` digits.

        The result's precision grows by ``precision``; truncate() afterwards
        to return to the working scale.
        """
        p = self.precision if precision is None else precision
        c = int(np.floor(float(v) * SCALE_BASE ** p))
        out = AdditiveShare(self.party, self.values * c, self.precision + p)
        return out

    def reshape(self, *shape) -> "AdditiveShare":
        return AdditiveShare(self.party, self.values.reshape(*shape), self.precision)

    def __getitem__(self, idx) -> "AdditiveShare":
        return AdditiveShare(self.party, self.values[idx], self.precision)

    def sum(self, axis=None) -> "AdditiveShare":
        return AdditiveShare(self.party, self.values.sum(axis), self.precision)

    def cumsum(self, axis=-1) -> "AdditiveShare":
        return AdditiveShare(self.party, self.values.cumsum(axis), self.precision)

    def transpose(self) -> "AdditiveShare":
        return AdditiveShare(self.party,
                             RingTensor(self.values.data.T.copy(), self.n_bits,
                                        _trusted=True),
                             self.precision)


def share(secret: RingTensor, rng: np.random.Generator,
          precision: int = 0) -> tuple[AdditiveShare, AdditiveShare]:
    """Split a ring tensor into a uniform share pair."""
    s0 = RingTensor.random(secret.shape, secret.n_bits, rng)
    s1 = secret - s0
    return (AdditiveShare(0, s0, precision), AdditiveShare(1, s1, precision))


def reconstruct(s0: AdditiveShare, s1: AdditiveShare) -> RingTensor:
    """Sum the two shares mod 2^n. Subject to the reconstruction guard."""
    if _guard_depth > 0 and _allow_depth == 0:
        raise ReconstructionForbidden(_guard_reason or "reconstruction is guarded")
    if {s0.party, s1.party} != {0, 1}:
        raise ValueError("need one share from each party")
    if s0.n_bits != s1.n_bits or s0.precision != s1.precision:
        raise ValueError("share metadata mismatch")
    if s0.shape != s1.shape:
        raise ValueError("share shape mismatch")
    return s0.values + s1.values


def decode_pair(s0: AdditiveShare, s1: AdditiveShare) -> np.ndarray:
    return decode_fixed(reconstruct(s0, s1), s0.precision)


# ---------------------------------------------------------------------------
# Wire packing
# ---------------------------------------------------------------------------

def _wire_dtype(n_bits: int) -> np.dtype:
    if n_bits <= 8:
        return np.dtype("<u1")
    if n_bits <= 16:
        return np.dtype("<u2")
    if n_bits <= 32:
        return np.dtype("<u4")
    return np.dtype("<u8")


def pack_ring(values: np.ndarray, n_bits: int) -> bytes:
    """Little-endian packing at the smallest power-of-two width covering n."""
    return np.ascontiguousarray(values).astype(_wire_dtype(n_bits)).tobytes()


def unpack_ring(data: bytes, n_bits: int) -> np.ndarray:
    return np.frombuffer(data, dtype=_wire_dtype(n_bits)).astype(np.uint64)


# ---------------------------------------------------------------------------
# Protocol steps
# ---------------------------------------------------------------------------

def mask_and_reveal(session: Session, y: AdditiveShare, alpha_share,
                    op: str) -> RingTensor:
    """Publish y_j + alpha_j and reconstruct the public x = y + alpha.

    One round, one message of the input size each way. The mask must be
    fresh: single-use enforcement lives with the key material that carries it.
    """
    n = y.n_bits
    if isinstance(alpha_share, RingTensor):
        alpha_vals = alpha_share.data
    else:
        alpha_vals = np.asarray(alpha_share, dtype=np.uint64)
    masked = (y.values.data + alpha_vals) & ring_mask(n)
    peer = session.exchange(op, FRAME_MASKED, pack_ring(masked, n),
                            elements=masked.size)
    theirs = unpack_ring(peer, n).reshape(masked.shape)
    return RingTensor((masked + theirs) & ring_mask(n), n, _trusted=True)


def reveal(session: Session, x: AdditiveShare, op: str = "reveal") -> RingTensor:
    """Open a shared value to both parties (one round)."""
    if _guard_depth > 0 and _allow_depth == 0:
        raise ReconstructionForbidden(_guard_reason or "reconstruction is guarded")
    n = x.n_bits
    mine = x.values.data
    peer = session.exchange(op, FRAME_MASKED, pack_ring(mine, n),
                            elements=mine.size)
    theirs = unpack_ring(peer, n).reshape(mine.shape)
    return RingTensor((mine + theirs) & ring_mask(n), n, _trusted=True)


def truncate(x: AdditiveShare, digits: int) -> AdditiveShare:
    """Rescale by 10^-digits locally on each share (no interaction).

    Party 0 floor-divides its share; party 1 negates, floor-divides, negates.
    The reconstruction differs from exact rescaling by at most one unit,
    except for the rare mask wrap whose probability decays with 2^n.
    """
    if digits < 0 or digits > x.precision:
        raise ValueError(f"cannot truncate {digits} digits at precision {x.precision}")
    if digits == 0:
        return AdditiveShare(x.party, x.values.copy(), x.precision)
    n = x.n_bits
    div = np.uint64(SCALE_BASE ** digits)
    if x.party == 0:
        out = x.values.data // div
    else:
        neg = (np.uint64(0) - x.values.data) & ring_mask(n)
        out = (np.uint64(0) - (neg // div)) & ring_mask(n)
    return AdditiveShare(x.party, RingTensor(out, n, _trusted=True),
                         x.precision - digits)
