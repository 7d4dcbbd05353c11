"""Fixed-width modular integer tensors over Z_2^n.

Elements are stored as 64-bit unsigned words regardless of the ring width
``n_bits`` and are masked back into range after every operation, so the same
kernels serve every ring from Z_2^4 up to Z_2^64. Bit indexing is MSB first:
bit 1 of an n-bit value is its most significant bit.
"""

from __future__ import annotations

import numpy as np

MIN_BITS = 4
MAX_BITS = 64

_FULL = np.uint64(0xFFFFFFFFFFFFFFFF)


def ring_mask(n_bits: int) -> np.uint64:
    """All-ones mask for an n-bit ring."""
    if not MIN_BITS <= n_bits <= MAX_BITS:
        raise ValueError(f"n_bits must be in [{MIN_BITS}, {MAX_BITS}], got {n_bits}")
    if n_bits == 64:
        return _FULL
    return np.uint64((1 << n_bits) - 1)


class RingTensor:
    """A shaped array of n-bit ring elements.

    ``data`` is always uint64 with every element < 2^n_bits.
    """

    __slots__ = ("data", "n_bits")

    def __init__(self, data: np.ndarray, n_bits: int, *, _trusted: bool = False):
        if not MIN_BITS <= n_bits <= MAX_BITS:
            raise ValueError(f"n_bits must be in [{MIN_BITS}, {MAX_BITS}], got {n_bits}")
        if _trusted:
            self.data = data
        else:
            arr = np.asarray(data)
            if arr.dtype != np.uint64:
                arr = arr.astype(np.int64).astype(np.uint64)
            self.data = arr & ring_mask(n_bits)
        self.n_bits = n_bits

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_ints(cls, values, n_bits: int) -> "RingTensor":
        """Build from (possibly negative) integers, reduced mod 2^n."""
        arr = np.asarray(values, dtype=np.int64).astype(np.uint64)
        return cls(arr & ring_mask(n_bits), n_bits, _trusted=True)

    @classmethod
    def zeros(cls, shape, n_bits: int) -> "RingTensor":
        return cls(np.zeros(shape, dtype=np.uint64), n_bits, _trusted=True)

    @classmethod
    def random(cls, shape, n_bits: int, rng: np.random.Generator) -> "RingTensor":
        """Uniform ring elements."""
        raw = rng.integers(0, 1 << 63, size=shape, dtype=np.uint64)
        raw = (raw << np.uint64(1)) | (rng.integers(0, 2, size=shape, dtype=np.uint64))
        return cls(raw & ring_mask(n_bits), n_bits, _trusted=True)

    # -- basic properties --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "RingTensor":
        return RingTensor(self.data.copy(), self.n_bits, _trusted=True)

    def reshape(self, *shape) -> "RingTensor":
        return RingTensor(self.data.reshape(*shape), self.n_bits, _trusted=True)

    def __getitem__(self, idx) -> "RingTensor":
        return RingTensor(np.asarray(self.data[idx]), self.n_bits, _trusted=True)

    def __repr__(self):
        return f"RingTensor(n={self.n_bits}, {self.data!r})"

    def __eq__(self, other):
        if not isinstance(other, RingTensor):
            return NotImplemented
        return self.n_bits == other.n_bits and np.array_equal(self.data, other.data)

    __hash__ = None

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other) -> np.ndarray:
        if isinstance(other, RingTensor):
            if other.n_bits != self.n_bits:
                raise ValueError(f"ring width mismatch: {self.n_bits} vs {other.n_bits}")
            return other.data
        if isinstance(other, (int, np.integer)):
            return np.uint64(int(other) & int(ring_mask(self.n_bits)))
        raise TypeError(f"cannot combine RingTensor with {type(other)!r}")

    def _elementwise(self, other, fn) -> "RingTensor":
        rhs = self._coerce(other)
        try:
            out = fn(self.data, rhs)
        except ValueError:
            raise ValueError(f"shape mismatch: {self.shape} vs "
                             f"{np.shape(rhs)}") from None
        return RingTensor(out & ring_mask(self.n_bits), self.n_bits, _trusted=True)

    def __add__(self, other) -> "RingTensor":
        return self._elementwise(other, np.add)

    def __sub__(self, other) -> "RingTensor":
        return self._elementwise(other, np.subtract)

    def __mul__(self, other) -> "RingTensor":
        return self._elementwise(other, np.multiply)

    def __neg__(self) -> "RingTensor":
        return RingTensor((np.uint64(0) - self.data) & ring_mask(self.n_bits),
                          self.n_bits, _trusted=True)

    def matmul(self, other: "RingTensor") -> "RingTensor":
        """Matrix product in the ring; wraparound mod 2^64 equals mod 2^n after masking."""
        rhs = self._coerce(other)
        out = np.matmul(self.data, rhs) & ring_mask(self.n_bits)
        return RingTensor(out, self.n_bits, _trusted=True)

    def sum(self, axis=None) -> "RingTensor":
        out = np.sum(self.data, axis=axis, dtype=np.uint64) & ring_mask(self.n_bits)
        return RingTensor(np.asarray(out), self.n_bits, _trusted=True)

    def cumsum(self, axis=-1) -> "RingTensor":
        out = np.cumsum(self.data, axis=axis, dtype=np.uint64) & ring_mask(self.n_bits)
        return RingTensor(out, self.n_bits, _trusted=True)

    # -- bit access and signed view ---------------------------------------

    def bit(self, i: int) -> np.ndarray:
        """i-th bit, MSB first (i=1 is the most significant bit). Returns uint8."""
        if not 1 <= i <= self.n_bits:
            raise ValueError(f"bit index {i} outside [1, {self.n_bits}]")
        return ((self.data >> np.uint64(self.n_bits - i)) & np.uint64(1)).astype(np.uint8)

    def bits(self) -> np.ndarray:
        """Full decomposition, shape (n_bits, *shape), row 0 = MSB."""
        out = np.empty((self.n_bits,) + self.shape, dtype=np.uint8)
        for i in range(self.n_bits):
            out[i] = self.bit(i + 1)
        return out

    def signed(self) -> np.ndarray:
        """Two's-complement interpretation in [-2^(n-1), 2^(n-1)-1] as int64."""
        half = np.uint64(1) << np.uint64(self.n_bits - 1)
        wrap = (self.data >= half).astype(np.int64) << np.int64(self.n_bits)
        return self.data.astype(np.int64) - wrap


def bit_decompose(a: RingTensor) -> np.ndarray:
    """MSB-first bit planes of ``a``; recompose() inverts it."""
    return a.bits()


def recompose(bits: np.ndarray, n_bits: int) -> RingTensor:
    """Inverse of bit_decompose: sum of bits[i] * 2^(n-1-i)."""
    if bits.shape[0] != n_bits:
        raise ValueError("bit plane count does not match n_bits")
    acc = np.zeros(bits.shape[1:], dtype=np.uint64)
    for i in range(n_bits):
        acc = (acc << np.uint64(1)) | bits[i].astype(np.uint64)
    return RingTensor(acc & ring_mask(n_bits), n_bits, _trusted=True)


def signed_value(a: RingTensor) -> np.ndarray:
    return a.signed()
