"""Fixed-size Bloom filters for aggregating group identifiers.

Probe positions use double hashing over two FNV-1a 64-bit digests of the
group id bytes, so they are identical in every process and on every
platform. The bit array is held as a Python int: bit ``j`` of the int is
bit ``j % 8`` of byte ``j // 8`` in the serialized form (LSB first).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
# xor'ed into the offset basis to get the second, independent digest
H2_BASIS_XOR = 0x9E3779B97F4A7C15
MASK64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_M = 1024
DEFAULT_K = 7


class BloomParamError(ValueError):
    pass


def fnv1a_64(data: bytes, basis: int = FNV_OFFSET) -> int:
    h = basis
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def probes(group: bytes, m: int, k: int) -> list[int]:
    h1 = fnv1a_64(group)
    h2 = fnv1a_64(group, FNV_OFFSET ^ H2_BASIS_XOR) | 1
    return [(h1 + i * h2) % m for i in range(k)]


@lru_cache(maxsize=65536)
def probe_mask(group: bytes, m: int, k: int) -> int:
    mask = 0
    for j in probes(group, m, k):
        mask |= 1 << j
    return mask


def check_params(m: int, k: int) -> None:
    if m < 8 or m % 8:
        raise BloomParamError(f"m must be a positive multiple of 8 and >= 8, got {m}")
    if not 1 <= k <= 16:
        raise BloomParamError(f"k must be in [1, 16], got {k}")


@dataclass(frozen=True, slots=True)
class BloomFilter:
    m: int = DEFAULT_M
    k: int = DEFAULT_K
    bits: int = 0

    @classmethod
    def empty(cls, m: int = DEFAULT_M, k: int = DEFAULT_K) -> "BloomFilter":
        check_params(m, k)
        return cls(m, k, 0)

    @classmethod
    def of(cls, groups: Iterable[bytes], m: int = DEFAULT_M, k: int = DEFAULT_K) -> "BloomFilter":
        f = cls.empty(m, k)
        for g in groups:
            f = f.insert(g)
        return f

    def insert(self, group: bytes) -> "BloomFilter":
        if not group:
            raise ValueError("group id must be non-empty")
        return BloomFilter(self.m, self.k, self.bits | probe_mask(group, self.m, self.k))

    def contains(self, group: bytes) -> bool:
        mask = probe_mask(group, self.m, self.k)
        return self.bits & mask == mask

    __contains__ = contains

    def union(self, *others: "BloomFilter") -> "BloomFilter":
        return bloom_union([self, *others])

    def popcount(self) -> int:
        return bin(self.bits).count("1")

    def fill_ratio(self) -> float:
        return self.popcount() / self.m

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes(self.m // 8, "little")

    @classmethod
    def from_bytes(cls, m: int, k: int, data: bytes) -> "BloomFilter":
        check_params(m, k)
        if len(data) != m // 8:
            raise BloomParamError(f"expected {m // 8} bytes, got {len(data)}")
        return cls(m, k, int.from_bytes(data, "little"))

    def __repr__(self) -> str:
        return f"BloomFilter(m={self.m}, k={self.k}, bits=0x{self.bits:x})"


def bloom_insert(f: BloomFilter, group: bytes) -> BloomFilter:
    return f.insert(group)


def bloom_contains(f: BloomFilter, group: bytes) -> bool:
    return f.contains(group)


def bloom_union(filters: Iterable[BloomFilter]) -> BloomFilter:
    filters = list(filters)
    if not filters:
        raise ValueError("union of an empty list")
    m, k = filters[0].m, filters[0].k
    bits = 0
    for f in filters:
        if f.m != m or f.k != k:
            raise BloomParamError(f"parameter mismatch: ({m}, {k}) vs ({f.m}, {f.k})")
        bits |= f.bits
    return BloomFilter(m, k, bits)
