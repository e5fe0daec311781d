"""Pairwise-masked secure aggregation over fixed-point vectors.

Single-round, dropout-free variant: a trusted setup step deals one shared
seed per unordered client pair, each client adds (or subtracts) a
counter-based pseudorandom stream per pair so that all masks cancel in the
modular sum, and the server recovers only the mean of the quantized
updates. Values travel as 16-bit fixed point carried in 32-bit lanes, so
summation and mask cancellation are exact arithmetic mod 2^32.

Protocol sketch for client i with update vector u_i:

    q_i    = quantize(u_i, clip)                      (u32, one lane each)
    share  = q_i + sum_{j>i} PRG(s_ij) - sum_{j<i} PRG(s_ij)   (mod 2^32)

The server sums all K shares mod 2^32; every PRG stream appears once with
each sign, leaving sum_i q_i exactly, which dequantizes to the mean with
per-element error at most 2^-16 * clip. No dropout recovery: a missing
share aborts the round.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError, ProtocolError

MOD_BITS = 32
# Fixed-point levels: [-clip, clip] maps onto 0..2^16, half a step is
# exactly 2^-16 * clip, which is the error bound the aggregate promises.
QUANT_LEVELS = 1 << 16


@dataclass
class MaskedShare:
    """One client's masked, quantized update as transmitted to the server."""

    client_id: int
    round_index: int
    values: np.ndarray  # uint32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint32)

    def to_bytes(self) -> bytes:
        """Wire layout: round u32, client_id u32, length u64, u32 payload (LE)."""
        header = struct.pack("<IIQ", self.round_index, self.client_id, self.values.size)
        return header + self.values.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MaskedShare":
        round_index, client_id, length = struct.unpack_from("<IIQ", blob, 0)
        values = np.frombuffer(blob, dtype="<u4", count=length, offset=16)
        return cls(client_id=client_id, round_index=round_index, values=values.copy())


class PairwiseSeeds:
    """One shared 64-bit seed per unordered client pair."""

    def __init__(self, seeds: dict[tuple[int, int], int]):
        self._seeds = {(min(i, j), max(i, j)): s for (i, j), s in seeds.items()}

    @classmethod
    def trusted_setup(cls, master_seed: int, client_ids) -> "PairwiseSeeds":
        from .seeding import derive_seed

        ids = sorted(client_ids)
        seeds = {}
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                seeds[(i, j)] = derive_seed(master_seed, "pair", i, j)
        return cls(seeds)

    def seed_for(self, i: int, j: int) -> int:
        key = (min(i, j), max(i, j))
        if key not in self._seeds:
            raise ProtocolError(f"no pairwise seed for clients {i} and {j}")
        return self._seeds[key]

    def peers_of(self, client_id: int) -> list[int]:
        peers = set()
        for i, j in self._seeds:
            if i == client_id:
                peers.add(j)
            elif j == client_id:
                peers.add(i)
        return sorted(peers)


def prg_stream(seed: int, round_index: int, length: int) -> np.ndarray:
    """Counter-based pseudorandom u32 stream, domain-separated by
    (seed, round); the stream position supplies the per-index separation."""
    key = (int(round_index) << 64) | (int(seed) & (2**64 - 1))
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.integers(0, 1 << MOD_BITS, size=length, dtype=np.uint64).astype(np.uint32)


def quantize(values: np.ndarray, clip: float) -> np.ndarray:
    """Clamp to [-clip, clip] and map onto the fixed-point grid 0..2^16."""
    if clip <= 0:
        raise InputError(f"clip must be positive, got {clip}")
    values = np.asarray(values, dtype=np.float64)
    if np.isnan(values).any():
        raise NumericError("quantize input contains NaN")
    clamped = np.clip(values, -clip, clip)
    return np.round((clamped + clip) / (2.0 * clip) * QUANT_LEVELS).astype(np.uint32)


def dequantize(quantized: np.ndarray, clip: float) -> np.ndarray:
    """Inverse grid map; roundtrip error is at most 2^-16 * clip per element."""
    if clip <= 0:
        raise InputError(f"clip must be positive, got {clip}")
    q = np.asarray(quantized, dtype=np.float64)
    return q * (2.0 * clip / QUANT_LEVELS) - clip


def mask_update(
    client_id: int,
    flat_update: np.ndarray,
    seeds: PairwiseSeeds,
    clip: float,
    round_index: int = 0,
) -> MaskedShare:
    """Quantize a flattened update and blind it with all pairwise masks.

    The mask for pair {i, j} is added by the lower id and subtracted by the
    higher, so the masks vanish from the modular sum of all shares.
    """
    share = quantize(flat_update, clip).astype(np.uint64)
    n = share.size
    for peer in seeds.peers_of(client_id):
        stream = prg_stream(seeds.seed_for(client_id, peer), round_index, n).astype(np.uint64)
        if peer > client_id:
            share = share + stream
        else:
            share = share - stream
    return MaskedShare(
        client_id=client_id,
        round_index=round_index,
        values=(share & ((1 << MOD_BITS) - 1)).astype(np.uint32),
    )


def masked_modular_sum(shares: list[MaskedShare]) -> np.ndarray:
    """Sum of share vectors mod 2^32; with all shares present the masks
    cancel and this equals the sum of the quantized updates."""
    total = np.zeros(shares[0].values.size, dtype=np.uint64)
    for share in shares:
        total = (total + share.values.astype(np.uint64)) & ((1 << MOD_BITS) - 1)
    return total


def secure_aggregate(
    shares: list[MaskedShare],
    clip: float,
    expected_clients=None,
) -> np.ndarray:
    """Unmask by summation and return the dequantized mean update.

    Aborts (no partial result) when any expected share is missing, on
    duplicate senders, on mixed rounds, or on mismatched lengths.
    """
    if not shares:
        raise ProtocolError("secure_aggregate received no shares")
    ids = [s.client_id for s in shares]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in shares: {sorted(ids)}")
    if expected_clients is not None:
        missing = set(expected_clients) - set(ids)
        extra = set(ids) - set(expected_clients)
        if missing or extra:
            raise ProtocolError(
                f"share set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
    rounds = {s.round_index for s in shares}
    if len(rounds) != 1:
        raise ProtocolError(f"shares from mixed rounds: {sorted(rounds)}")
    lengths = {s.values.size for s in shares}
    if len(lengths) != 1:
        raise ProtocolError(f"shares of mixed lengths: {sorted(lengths)}")

    k = len(shares)
    total = masked_modular_sum(shares).astype(np.float64)
    # dequantize the exact fixed-point sum, then divide by K
    return (total * (2.0 * clip / QUANT_LEVELS) - k * clip) / k
