"""Additive masking over a power-of-two ring.

Masked vectors are stored as ``uint64``. Because the modulus ``m = 2**bits``
divides ``2**64``, wrapping uint64 arithmetic followed by ``& (m - 1)`` is
exact reduction mod ``m``, so negative integers and long sums need no special
handling.

Pairwise masks come from a counter-based generator: the pad shared by clients
``i < j`` at coordinate ``c`` is ``mix(key(i, j) + c * M)``, where ``mix`` is
the SplitMix64 finaliser and ``key`` hashes the round seed with both ids.
Client ``k`` adds the pads it shares with higher ids and subtracts those
shared with lower ids, so all masks cancel in the sum. This stands in for a key agreement between the clients.
"""

import functools
import math
from dataclasses import dataclass

import numpy as np

MAX_BITS = 62

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)


def _mix(x):
    """SplitMix64 finaliser, vectorised over a uint64 array."""
    # array (never scalar) arithmetic, so uint64 overflow wraps without warnings
    x = np.array(x, dtype=np.uint64, ndmin=1)
    tmp = np.empty_like(x)
    x += _GOLDEN
    np.right_shift(x, _S30, out=tmp)
    x ^= tmp
    x *= _M1
    np.right_shift(x, _S27, out=tmp)
    x ^= tmp
    x *= _M2
    np.right_shift(x, _S31, out=tmp)
    x ^= tmp
    return x


def _client_hashes(round_seed, ids):
    """Per-client halves of the pair keys: the pair (i, j) uses ``mix(left[i] ^ right[j])``."""
    ids = np.array(ids, dtype=np.uint64, ndmin=1)
    left = _mix(np.uint64(round_seed & 0xFFFFFFFFFFFFFFFF) ^ (ids * _GOLDEN))
    right = _mix(ids ^ _M1)
    return left, right


@dataclass
class MaskedIntVector:
    values: np.ndarray
    modulus_bits: int

    @property
    def modulus(self):
        return 1 << self.modulus_bits


def modulus_bits(n, sigma, K_size, max_mu_inf, t=12.0):
    """Bits per coordinate so that a noisy sum fits the ring with overwhelming probability.

    ``ceil(log2((t * sqrt(n) * sigma + max_mu_inf) * K_size))``, at least 1.
    """
    if n < 1 or K_size < 1 or sigma < 0 or max_mu_inf < 0 or t <= 0:
        raise ValueError("modulus_bits arguments must be positive")
    span = (t * math.sqrt(n) * sigma + max_mu_inf) * K_size
    if span <= 1:
        return 1
    return max(1, math.ceil(math.log2(span)))


def ring_bits(n, sigma, K_size, max_mu_inf, t=12.0):
    """Ring width actually used for masking.

    One bit more than :func:`modulus_bits` so the signed sum, which may reach
    the bound in either direction, decodes without wrap; never below 2.
    """
    bits = max(2, modulus_bits(n, sigma, K_size, max_mu_inf, t) + 1)
    if bits > MAX_BITS:
        raise ValueError(f"ring of {bits} bits exceeds the {MAX_BITS}-bit limit")
    return bits


_LOW = {b: np.uint64((1 << b) - 1) for b in range(1, MAX_BITS + 1)}


def _check_bits(bits):
    try:
        return _LOW[bits]
    except (KeyError, TypeError):
        raise ValueError(f"modulus bits must be in [1, {MAX_BITS}], got {bits}") from None


def pairwise_pad(round_seed, i, j, n):
    """Pad shared by clients ``i < j`` (full 64-bit words)."""
    left, right = _client_hashes(round_seed, [i, j])
    key = _mix(left[:1] ^ right[1:])
    return _mix(key + np.arange(n, dtype=np.uint64) * _M2)


@functools.lru_cache(maxsize=256)
def _pair_layout(K):
    """Index arrays for the ``K (K - 1) / 2`` pairs ``a < b`` in row-major order.

    Also returns the permutation that reorders those pairs by ``b``, and the
    first position of each owner in both orders (for ``np.add.reduceat``).
    """
    a, b = np.triu_indices(K, k=1)
    hi, lo = np.tril_indices(K, k=-1)
    by_hi = lo * K - lo * (lo + 1) // 2 + (hi - lo - 1)
    starts_lo = np.flatnonzero(np.r_[True, a[1:] != a[:-1]])
    starts_hi = np.flatnonzero(np.r_[True, hi[1:] != hi[:-1]])
    out = (a, b, by_hi, starts_lo, starts_hi)
    for arr in out:
        arr.flags.writeable = False
    return out


def gen_masks(client_ids, n, bits, round_seed):
    """Masks ``{client_id: uint64 vector}`` whose coordinatewise sum is 0 mod ``2**bits``.

    A single client gets the all-zero mask.
    """
    low = _check_bits(bits)
    client_ids = [int(c) for c in client_ids]
    ids = np.array(sorted(client_ids), dtype=np.uint64)
    K = len(ids)
    if K != len(set(client_ids)):
        raise ValueError("client ids must be distinct")
    if K < 2:
        return {int(c): np.zeros(n, dtype=np.uint64) for c in ids}
    a, b, by_hi, starts_lo, starts_hi = _pair_layout(K)
    left, right = _client_hashes(round_seed, ids)
    keys = _mix(left[a] ^ right[b])
    # coordinate-major (n, pairs) so every vectorised loop runs over the long axis
    pads = _mix(np.arange(n, dtype=np.uint64)[:, None] * _M2 + keys[None, :])
    # client k adds pads with higher ids (owners 0..K-2 in row-major order) and
    # subtracts pads with lower ids (owners 1..K-1 once sorted by the higher id);
    # uint64 array arithmetic wraps, which is exactly arithmetic mod 2**64
    masks = np.zeros((n, K), dtype=np.uint64)
    masks[:, :-1] = np.add.reduceat(pads, starts_lo, axis=1)
    masks[:, 1:] -= np.add.reduceat(np.take(pads, by_hi, axis=1), starts_hi, axis=1)
    masks &= low
    return dict(zip(ids.tolist(), np.ascontiguousarray(masks.T)))


def reduce_mod(z, bits):
    """Signed integers to their residues in [0, 2**bits)."""
    low = _check_bits(bits)
    return np.asarray(z, dtype=np.int64).astype(np.uint64) & low


def enc(z, mask, bits):
    """``(z + mask) mod 2**bits`` for a signed integer vector ``z``.

    Elementwise, so a stacked ``(K, n)`` batch of client vectors and their
    masks can be encoded in one call.
    """
    low = _check_bits(bits)
    # two's-complement view: int64 -> uint64 keeps the residue mod 2**64
    v = np.asarray(z, dtype=np.int64).view(np.uint64) + np.asarray(mask, dtype=np.uint64)
    v &= low
    return MaskedIntVector(v, bits)


def aggregate(masked):
    """Sum a list of :class:`MaskedIntVector` in the ring.

    A 2-D entry counts as a batch of client vectors, one per row.
    """
    bits = masked[0].modulus_bits
    low = _check_bits(bits)
    n = masked[0].values.shape[-1]
    rows = []
    for mv in masked:
        if mv.modulus_bits != bits or mv.values.ndim > 2 or mv.values.shape[-1] != n:
            raise ValueError("masked vectors disagree on ring or length")
        rows.append(mv.values.reshape(-1, n))
    return np.concatenate(rows).sum(axis=0, dtype=np.uint64) & low


def decode_sum(v, bits):
    """Re-centre residues into [-m/2, m/2).

    Correct only if the true sum has magnitude below m/2; beyond that the
    result silently wraps.
    """
    _check_bits(bits)
    m = 1 << bits
    v = np.asarray(v, dtype=np.uint64).astype(np.int64)
    return np.where(v >= m // 2, v - m, v)
