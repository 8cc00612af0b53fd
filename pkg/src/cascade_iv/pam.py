"""Nested PAM constellation: bit packets to analog points and back.

Natural labeling maps a bit string to the signed binary expansion

    S^n = sqrt(3) * sum_{i=0}^{n-1} (-1)^(b_i) 2^(-(i+1)),

so distinct n-bit prefixes land at least D_n = sqrt(3) * 2^(-n+1) apart and
the infinite expansion is uniform on [-sqrt(3), sqrt(3)) with unit variance.
Decoding is a slicer implemented by successive sign tests (O(n) instead of a
search over 2^n points): bit i is 0 iff the running residual is positive,
with exact midpoints resolved to bit 1, i.e. toward the smaller value.

The dithered decoder adds alpha * U to an estimate of the finite
constellation point before slicing, where U is uniform on
[-D_psi/2, D_psi/2) and alpha is the linear coefficient multiplying the
constellation point in the estimate; this emulates estimating the infinite
expansion and makes the psi-uniform prefix bound applicable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SQRT3 = math.sqrt(3.0)

__all__ = [
    "SQRT3",
    "min_distance",
    "encode",
    "encode_point",
    "PamPoint",
    "decode_bits",
    "sample_dither",
    "dithered_decode",
    "CellErrorCounts",
    "ErrorStats",
    "tally_errors",
]


def min_distance(n: int) -> float:
    """Spacing D_n between adjacent n-bit constellation points."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return SQRT3 * 2.0 ** (-n + 1)


def encode(bits, n: int | None = None) -> float:
    """Map ``bits[0:n]`` to the constellation point S^n."""
    bits = np.asarray(bits, dtype=np.int64)
    if bits.ndim != 1 or (bits.size and not np.isin(bits, (0, 1)).all()):
        raise ValueError("bits must be a 1-D sequence of 0/1")
    if n is None:
        n = bits.size
    if n > bits.size:
        raise ValueError(f"requested depth {n} exceeds {bits.size} available bits")
    i = np.arange(n)
    return float(SQRT3 * np.sum((1 - 2 * bits[:n]) * np.exp2(-(i + 1.0))))


@dataclass(frozen=True)
class PamPoint:
    """A constellation point with its depth and minimum distance."""

    value: float
    depth: int
    min_distance: float


def encode_point(bits, n: int | None = None) -> PamPoint:
    bits = np.asarray(bits, dtype=np.int64)
    depth = bits.size if n is None else n
    return PamPoint(value=encode(bits, depth), depth=depth, min_distance=min_distance(depth))


def decode_bits(estimate, n: int) -> np.ndarray:
    """Slice an estimate (scalar or array) to its nearest n-bit string.

    Successive sign extraction: bit i is 0 iff the residual is > 0, the
    residual then drops by the signed contribution sqrt(3) (-1)^b 2^-(i+1).
    Ties (residual exactly 0) give bit 1, choosing the smaller point.
    Output shape is input shape + (n,).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    est = np.asarray(estimate, dtype=float)
    if not np.isfinite(est).all():
        raise ValueError("estimate must be finite")
    residual = est.copy()
    out = np.empty(est.shape + (n,), dtype=np.int8)
    for i in range(n):
        b = (residual <= 0.0).astype(np.int8)
        out[..., i] = b
        residual -= SQRT3 * (1.0 - 2.0 * b) * 2.0 ** (-(i + 1))
    return out


def sample_dither(packet_bits: int, rng: np.random.Generator, size=None) -> np.ndarray | float:
    """Uniform dither on [-D_psi/2, D_psi/2), the residual tail of a psi-bit point."""
    half = 0.5 * min_distance(packet_bits)
    return rng.uniform(-half, half, size=size)


def dithered_decode(
    estimate,
    alpha,
    packet_bits: int,
    n: int,
    rng: np.random.Generator | None = None,
    dither=None,
) -> np.ndarray:
    """Slice ``estimate + alpha * U`` at depth n, with U the psi-bit dither.

    ``alpha`` is the coefficient multiplying the constellation point inside
    the linear estimate and must lie in (0, 1).  ``dither`` may be supplied
    explicitly (tests force it to 0); otherwise it is drawn from ``rng``.
    """
    alpha_arr = np.asarray(alpha, dtype=float)
    if not ((alpha_arr > 0.0) & (alpha_arr < 1.0)).all():
        raise ValueError("alpha must lie strictly inside (0, 1)")
    est = np.asarray(estimate, dtype=float)
    if dither is None:
        if rng is None:
            raise ValueError("need rng when no explicit dither is given")
        dither = sample_dither(packet_bits, rng, size=est.shape)
    return decode_bits(est + alpha_arr * np.asarray(dither, dtype=float), n)


@dataclass
class CellErrorCounts:
    """Error counters for one (relay, delay) cell.

    ``per_bit`` maps (packet index tau, bit position within packet) to
    [errors, observations]; the worst-bit error rate is the max ratio.
    """

    n_trials: int = 0
    bit_errors: int = 0
    prefix_errors: int = 0
    packet_errors: int = 0
    per_bit: dict = field(default_factory=dict)

    def worst_bit_rate(self) -> float:
        if not self.per_bit:
            return 0.0
        return max(err / obs for err, obs in self.per_bit.values() if obs)

    def merge(self, other: "CellErrorCounts") -> None:
        self.n_trials += other.n_trials
        self.bit_errors += other.bit_errors
        self.prefix_errors += other.prefix_errors
        self.packet_errors += other.packet_errors
        for key, (err, obs) in other.per_bit.items():
            cur = self.per_bit.setdefault(key, [0, 0])
            cur[0] += err
            cur[1] += obs


@dataclass
class ErrorStats:
    """Bit/prefix/packet error counters keyed by (relay, decoding delay)."""

    cells: dict = field(default_factory=dict)

    def cell(self, r: int, delta: int) -> CellErrorCounts:
        return self.cells.setdefault((r, delta), CellErrorCounts())

    def merge(self, other: "ErrorStats") -> None:
        for key, counts in sorted(other.cells.items()):
            self.cell(*key).merge(counts)

    def rows(self):
        """CSV rows ``r,delta,n_trials,bit_err,prefix_err,packet_err,worst_bit_pe``."""
        for (r, delta), c in sorted(self.cells.items()):
            yield r, delta, c.n_trials, c.bit_errors, c.prefix_errors, c.packet_errors, c.worst_bit_rate()


def tally_errors(
    stats: ErrorStats,
    decoded: np.ndarray,
    truth: np.ndarray,
    r: int,
    t: int,
    packet_bits: int,
    period: int,
) -> None:
    """Account one batch of decodes at node r, time t into ``stats``.

    ``decoded`` and ``truth`` are (trials, n_bits) prefix arrays; bit n was
    generated at time floor(n/psi) * period, so the bits of packet tau are
    tallied at delay t - tau*period.  Per packet the single-bit, whole-packet
    and whole-prefix error events are counted.
    """
    decoded = np.asarray(decoded)
    truth = np.asarray(truth)
    if decoded.shape != truth.shape:
        raise ValueError(f"decoded {decoded.shape} and truth {truth.shape} misaligned")
    n_trials, n_bits = decoded.shape
    if n_bits % packet_bits:
        raise ValueError("prefix length must be a whole number of packets")
    mism = decoded != truth
    prefix_any = np.zeros(n_trials, dtype=bool)
    for tau in range(n_bits // packet_bits):
        gen_time = tau * period
        if gen_time > t:
            break
        delta = t - gen_time
        sl = mism[:, tau * packet_bits : (tau + 1) * packet_bits]
        prefix_any |= sl.any(axis=1)
        cell = stats.cell(r, delta)
        cell.n_trials += n_trials
        per_bit_err = sl.sum(axis=0)
        cell.bit_errors += int(per_bit_err.sum())
        cell.packet_errors += int(sl.any(axis=1).sum())
        cell.prefix_errors += int(prefix_any.sum())
        for j in range(packet_bits):
            cur = cell.per_bit.setdefault((tau, j), [0, 0])
            cur[0] += int(per_bit_err[j])
            cur[1] += n_trials
