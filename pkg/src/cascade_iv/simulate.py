"""Discrete-time simulation of the feedback relay cascade.

One trial runs the linear relaying scheme on the (r, t) lattice: node r
transmits X_r(t) = beta_r(t) [Shat_r(t) - Shat_{r+1}(t-1)], node r+1 receives
Y = X + Z and updates Shat_{r+1}(t) = Shat_{r+1}(t-1) + gamma_{r+1}(t) Y.
The gains come from the analytic MSE lattice (they are the exact LMMSE
coefficients), so trials are embarrassingly parallel.  Within a time step
nodes are processed in ascending r, which makes hops instantaneous; delayed
hops are the same dynamics with node r retarded by exactly r steps, handled
at evaluation time rather than by a second engine.

Reproducibility: trial i draws everything from its own counter-based stream
``Philox(key=(master_seed, i))`` in a fixed order (source draw, then the hop
noise lattice in r-major layout, then any decoder dither), so every sample is
addressable and independent of batching and thread count.  Monte Carlo
aggregation uses fixed-size batches merged in batch order with compensated
summation, making aggregates bit-identical for any parallelism degree.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from . import pam
from .mse import (
    BoundaryCondition,
    ExponentialRefinementBoundary,
    MseGrid,
    PacketStreamBoundary,
    SequenceBoundary,
    SingleSampleBoundary,
)
from .params import ChannelParams

__all__ = [
    "NOISE_KINDS",
    "EPS_DEGENERATE",
    "CorruptedGridError",
    "GainTable",
    "precompute_gains",
    "KnownSampleSource",
    "SinglePacketSource",
    "RefinementSource",
    "CustomRefinementSource",
    "PacketStreamSource",
    "make_source_process",
    "SourceBatch",
    "trial_generator",
    "draw_noise",
    "resolve_threads",
    "TrialResult",
    "run_trial",
    "coefficient_trial",
    "MonteCarloAggregate",
    "run_monte_carlo",
    "DecodeSpec",
    "run_decoding_monte_carlo",
]

NOISE_KINDS = ("gaussian", "uniform", "rademacher", "zero")

# Below this lattice-MSE decrease the power normalization is undefined; the
# hop transmits nothing and the receiver keeps its estimate.
EPS_DEGENERATE = 1e-300

_NEG_DIFF_TOL = -1e-12


class CorruptedGridError(ValueError):
    """The lattice violates its monotonicity beyond floating-point tolerance."""


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def trial_generator(master_seed: int, trial_index: int) -> Generator:
    """Counter-based stream for one trial, keyed by (master_seed, trial)."""
    key = np.array([master_seed, trial_index], dtype=np.uint64)
    return Generator(Philox(key=key))


def draw_noise(gen: Generator, kind: str, shape) -> np.ndarray:
    """Zero-mean unit-variance hop noise in a fixed r-major layout."""
    if kind == "gaussian":
        return gen.standard_normal(shape)
    if kind == "uniform":
        s = math.sqrt(3.0)
        return gen.uniform(-s, s, size=shape)
    if kind == "rademacher":
        return 2.0 * gen.integers(0, 2, size=shape).astype(float) - 1.0
    if kind == "zero":
        return np.zeros(shape)
    raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit argument, else CASCADE_IV_THREADS, else 1."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("CASCADE_IV_THREADS")
    if env:
        return max(1, int(env))
    return 1


# ---------------------------------------------------------------------------
# Source processes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceBatch:
    """Per-batch source draws: target values, node-0 estimates, optional bits."""

    s: np.ndarray          # (B,)
    shat0: np.ndarray      # (B, t_max+1)
    bits: np.ndarray | None = None  # (B, depth) for packet streams


@dataclass(frozen=True)
class KnownSampleSource:
    """Source revealed fully at t = 0; value None draws uniform on [-sqrt3, sqrt3)."""

    value: float | None = None

    def boundary(self) -> BoundaryCondition:
        return SingleSampleBoundary()

    def draw_batch(self, gens, t_max: int) -> SourceBatch:
        if self.value is None:
            s = np.array([g.uniform(-pam.SQRT3, pam.SQRT3) for g in gens])
        else:
            s = np.full(len(gens), float(self.value))
        shat0 = np.repeat(s[:, None], t_max + 1, axis=1)
        return SourceBatch(s=s, shat0=shat0)


def _split_rounds_for_factor(factor: float):
    """Binary split ratios realizing one MSE contraction ``factor`` in (0, 1].

    Splitting every cell of a partition of the uniform source at ratio rho
    scales the conditional MSE by rho^3 + (1-rho)^3, which covers [1/4, 1);
    chaining one such split with j-1 exact halvings reaches any factor.
    """
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"contraction factor must lie in (0, 1], got {factor!r}")
    if factor >= 1.0 - 1e-15:
        return []
    j = max(1, math.ceil(math.log(1.0 / factor) / math.log(4.0) - 1e-12))
    g = factor * 4.0 ** (j - 1)
    # solve rho^3 + (1-rho)^3 = g on (0, 1/2]
    rho = (3.0 - math.sqrt(12.0 * g - 3.0)) / 6.0
    return [rho] + [0.5] * (j - 1)


def _refinement_split_plan(rate_nats: float):
    """Split rounds for the constant per-step factor exp(-2R)."""
    return _split_rounds_for_factor(math.exp(-2.0 * rate_nats))


def _draw_quantized(gens, plans, t_max: int) -> SourceBatch:
    """Nested-quantizer refinement of a uniform source, one plan per time step."""
    s = np.array([g.uniform(-pam.SQRT3, pam.SQRT3) for g in gens])
    lo = np.full(s.shape, -pam.SQRT3)
    width = np.full(s.shape, 2.0 * pam.SQRT3)
    shat0 = np.empty((len(gens), t_max + 1))
    for t in range(t_max + 1):
        for rho in plans[t]:
            cut = lo + rho * width
            right = s >= cut
            lo = np.where(right, cut, lo)
            width = np.where(right, (1.0 - rho) * width, rho * width)
        shat0[:, t] = lo + 0.5 * width
    return SourceBatch(s=s, shat0=shat0)


@dataclass(frozen=True)
class RefinementSource:
    """Successively refined uniform source with MSE exactly exp(-2R(t+1)).

    Realized by nested quantization: each time step splits every cell of the
    current partition (same ratios for all cells) and reveals the conditional
    mean, so the estimates are orthogonal projections and form a Markov
    refinement chain with the exact exponential MSE profile.
    """

    rate_nats: float

    def boundary(self) -> BoundaryCondition:
        return ExponentialRefinementBoundary(self.rate_nats)

    def draw_batch(self, gens, t_max: int) -> SourceBatch:
        plan = _refinement_split_plan(self.rate_nats)
        return _draw_quantized(gens, [plan] * (t_max + 1), t_max)


@dataclass(frozen=True)
class CustomRefinementSource:
    """Markov refinement hitting a caller-supplied monotone MSE profile.

    ``mse_profile[t]`` is the exact target M_0(t); it must be non-increasing
    and cover every simulated time step.
    """

    mse_profile: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "mse_profile", tuple(float(m) for m in self.mse_profile))
        SequenceBoundary(self.mse_profile)  # reuse its validation

    def boundary(self) -> BoundaryCondition:
        return SequenceBoundary(self.mse_profile)

    def draw_batch(self, gens, t_max: int) -> SourceBatch:
        if len(self.mse_profile) < t_max + 1:
            raise ValueError(
                f"profile of length {len(self.mse_profile)} too short for t_max={t_max}"
            )
        prev = 1.0
        plans = []
        for m in self.mse_profile[: t_max + 1]:
            plans.append(_split_rounds_for_factor(m / prev))
            prev = m
        return _draw_quantized(gens, plans, t_max)


@dataclass(frozen=True)
class PacketStreamSource:
    """I.i.d. uniform bit packets mapped to nested PAM prefixes.

    The packet arriving at t = tau*T enters the transmitter estimate at that
    instant: Shat_0(t) is the PAM point of the first psi*(floor(t/T)+1) bits.
    The virtual source is the deep expansion of ``depth`` bits (default: the
    staircase depth plus a 24-bit guard band, beyond float64 resolution of
    the decoded prefixes).
    """

    packet_bits: int
    period: int
    extra_depth: int = 24

    def boundary(self) -> BoundaryCondition:
        return PacketStreamBoundary(self.packet_bits, self.period)

    def depth(self, t_max: int) -> int:
        return self.packet_bits * (t_max // self.period + 1) + self.extra_depth

    def draw_batch(self, gens, t_max: int) -> SourceBatch:
        depth = self.depth(t_max)
        bits = np.stack([g.integers(0, 2, size=depth) for g in gens]).astype(np.int8)
        w = pam.SQRT3 * np.exp2(-(np.arange(depth) + 1.0))
        contrib = (1.0 - 2.0 * bits) * w
        csum = np.cumsum(contrib, axis=1)
        s = csum[:, -1].copy()
        t = np.arange(t_max + 1)
        n_t = self.packet_bits * (t // self.period + 1)
        shat0 = csum[:, n_t - 1]
        return SourceBatch(s=s, shat0=shat0, bits=bits)


@dataclass(frozen=True)
class SinglePacketSource:
    """One packet of psi bits mapped to S^psi and known upfront.

    The finite constellation point itself is the source (variance
    1 - 4^-psi < 1), transmitted with the unit-variance gain tables, so the
    estimation MSE is bounded by the single-sample lattice.
    """

    packet_bits: int

    def boundary(self) -> BoundaryCondition:
        return SingleSampleBoundary()

    def draw_batch(self, gens, t_max: int) -> SourceBatch:
        bits = np.stack([g.integers(0, 2, size=self.packet_bits) for g in gens]).astype(np.int8)
        w = pam.SQRT3 * np.exp2(-(np.arange(self.packet_bits) + 1.0))
        s = ((1.0 - 2.0 * bits) * w).sum(axis=1)
        shat0 = np.repeat(s[:, None], t_max + 1, axis=1)
        return SourceBatch(s=s, shat0=shat0, bits=bits)


def make_source_process(kind: str, **kwargs):
    """Factory over the source kinds: known_sample, single_packet, refinement, packet_stream.

    ``refinement`` accepts either ``rate_nats`` (profile exp(-2R(t+1))) or an
    explicit monotone ``mse_profile`` sequence.
    """
    if kind == "known_sample":
        return KnownSampleSource(**kwargs)
    if kind == "single_packet":
        return SinglePacketSource(**kwargs)
    if kind == "refinement":
        if "mse_profile" in kwargs:
            return CustomRefinementSource(**kwargs)
        return RefinementSource(**kwargs)
    if kind == "packet_stream":
        return PacketStreamSource(**kwargs)
    raise ValueError(f"unknown source kind {kind!r}")


# ---------------------------------------------------------------------------
# Gains
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GainTable:
    """Precomputed beta/gamma per hop and time, with silent-hop markers.

    ``beta[r, t]`` scales the transmission on hop r (node r toward node r+1)
    and ``gamma[r, t]`` the innovation at node r >= 1 (row 0 unused).  Silent
    cells transmit 0 and skip the update.  Any cell whose expected input
    power lands above P is rescaled down; ``clamp_count`` reports only the
    cells that exceeded P beyond ordinary rounding (1e-12 relative), which
    indicates a defective lattice rather than float noise.
    """

    channel: ChannelParams
    r_max: int
    t_max: int
    beta: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    silent: np.ndarray = field(repr=False)
    grid: MseGrid = field(repr=False)
    clamp_count: int = 0


def precompute_gains(grid: MseGrid, eps_degenerate: float = EPS_DEGENERATE) -> GainTable:
    """Gain tables from a solved lattice.

    beta_r(t) = sqrt(P / (M_{r+1}(t-1) - M_r(t))) and
    gamma_r(t) = sqrt(P (M_r(t-1) - M_{r-1}(t))) / (P+1), so that
    beta_{r-1}(t) gamma_r(t) = pbar at every defined cell.
    """
    P = grid.channel.snr
    M = grid.values
    diff = M[1:, :-1] - M[:-1, 1:]  # (r_max, t_max+1): M_{r+1}(t-1) - M_r(t)
    if (diff < _NEG_DIFF_TOL).any():
        worst = float(diff.min())
        raise CorruptedGridError(f"lattice decrease went negative ({worst:.3e})")
    silent = diff <= eps_degenerate
    safe = np.where(silent, 1.0, diff)
    beta = np.where(silent, 0.0, np.sqrt(P / safe))
    gamma = np.zeros((grid.r_max + 1, grid.t_max + 1))
    gamma[1:] = np.where(silent, 0.0, np.sqrt(P * safe) / (P + 1.0))
    # enforce E[X^2] <= P in expectation; count only beyond-rounding overshoots
    power = beta * beta * diff
    over = (power > P) & ~silent
    clamp_count = int(np.count_nonzero((power > P * (1.0 + 1e-12)) & ~silent))
    if over.any():
        beta = np.where(over, beta * np.sqrt(P / np.where(over, power, 1.0)), beta)
    beta.setflags(write=False)
    gamma.setflags(write=False)
    silent.setflags(write=False)
    return GainTable(
        channel=grid.channel,
        r_max=grid.r_max,
        t_max=grid.t_max,
        beta=beta,
        gamma=gamma,
        silent=silent,
        grid=grid,
        clamp_count=clamp_count,
    )


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

def _simulate_batch(
    gains: GainTable,
    source,
    noise_kind: str,
    master_seed: int,
    start_trial: int,
    count: int,
    *,
    probes: bool = False,
    capture_cells=None,
    dither_bits: int | None = None,
    record_traces: bool = False,
    identity_check: bool = True,
):
    """Run ``count`` trials and return partial sums (see run_monte_carlo)."""
    r_max, t_max = gains.r_max, gains.t_max
    pbar = gains.channel.snr_bar
    T = t_max + 1
    gens = [trial_generator(master_seed, start_trial + i) for i in range(count)]
    src = source.draw_batch(gens, t_max)
    z = np.stack([draw_noise(g, noise_kind, (r_max, T)) for g in gens])

    capture_by_t: dict[int, list[tuple[int, int]]] = {}
    if capture_cells:
        for idx, (r, t) in enumerate(capture_cells):
            if not (0 <= r <= r_max and 0 <= t <= t_max):
                raise ValueError(f"capture cell {(r, t)} outside lattice")
            capture_by_t.setdefault(t, []).append((idx, r))
        captures = np.empty((count, len(capture_cells)))
    else:
        captures = None

    err_sum = np.zeros((r_max + 1, T))
    sq_sum = np.zeros((r_max + 1, T))
    sq2_sum = np.zeros((r_max + 1, T))
    pow_sum = np.zeros((r_max, T))
    pow2_sum = np.zeros((r_max, T))
    identity_max = 0.0
    if probes:
        y_all = np.empty((r_max, T, count))
        d_sum = np.zeros((r_max + 1, T))
        d2_sum = np.zeros((r_max + 1, T))
    if record_traces:
        tr_est = np.empty((count, r_max + 1, T))
        tr_x = np.empty((count, r_max, T))
        tr_y = np.empty((count, r_max, T))

    prev = np.zeros((r_max + 1, count))
    for t in range(T):
        cur = np.empty_like(prev)
        cur[0] = src.shat0[:, t]
        # an inf state makes transient nan arithmetic before the finite-state
        # guard below raises; keep that path quiet
        with np.errstate(invalid="ignore"):
            for r in range(r_max):
                zslice = z[:, r, t]
                if gains.silent[r, t]:
                    x = np.zeros(count)
                    y = zslice
                    cur[r + 1] = prev[r + 1]
                else:
                    x = gains.beta[r, t] * (cur[r] - prev[r + 1])
                    y = x + zslice
                    cur[r + 1] = prev[r + 1] + gains.gamma[r + 1, t] * y
                    if identity_check:
                        resid = cur[r + 1] - (
                            pbar * cur[r]
                            + (1.0 - pbar) * prev[r + 1]
                            + gains.gamma[r + 1, t] * zslice
                        )
                        identity_max = max(identity_max, float(np.abs(resid).max()))
                x2 = x * x
                pow_sum[r, t] = x2.sum()
                pow2_sum[r, t] = (x2 * x2).sum()
                if probes:
                    y_all[r, t] = y
                if record_traces:
                    tr_x[:, r, t] = x
                    tr_y[:, r, t] = y
        if not np.isfinite(cur).all():
            bad_r = int(np.argwhere(~np.isfinite(cur))[0, 0])
            raise FloatingPointError(
                f"non-finite estimate at node r={bad_r}, t={t} "
                f"(trials {start_trial}..{start_trial + count - 1})"
            )
        err = src.s[None, :] - cur
        sq = err * err
        err_sum[:, t] = err.sum(axis=1)
        sq_sum[:, t] = sq.sum(axis=1)
        sq2_sum[:, t] = (sq * sq).sum(axis=1)
        if probes:
            for r in range(1, r_max):
                d = err[r] * (src.s - prev[r + 1]) - sq[r]
                d_sum[r, t] = d.sum()
                d2_sum[r, t] = (d * d).sum()
        for idx, r in capture_by_t.get(t, ()):
            captures[:, idx] = cur[r]
        if record_traces:
            tr_est[:, :, t] = cur.T
        prev = cur

    out = {
        "n": count,
        "err_sum": err_sum,
        "sq_sum": sq_sum,
        "sq2_sum": sq2_sum,
        "pow_sum": pow_sum,
        "pow2_sum": pow2_sum,
        "identity_max": identity_max,
    }
    if probes:
        y_sum = y_all.sum(axis=2)
        yy_sum = np.empty((r_max, T, T))
        y2y2_sum = np.empty((r_max, T, T))
        for r in range(r_max):
            yy_sum[r] = np.einsum("tb,ub->tu", y_all[r], y_all[r])
            ysq = y_all[r] * y_all[r]
            y2y2_sum[r] = np.einsum("tb,ub->tu", ysq, ysq)
        out.update(y_sum=y_sum, yy_sum=yy_sum, y2y2_sum=y2y2_sum, d_sum=d_sum, d2_sum=d2_sum)
    if captures is not None:
        out["captures"] = captures
        out["source"] = src
        if dither_bits is not None:
            half = 0.5 * pam.min_distance(dither_bits)
            out["dither"] = np.stack(
                [g.uniform(-half, half, size=len(capture_cells)) for g in gens]
            )
    if record_traces:
        out.update(traces_est=tr_est, traces_x=tr_x, traces_y=tr_y, noise=z, source=src)
    return out


def _neumaier_add(total: np.ndarray, comp: np.ndarray, x: np.ndarray) -> np.ndarray:
    """One compensated-summation step; mutates ``comp`` and returns the new total."""
    new = total + x
    comp += np.where(np.abs(total) >= np.abs(x), (total - new) + x, (x - new) + total)
    return new


class _CompensatedSums:
    """Order-deterministic compensated accumulator for dicts of float arrays."""

    def __init__(self):
        self.totals: dict[str, np.ndarray] = {}
        self.comps: dict[str, np.ndarray] = {}

    def add(self, key: str, x: np.ndarray) -> None:
        if key not in self.totals:
            self.totals[key] = np.array(x, dtype=float, copy=True)
            self.comps[key] = np.zeros_like(self.totals[key])
        else:
            self.totals[key] = _neumaier_add(self.totals[key], self.comps[key], x)

    def value(self, key: str) -> np.ndarray:
        return self.totals[key] + self.comps[key]


def _batch_ranges(num_trials: int, batch_size: int):
    return [
        (start, min(batch_size, num_trials - start))
        for start in range(0, num_trials, batch_size)
    ]


def _run_batches(jobs, worker, threads: int):
    """Execute batch jobs, returning results in job order regardless of scheduling."""
    if threads <= 1:
        return [worker(*job) for job in jobs]
    results = [None] * len(jobs)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {pool.submit(worker, *job): i for i, job in enumerate(jobs)}
        for fut, i in futures.items():
            results[i] = fut.result()
    return results


@dataclass(frozen=True, eq=False)
class MonteCarloAggregate:
    """Deterministic Monte Carlo aggregate over the (r, t) lattice."""

    channel: ChannelParams
    r_max: int
    t_max: int
    n_trials: int
    mse_mean: np.ndarray = field(repr=False)       # (r_max+1, t_max+1)
    mse_stderr: np.ndarray = field(repr=False)
    err_mean: np.ndarray = field(repr=False)
    power_mean: np.ndarray = field(repr=False)     # (r_max, t_max+1)
    power_stderr: np.ndarray = field(repr=False)
    identity_max: float = 0.0
    y_mean: np.ndarray | None = field(default=None, repr=False)
    y_cov: np.ndarray | None = field(default=None, repr=False)        # (r_max, T, T)
    y_cov_stderr: np.ndarray | None = field(default=None, repr=False)
    lemma8_diff_mean: np.ndarray | None = field(default=None, repr=False)
    lemma8_diff_stderr: np.ndarray | None = field(default=None, repr=False)


def run_monte_carlo(
    gains: GainTable,
    source,
    noise_kind: str,
    num_trials: int,
    master_seed: int,
    *,
    probes: bool = False,
    batch_size: int = 20_000,
    threads: int | None = None,
) -> MonteCarloAggregate:
    """Estimate MSE, input power, and covariance probes over the lattice.

    Trial i always uses the stream (master_seed, i); batches have a fixed
    size and are merged in index order with compensated summation, so the
    aggregate is bit-identical for any thread count.
    """
    if num_trials < 1:
        raise ValueError("num_trials must be >= 1")
    threads = resolve_threads(threads)

    def worker(start, count):
        return _simulate_batch(
            gains, source, noise_kind, master_seed, start, count, probes=probes
        )

    results = _run_batches(_batch_ranges(num_trials, batch_size), worker, threads)

    acc = _CompensatedSums()
    identity_max = 0.0
    n = 0
    for res in results:  # batch order, not completion order
        n += res["n"]
        identity_max = max(identity_max, res["identity_max"])
        for key, val in res.items():
            if key in ("n", "identity_max"):
                continue
            acc.add(key, val)

    mse_mean = acc.value("sq_sum") / n
    mse_var = np.maximum(acc.value("sq2_sum") / n - mse_mean**2, 0.0)
    power_mean = acc.value("pow_sum") / n
    power_var = np.maximum(acc.value("pow2_sum") / n - power_mean**2, 0.0)
    out = dict(
        channel=gains.channel,
        r_max=gains.r_max,
        t_max=gains.t_max,
        n_trials=n,
        mse_mean=mse_mean,
        mse_stderr=np.sqrt(mse_var / n),
        err_mean=acc.value("err_sum") / n,
        power_mean=power_mean,
        power_stderr=np.sqrt(power_var / n),
        identity_max=identity_max,
    )
    if probes:
        y_mean = acc.value("y_sum") / n
        yy = acc.value("yy_sum") / n
        y2y2 = acc.value("y2y2_sum") / n
        y_cov = yy - y_mean[:, :, None] * y_mean[:, None, :]
        prod_var = np.maximum(y2y2 - yy**2, 0.0)
        d_mean = acc.value("d_sum") / n
        d_var = np.maximum(acc.value("d2_sum") / n - d_mean**2, 0.0)
        out.update(
            y_mean=y_mean,
            y_cov=y_cov,
            y_cov_stderr=np.sqrt(prod_var / n),
            lemma8_diff_mean=d_mean,
            lemma8_diff_stderr=np.sqrt(d_var / n),
        )
    return MonteCarloAggregate(**out)


# ---------------------------------------------------------------------------
# Single trials and linear-coefficient extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrialResult:
    """Full traces of one trial (channel inputs/outputs, noise, estimates)."""

    source_value: float
    estimates: np.ndarray = field(repr=False)  # (r_max+1, t_max+1)
    x: np.ndarray = field(repr=False)          # (r_max, t_max+1)
    y: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    squared_errors: np.ndarray = field(repr=False)

    def write_csv(self, path) -> None:
        """Trace rows ``t,r,x,y,z,estimate`` (estimate of the receiving node r+1)."""
        r_hops, T = self.x.shape
        with open(path, "w", newline="") as fh:
            fh.write("t,r,x,y,z,estimate\n")
            for t in range(T):
                for r in range(r_hops):
                    fh.write(
                        f"{t},{r},{self.x[r, t]:.17g},{self.y[r, t]:.17g},"
                        f"{self.z[r, t]:.17g},{self.estimates[r + 1, t]:.17g}\n"
                    )


def run_trial(
    gains: GainTable,
    source,
    noise_kind: str,
    master_seed: int,
    trial_index: int = 0,
) -> TrialResult:
    """Run a single trial with full traces retained."""
    res = _simulate_batch(
        gains, source, noise_kind, master_seed, trial_index, 1, record_traces=True
    )
    est = res["traces_est"][0]  # (r_max+1, T)
    s = float(res["source"].s[0])
    sq = (s - est) ** 2
    return TrialResult(
        source_value=s,
        estimates=est,
        x=res["traces_x"][0],
        y=res["traces_y"][0],
        z=res["noise"][0],
        squared_errors=sq,
    )


def coefficient_trial(gains: GainTable) -> np.ndarray:
    """Linear coefficient alpha_r(t) of the source inside each estimate.

    The scheme is linear, so one noise-free pass with constant source 1
    yields alpha exactly: estimates[r, t] = alpha_r(t).
    """
    res = _simulate_batch(
        gains,
        KnownSampleSource(value=1.0),
        "zero",
        0,
        0,
        1,
        record_traces=True,
        identity_check=False,
    )
    return res["traces_est"][0]  # (r_max+1, t_max+1)


# ---------------------------------------------------------------------------
# Decoding Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecodeSpec:
    """What to decode at each captured cell.

    kind "packet": slice the whole packet (packet_bits) at every cell.
    kind "stream": slice the full prefix psi*(floor(t/T)+1) at every cell and
    tally per-packet delays.  kind "packet_dithered": dithered slicer at
    ``decode_bits_n`` with per-cell alphas, alongside the plain slicer.
    """

    kind: str
    packet_bits: int
    period: int = 1
    decode_bits_n: int | None = None
    alphas: np.ndarray | None = None  # per capture cell, for dithered decoding


def run_decoding_monte_carlo(
    gains: GainTable,
    source,
    noise_kind: str,
    num_trials: int,
    master_seed: int,
    capture_cells,
    decode: DecodeSpec,
    *,
    batch_size: int = 20_000,
    threads: int | None = None,
) -> tuple[pam.ErrorStats, pam.ErrorStats | None]:
    """Decode captured estimates batch by batch into deterministic error counts.

    Returns (primary stats, slicer stats); the second entry is only populated
    for dithered decoding, where the plain slicer runs alongside for
    comparison.
    """
    if decode.kind not in ("packet", "stream", "packet_dithered"):
        raise ValueError(f"unknown decode kind {decode.kind!r}")
    if decode.kind == "packet_dithered" and (
        decode.decode_bits_n is None or decode.alphas is None
    ):
        raise ValueError("dithered decoding needs decode_bits_n and alphas")
    threads = resolve_threads(threads)
    cells = list(capture_cells)
    dither_bits = decode.packet_bits if decode.kind == "packet_dithered" else None

    def worker(start, count):
        res = _simulate_batch(
            gains,
            source,
            noise_kind,
            master_seed,
            start,
            count,
            capture_cells=cells,
            dither_bits=dither_bits,
        )
        primary = pam.ErrorStats()
        secondary = pam.ErrorStats() if dither_bits else None
        src = res["source"]
        caps = res["captures"]
        for idx, (r, t) in enumerate(cells):
            if decode.kind == "stream":
                n_bits = decode.packet_bits * (t // decode.period + 1)
                truth = src.bits[:, :n_bits]
                decoded = pam.decode_bits(caps[:, idx], n_bits)
                pam.tally_errors(
                    primary, decoded, truth, r, t, decode.packet_bits, decode.period
                )
            elif decode.kind == "packet":
                truth = src.bits[:, : decode.packet_bits]
                decoded = pam.decode_bits(caps[:, idx], decode.packet_bits)
                pam.tally_errors(
                    primary, decoded, truth, r, t, decode.packet_bits, gains.t_max + 1
                )
            else:  # packet_dithered
                n = decode.decode_bits_n
                truth = src.bits[:, :n]
                dith = pam.dithered_decode(
                    caps[:, idx],
                    decode.alphas[idx],
                    decode.packet_bits,
                    n,
                    dither=res["dither"][:, idx],
                )
                plain = pam.decode_bits(caps[:, idx], n)
                pam.tally_errors(primary, dith, truth, r, t, n, gains.t_max + 1)
                pam.tally_errors(secondary, plain, truth, r, t, n, gains.t_max + 1)
        return primary, secondary

    results = _run_batches(_batch_ranges(num_trials, batch_size), worker, threads)
    primary = pam.ErrorStats()
    secondary = pam.ErrorStats() if dither_bits else None
    for p, s in results:
        primary.merge(p)
        if secondary is not None:
            secondary.merge(s)
    return primary, secondary
