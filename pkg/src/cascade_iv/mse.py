"""Exact LMMSE lattice M_r(t) over relay index r and time t.

The lattice obeys the two-term recursion

    M_r(t) = snr_bar * M_{r-1}(t) + (1 - snr_bar) * M_r(t-1),   r >= 1, t >= 0

with initial condition M_r(-1) = 1 for every r and a pluggable boundary row
M_0(t).  Three boundaries are supported:

* ``SingleSampleBoundary``            M_0(t) = 0 (source known upfront)
* ``ExponentialRefinementBoundary``   M_0(t) = exp(-2 R (t+1))
* ``PacketStreamBoundary``            M_0(t) = 2^(-2 psi (floor(t/T) + 1))

The packet staircase incorporates the packet arriving at t = tau*T
immediately, so it sits on or below the exponential-refinement profile with
equality at the end of each period.

Closed forms are evaluated in the log domain (binomials through log-gamma,
sums through max-shifted log-sum-exp accumulation) because the binomial
factors overflow float64 long before r = t = 200.  Linear wrappers may
underflow to 0.0; callers comparing values below ~1e-300 should use the
``log_*`` variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy.signal import lfilter
from scipy.special import gammaln, logsumexp

from .params import ChannelParams, HopConvention, Velocity

__all__ = [
    "DEFAULT_CELL_CAP",
    "UNDERFLOW_LINEAR",
    "GridSizeError",
    "SingleSampleBoundary",
    "ExponentialRefinementBoundary",
    "PacketStreamBoundary",
    "SequenceBoundary",
    "BoundaryCondition",
    "MseGrid",
    "solve_grid",
    "log_closed_form_single",
    "closed_form_single",
    "log_closed_form_streaming",
    "closed_form_streaming",
    "log_closed_form_single_grid",
    "log_closed_form_streaming_grid",
    "mse_at_velocity",
    "velocity_time_index",
    "write_grid_csv",
]

DEFAULT_CELL_CAP = 50_000_000

# Linear values below this are meaningless in float64; compare logs instead.
UNDERFLOW_LINEAR = 1e-300


class GridSizeError(ValueError):
    """Requested grid exceeds the configured cell-count cap."""


@dataclass(frozen=True)
class SingleSampleBoundary:
    """Source known perfectly at the transmitter from t = 0 on."""

    kind = "single_sample"

    def profile(self, t_max: int) -> np.ndarray:
        return np.zeros(t_max + 1)


@dataclass(frozen=True)
class ExponentialRefinementBoundary:
    """Transmitter-side MSE exp(-2 R (t+1)), the fixed-rate refinement idealization."""

    rate_nats: float
    kind = "exponential_refinement"

    def __post_init__(self) -> None:
        if not math.isfinite(self.rate_nats) or self.rate_nats <= 0.0:
            raise ValueError(f"rate_nats must be positive, got {self.rate_nats!r}")

    def profile(self, t_max: int) -> np.ndarray:
        t = np.arange(t_max + 1)
        return np.exp(-2.0 * self.rate_nats * (t + 1))


@dataclass(frozen=True)
class PacketStreamBoundary:
    """Staircase 2^(-2 psi (floor(t/T)+1)) realized by PAM packet arrivals.

    The packet arriving at t = tau*T enters the transmitter estimate at that
    same instant, so the staircase lies on or below exp(-2 R (t+1)) with
    equality at t = (tau+1)*T - 1.
    """

    packet_bits: int
    period: int
    kind = "packet_stream"

    def __post_init__(self) -> None:
        if self.packet_bits < 1 or self.period < 1:
            raise ValueError("packet_bits and period must be >= 1")

    def profile(self, t_max: int) -> np.ndarray:
        t = np.arange(t_max + 1)
        return np.exp2(-2.0 * self.packet_bits * (t // self.period + 1.0))


@dataclass(frozen=True)
class SequenceBoundary:
    """Explicit boundary row M_0(t), for caller-supplied refinement profiles."""

    values: tuple
    kind = "sequence"

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("boundary sequence must be a non-empty 1-D profile")
        if (vals < 0).any() or (vals > 1).any():
            raise ValueError("boundary values must lie in [0, 1]")
        if (np.diff(vals) > 1e-15).any():
            raise ValueError("boundary profile must be non-increasing in t")

    def profile(self, t_max: int) -> np.ndarray:
        vals = np.asarray(self.values, dtype=float)
        if vals.size < t_max + 1:
            raise ValueError(
                f"boundary profile of length {vals.size} too short for t_max={t_max}"
            )
        return vals[: t_max + 1].copy()


BoundaryCondition = Union[
    SingleSampleBoundary,
    ExponentialRefinementBoundary,
    PacketStreamBoundary,
    SequenceBoundary,
]


@dataclass(frozen=True, eq=False)
class MseGrid:
    """Solved lattice; ``values[r, t+1]`` stores M_r(t) with column 0 holding t = -1."""

    channel: ChannelParams
    boundary: BoundaryCondition
    r_max: int
    t_max: int
    values: np.ndarray = field(repr=False)

    def at(self, r: int, t: int) -> float:
        """M_r(t) for 0 <= r <= r_max and -1 <= t <= t_max."""
        if not (0 <= r <= self.r_max and -1 <= t <= self.t_max):
            raise IndexError(f"cell (r={r}, t={t}) outside solved grid")
        return float(self.values[r, t + 1])


def solve_grid(
    channel: ChannelParams,
    boundary: BoundaryCondition,
    r_max: int,
    t_max: int,
    cell_cap: int = DEFAULT_CELL_CAP,
) -> MseGrid:
    """Solve the lattice by dynamic programming in O(r_max * t_max).

    Each row is an IIR recurrence in t driven by the row above, evaluated with
    ``lfilter``; the convex-combination structure keeps the computation stable
    and every entry inside [0, 1].
    """
    if r_max < 1 or t_max < 0:
        raise ValueError("need r_max >= 1 and t_max >= 0")
    n_cells = (r_max + 1) * (t_max + 2)
    if n_cells > cell_cap:
        raise GridSizeError(f"grid of {n_cells} cells exceeds cap {cell_cap}")

    pbar = channel.snr_bar
    values = np.empty((r_max + 1, t_max + 2))
    values[:, 0] = 1.0  # M_r(-1) = 1
    values[0, 1:] = boundary.profile(t_max)
    b, a = [pbar], [1.0, -(1.0 - pbar)]
    for r in range(1, r_max + 1):
        row, _ = lfilter(b, a, values[r - 1, 1:], zi=[(1.0 - pbar) * 1.0])
        values[r, 1:] = row
    values.setflags(write=False)
    return MseGrid(channel=channel, boundary=boundary, r_max=r_max, t_max=t_max, values=values)


def _check_cell(r: int, t: int) -> None:
    if r < 1 or t < 0:
        raise ValueError(f"closed forms require r >= 1 and t >= 0, got (r={r}, t={t})")


def log_closed_form_single(channel: ChannelParams, r: int, t: int) -> float:
    """ln M_r(t) for the single-sample boundary.

    M_r(t) = (1-pbar)^(t+1) * sum_{k=1}^{r} C(t+r-k, r-k) pbar^(r-k).
    """
    _check_cell(r, t)
    pbar = channel.snr_bar
    j = np.arange(r)  # j = r - k
    terms = gammaln(t + j + 1) - gammaln(j + 1) - gammaln(t + 1) + j * math.log(pbar)
    return (t + 1) * math.log1p(-pbar) + float(logsumexp(terms))


def closed_form_single(channel: ChannelParams, r: int, t: int) -> float:
    """Linear-domain wrapper; may underflow to 0.0 for deep cells."""
    return math.exp(log_closed_form_single(channel, r, t))


def log_closed_form_streaming(
    channel: ChannelParams, rate_nats: float, r: int, t: int
) -> tuple[float, float]:
    """(ln MSE_I, ln MSE_II) for the exponential-refinement boundary.

    MSE_I is the single-sample closed form (effect of the unit initial
    conditions); MSE_II collects the boundary cells M_0(x) = exp(-2R(x+1)),
    each reaching (r, t) through C(r+s-1, s) lattice paths:

        MSE_II = pbar^r * sum_{s=0}^{t} exp(-2R(t-s+1)) C(r+s-1, s) (1-pbar)^s.
    """
    _check_cell(r, t)
    if rate_nats <= 0.0:
        raise ValueError("rate_nats must be positive")
    pbar = channel.snr_bar
    s = np.arange(t + 1)
    terms = (
        -2.0 * rate_nats * (t - s + 1)
        + gammaln(r + s)
        - gammaln(s + 1)
        - gammaln(r)
        + s * math.log1p(-pbar)
    )
    log_ii = r * math.log(pbar) + float(logsumexp(terms))
    return log_closed_form_single(channel, r, t), log_ii


def closed_form_streaming(
    channel: ChannelParams, rate_nats: float, r: int, t: int
) -> tuple[float, float]:
    log_i, log_ii = log_closed_form_streaming(channel, rate_nats, r, t)
    return math.exp(log_i), math.exp(log_ii)


def log_closed_form_single_grid(
    channel: ChannelParams, r_max: int, t_max: int
) -> np.ndarray:
    """ln M_r(t) for all 1 <= r <= r_max, 0 <= t <= t_max; shape (r_max+1, t_max+1).

    Row 0 is the boundary (-inf since M_0 = 0).  The cumulative log-sum-exp
    over the path-count terms makes the whole grid O(r_max * t_max).
    """
    pbar = channel.snr_bar
    t = np.arange(t_max + 1)[None, :]
    j = np.arange(r_max)[:, None]  # j = r - k
    terms = gammaln(t + j + 1) - gammaln(j + 1) - gammaln(t + 1) + j * math.log(pbar)
    cum = np.logaddexp.accumulate(terms, axis=0)
    out = np.full((r_max + 1, t_max + 1), -np.inf)
    out[1:] = (t + 1) * math.log1p(-pbar) + cum
    return out


def log_closed_form_streaming_grid(
    channel: ChannelParams, rate_nats: float, r_max: int, t_max: int
) -> tuple[np.ndarray, np.ndarray]:
    """(ln MSE_I, ln MSE_II) grids, shape (r_max+1, t_max+1); row 0 is the boundary."""
    if rate_nats <= 0.0:
        raise ValueError("rate_nats must be positive")
    pbar = channel.snr_bar
    log_i = log_closed_form_single_grid(channel, r_max, t_max)
    s = np.arange(t_max + 1)[None, :]
    r = np.arange(1, r_max + 1)[:, None]
    # 2Rs absorbs the t-dependence so one accumulation serves every t.
    terms = 2.0 * rate_nats * s + gammaln(r + s) - gammaln(s + 1) - gammaln(r) + s * math.log1p(-pbar)
    cum = np.logaddexp.accumulate(terms, axis=1)
    log_ii = np.full((r_max + 1, t_max + 1), -np.inf)
    log_ii[1:] = r * math.log(pbar) - 2.0 * rate_nats * (s + 1) + cum
    log_ii[0] = -2.0 * rate_nats * (np.arange(t_max + 1) + 1)
    return log_i, log_ii


def velocity_time_index(v: Velocity, r: int) -> int:
    """Time index paired with relay r when moving at velocity v.

    Instantaneous convention: t = floor(r / v).  Delayed hops retard node r by
    exactly r steps, so the delayed lattice is the instantaneous one shifted:
    t = floor(r / v) - r, which is the instantaneous index at the translated
    velocity v/(1-v).
    """
    if r < 1:
        raise ValueError("need r >= 1")
    t = math.floor(r / v.value)
    if v.convention is HopConvention.DELAYED:
        t -= r
    return t


def mse_at_velocity(
    source: MseGrid | Callable[[int, int], float], v: Velocity, r: int
) -> float:
    """M_r(t) along the fixed-velocity trajectory t = floor(r / v)."""
    t = velocity_time_index(v, r)
    if isinstance(source, MseGrid):
        if t > source.t_max:
            raise IndexError(
                f"t={t} for (r={r}, v={v.value}) exceeds solved t_max={source.t_max}"
            )
        return source.at(r, max(t, -1))
    return source(r, t)


def write_grid_csv(grid: MseGrid, path) -> None:
    """Export ``r,t,mse`` rows, r-major then t (t = -1 column included)."""
    with open(path, "w", newline="") as fh:
        fh.write("r,t,mse\n")
        for r in range(grid.r_max + 1):
            for t in range(-1, grid.t_max + 1):
                fh.write(f"{r},{t},{grid.values[r, t + 1]:.17g}\n")
