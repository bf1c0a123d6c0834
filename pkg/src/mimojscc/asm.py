"""Adaptive spatial multiplexing: rate allocation, stream mapping, bandwidth.

Each latent patch gets a symbol budget proportional to its entropy and
inversely proportional to the capacity of the stream it rides on,

    k_i = eta * bits_i / C_t,   quantized to a configured level set,

and patches are mapped onto spatial streams greedily, highest entropy first,
so that hot patches land on strong streams and per-stream loads stay balanced.
Total bandwidth is charged by the slowest stream:

    k_y = n_s / (2 n_t) * max_t sum_{i on t} kbar_i

(the 1/2 converts two real dimensions into one complex symbol).  Signaling
overhead is ``k_q + log2(n_s)`` bits per patch, reported separately.

Stream indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RateQuantizer",
    "RateAllocation",
    "BandwidthReport",
    "DEFAULT_RATE_LEVELS",
    "allocate_rate",
    "map_streams",
    "total_bandwidth",
    "overhead_bits",
    "channel_bandwidth_ratio",
    "allocation_table_rows",
]

# Geometric-ish spacing covering low and high per-patch budgets.
DEFAULT_RATE_LEVELS = (2, 4, 8, 16, 24, 32, 48, 64)


@dataclass(frozen=True)
class RateQuantizer:
    """Scalar quantizer with ``2**k_q`` admissible symbol counts."""

    k_q: int
    levels: tuple = DEFAULT_RATE_LEVELS

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        if self.k_q < 1:
            raise ValueError(f"k_q must be >= 1, got {self.k_q}")
        if len(levels) != 2**self.k_q:
            raise ValueError(
                f"level set must have 2**k_q = {2**self.k_q} entries, got {len(levels)}"
            )
        if levels[0] < 1 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("levels must be strictly increasing integers >= 1")
        object.__setattr__(self, "levels", levels)

    def quantize(self, value: float) -> int:
        """Nearest level; ties go to the larger level (protects fidelity)."""
        best = None
        best_dist = np.inf
        for lv in self.levels:
            d = abs(value - lv)
            if d < best_dist or (d == best_dist and lv > best):
                best, best_dist = lv, d
        return best

    def level_index(self, level: int) -> int:
        try:
            return self.levels.index(level)
        except ValueError:
            raise ValueError(f"{level} is not a configured quantizer level") from None


@dataclass(frozen=True)
class RateAllocation:
    """Per-patch rates and stream assignment for one transmission."""

    continuous: np.ndarray  # eta * bits / C_t of the assigned stream (symbols)
    quantized: np.ndarray  # member of the quantizer level set (symbols)
    stream: np.ndarray  # 0-based stream index per patch
    entropy_bits: np.ndarray
    eta: float
    n_streams: int

    def __post_init__(self):
        cont = np.asarray(self.continuous, dtype=np.float64)
        quant = np.asarray(self.quantized, dtype=np.int64)
        stream = np.asarray(self.stream, dtype=np.intp)
        bits = np.asarray(self.entropy_bits, dtype=np.float64)
        if not (cont.shape == quant.shape == stream.shape == bits.shape):
            raise ValueError("allocation fields must all have length l")
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if stream.size and (stream.min() < 0 or stream.max() >= self.n_streams):
            raise ValueError("stream indices out of range")
        object.__setattr__(self, "continuous", cont)
        object.__setattr__(self, "quantized", quant)
        object.__setattr__(self, "stream", stream)
        object.__setattr__(self, "entropy_bits", bits)

    def stream_loads(self) -> np.ndarray:
        """Per-stream sums of quantized symbol counts, length ``n_streams``."""
        loads = np.zeros(self.n_streams, dtype=np.int64)
        np.add.at(loads, self.stream, self.quantized)
        return loads


@dataclass(frozen=True)
class BandwidthReport:
    """Bandwidth bookkeeping for one transmission."""

    k_y: float
    k_z: float
    overhead_bits: int
    per_stream_load: np.ndarray
    cbr: float


def allocate_rate(
    patch_nll_bits: float, c_t: float, eta: float, q: RateQuantizer
) -> tuple[float, int]:
    """Continuous and quantized symbol budget for one patch on one stream."""
    if not np.isfinite(patch_nll_bits) or patch_nll_bits < 0:
        raise ValueError(f"patch_nll_bits must be finite and >= 0, got {patch_nll_bits}")
    if c_t <= 0:
        raise ValueError(f"c_t must be > 0, got {c_t}")
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    continuous = eta * patch_nll_bits / c_t
    return continuous, q.quantize(continuous)


def map_streams(
    entropies: np.ndarray,
    capacities: np.ndarray,
    eta: float,
    q: RateQuantizer,
) -> RateAllocation:
    """Greedy entropy-priority mapping of patches onto spatial streams.

    Patches are visited in order of decreasing entropy (ties by original
    index); each is assigned to the stream that minimizes the resulting
    max-load, ties going to the higher-capacity stream.  The quantized rate of
    a patch uses the capacity of the stream it ends up on.
    """
    entropies = np.asarray(entropies, dtype=np.float64)
    capacities = np.asarray(capacities, dtype=np.float64)
    if entropies.ndim != 1 or entropies.size < 1:
        raise ValueError("entropies must be a non-empty vector")
    if capacities.ndim != 1 or capacities.size < 1:
        raise ValueError("capacities must be a non-empty vector")
    if np.any(capacities <= 0):
        raise ValueError("capacities must be positive")

    l = entropies.size
    n_s = capacities.size
    # Per-patch quantized cost on every candidate stream.
    cont = np.empty((l, n_s))
    quant = np.empty((l, n_s), dtype=np.int64)
    for i in range(l):
        for t in range(n_s):
            cont[i, t], quant[i, t] = allocate_rate(entropies[i], capacities[t], eta, q)

    order = np.lexsort((np.arange(l), -entropies))
    loads = np.zeros(n_s, dtype=np.int64)
    stream = np.empty(l, dtype=np.intp)
    for i in order:
        best_t = None
        best_key = None
        for t in range(n_s):
            resulting = loads.copy()
            resulting[t] += quant[i, t]
            key = (resulting.max(), -capacities[t], t)
            if best_key is None or key < best_key:
                best_key, best_t = key, t
        stream[i] = best_t
        loads[best_t] += quant[i, best_t]

    idx = np.arange(l)
    return RateAllocation(
        continuous=cont[idx, stream],
        quantized=quant[idx, stream],
        stream=stream,
        entropy_bits=entropies,
        eta=float(eta),
        n_streams=n_s,
    )


def total_bandwidth(alloc: RateAllocation, n_s: int, n_t: int) -> float:
    """Bandwidth cost charged by the most loaded stream.

    ``k_y = n_s / (2 n_t) * max_t sum_i [stream_i == t] * kbar_i``.
    """
    if n_s != alloc.n_streams:
        raise ValueError(f"allocation has {alloc.n_streams} streams, asked for {n_s}")
    if n_t < 1:
        raise ValueError(f"n_t must be >= 1, got {n_t}")
    return n_s / (2.0 * n_t) * float(alloc.stream_loads().max())


def overhead_bits(l: int, k_q: int, n_s: int) -> int:
    """Signaling bits: each patch announces its rate level and stream index."""
    if l < 0:
        raise ValueError(f"l must be >= 0, got {l}")
    if k_q < 1:
        raise ValueError(f"k_q must be >= 1, got {k_q}")
    if n_s < 1 or (n_s & (n_s - 1)) != 0:
        raise ValueError(f"n_s must be a power of two for integer signaling bits, got {n_s}")
    return l * (k_q + n_s.bit_length() - 1)


def channel_bandwidth_ratio(k_total: float, m: int) -> float:
    """CBR: channel symbols spent per source dimension, R = k / m."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if k_total < 0:
        raise ValueError(f"k_total must be >= 0, got {k_total}")
    return k_total / m


def bandwidth_report(
    alloc: RateAllocation,
    n_s: int,
    n_t: int,
    k_z: float,
    m: int,
    k_q: int,
    c_z: float,
    count_overhead_in_cbr: bool = False,
) -> BandwidthReport:
    """Assemble the full bandwidth accounting for one transmission."""
    k_y = total_bandwidth(alloc, n_s, n_t)
    oh = overhead_bits(alloc.entropy_bits.size, k_q, n_s)
    k_total = k_y + k_z
    if count_overhead_in_cbr:
        k_total += oh / c_z
    return BandwidthReport(
        k_y=k_y,
        k_z=k_z,
        overhead_bits=oh,
        per_stream_load=alloc.stream_loads().astype(np.float64),
        cbr=channel_bandwidth_ratio(k_total, m),
    )


def allocation_table_rows(alloc: RateAllocation):
    """Rows (patch index, entropy bits, stream, continuous, quantized) for CSV export."""
    for i in range(alloc.entropy_bits.size):
        yield (
            i,
            float(alloc.entropy_bits[i]),
            int(alloc.stream[i]),
            float(alloc.continuous[i]),
            int(alloc.quantized[i]),
        )


def write_allocation_csv(alloc: RateAllocation, path) -> None:
    """Dump the allocation table for inspection (stream indices 0-based)."""
    with open(path, "w", newline="\n") as fh:
        fh.write("patch,entropy_bits,stream,continuous_rate,quantized_rate\n")
        for i, bits, stream, cont, quant in allocation_table_rows(alloc):
            fh.write(f"{i},{bits:.10g},{stream},{cont:.10g},{quant}\n")
