"""MIMO fading channel models, zero-forcing detection and per-stream CQI.

Conventions used throughout:

* A channel realization stacks per-subcarrier gain matrices into an array of
  shape ``(n_c, n_r, n_t)`` (subcarrier x receive antenna x transmit antenna).
* ``n_s = min(n_t, n_r)`` spatial streams are mapped identity-style onto the
  first ``n_s`` transmit antennas (no explicit precoding).
* Noise is circularly-symmetric complex Gaussian with total power
  ``noise_power`` per receive antenna (real/imag parts each carry half).
* Symbol matrices may have any number of rows; row ``k`` is carried on
  subcarrier ``k mod n_c`` (block fading over the whole transmission).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ChannelRealization",
    "KroneckerSpec",
    "CqiReport",
    "DetectionError",
    "sample_kronecker",
    "sample_wideband_rayleigh",
    "apply_channel",
    "zf_detect",
    "zf_stream_sinr",
    "zf_capacities",
    "quantize_cqi",
]

HERMITIAN_TOL = 1e-12
# Guard against silent numerical blowup in the pseudo-inverse.
MAX_CONDITION_NUMBER = 1e12

# Capacity grid (bits per complex symbol) used when no explicit CQI quantizer
# is configured.  Covers the post-ZF range seen at SNRs of roughly -5..25 dB.
DEFAULT_CQI_LEVELS = (0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0)

# 2x2 default correlations: moderate coupling at the transmit side, stronger
# coupling at the receive side.
DEFAULT_R_TX = ((1.0, 0.2), (0.2, 1.0))
DEFAULT_R_RX = ((1.0, 0.5), (0.5, 1.0))


class DetectionError(RuntimeError):
    """Raised when a subcarrier's channel matrix is too ill-conditioned to invert."""


@dataclass(frozen=True)
class ChannelRealization:
    """One draw of a frequency-domain MIMO channel plus the link noise power.

    ``h`` has shape ``(n_c, n_r, n_t)`` with unitless complex gains;
    ``noise_power`` is the linear-scale noise variance per receive antenna.
    """

    h: np.ndarray
    noise_power: float = 0.0

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.complex128)
        if h.ndim != 3 or min(h.shape) < 1:
            raise ValueError(f"channel tensor must be (n_c, n_r, n_t), got shape {h.shape}")
        if not np.all(np.isfinite(h.view(np.float64))):
            raise ValueError("channel tensor contains non-finite entries")
        if self.noise_power < 0:
            raise ValueError(f"noise_power must be >= 0, got {self.noise_power}")
        object.__setattr__(self, "h", h)

    @property
    def n_c(self) -> int:
        return self.h.shape[0]

    @property
    def n_r(self) -> int:
        return self.h.shape[1]

    @property
    def n_t(self) -> int:
        return self.h.shape[2]

    @property
    def n_streams(self) -> int:
        return min(self.n_t, self.n_r)

    def with_noise_power(self, noise_power: float) -> "ChannelRealization":
        return replace(self, noise_power=float(noise_power))


def _check_hermitian_psd(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.complex128)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {m.shape}")
    if np.max(np.abs(m - m.conj().T)) > HERMITIAN_TOL:
        raise ValueError(f"{name} is not Hermitian within {HERMITIAN_TOL}")
    eigvals = np.linalg.eigvalsh(m)
    if eigvals.min() < -HERMITIAN_TOL:
        raise ValueError(f"{name} has negative eigenvalue {eigvals.min():.3e}")
    return m


@dataclass(frozen=True)
class KroneckerSpec:
    """Separable transmit/receive correlation for a narrowband indoor channel."""

    r_tx: np.ndarray
    r_rx: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r_tx", _check_hermitian_psd(self.r_tx, "r_tx"))
        object.__setattr__(self, "r_rx", _check_hermitian_psd(self.r_rx, "r_rx"))

    @property
    def n_t(self) -> int:
        return self.r_tx.shape[0]

    @property
    def n_r(self) -> int:
        return self.r_rx.shape[0]


@dataclass(frozen=True)
class CqiReport:
    """Per-stream link quality as seen after zero-forcing detection.

    ``per_stream_capacity[t]`` is the per-subcarrier average of
    ``log2(1 + SINR)`` for stream ``t``; ``per_stream_sinr`` is the effective
    SINR consistent with that capacity, i.e. ``2**capacity - 1``.
    """

    per_stream_sinr: np.ndarray
    per_stream_capacity: np.ndarray
    quantized_cqi: np.ndarray = field(default=None)

    def __post_init__(self):
        sinr = np.asarray(self.per_stream_sinr, dtype=np.float64)
        cap = np.asarray(self.per_stream_capacity, dtype=np.float64)
        if sinr.shape != cap.shape:
            raise ValueError("sinr and capacity vectors must have equal length")
        if np.any(cap < 0):
            raise ValueError("capacities must be nonnegative")
        expected = np.log2(1.0 + sinr)
        # Equality branch keeps the noiseless (infinite SINR) case consistent.
        with np.errstate(invalid="ignore"):
            ok = (cap == expected) | (np.abs(cap - expected) <= 1e-9)
        if not np.all(ok):
            raise ValueError("capacity and effective SINR are inconsistent")
        object.__setattr__(self, "per_stream_sinr", sinr)
        object.__setattr__(self, "per_stream_capacity", cap)
        if self.quantized_cqi is not None:
            object.__setattr__(
                self, "quantized_cqi", np.asarray(self.quantized_cqi, dtype=np.intp)
            )


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    # Hermitian eigendecomposition; clamp small negative eigenvalues from rounding.
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def _crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """i.i.d. CN(0, 1) samples: real/imag each N(0, 1/2)."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) / np.sqrt(2.0)


def sample_kronecker(
    spec: KroneckerSpec,
    n_c: int,
    rng: np.random.Generator,
    noise_power: float = 0.0,
) -> ChannelRealization:
    """Draw ``n_c`` independent correlated flat-fading matrices.

    Each subcarrier gets ``H = R_rx^(1/2) G R_tx^(1/2)`` with i.i.d. CN(0,1)
    entries in ``G``, so ``vec(H)`` has covariance ``R_tx^T (x) R_rx``.
    """
    if n_c < 1:
        raise ValueError(f"n_c must be >= 1, got {n_c}")
    sq_rx = _psd_sqrt(spec.r_rx)
    sq_tx = _psd_sqrt(spec.r_tx)
    g = _crandn(rng, (n_c, spec.n_r, spec.n_t))
    h = np.einsum("ij,cjk,kl->cil", sq_rx, g, sq_tx)
    return ChannelRealization(h=h, noise_power=noise_power)


def sample_wideband_rayleigh(
    n_c: int,
    n_taps: int,
    power_profile: np.ndarray,
    rng: np.random.Generator,
    n_r: int = 2,
    n_t: int = 2,
    noise_power: float = 0.0,
) -> ChannelRealization:
    """Frequency-selective Rayleigh channel from a tapped delay line.

    Per antenna pair, ``n_taps`` i.i.d. CN(0, p_k) taps are drawn and the
    ``n_c``-point DFT gives the subcarrier gains.  With the profile summing to
    one, every subcarrier gain has unit variance.
    """
    profile = np.asarray(power_profile, dtype=np.float64)
    if profile.shape != (n_taps,):
        raise ValueError(f"power_profile must have {n_taps} entries, got shape {profile.shape}")
    if np.any(profile < 0):
        raise ValueError("power_profile entries must be nonnegative")
    if abs(profile.sum() - 1.0) > 1e-9:
        raise ValueError(f"power_profile must sum to 1 within 1e-9, got {profile.sum()!r}")
    if n_taps > n_c:
        raise ValueError(f"n_taps ({n_taps}) must not exceed n_c ({n_c})")
    taps = _crandn(rng, (n_taps, n_r, n_t)) * np.sqrt(profile)[:, None, None]
    # Unnormalized DFT over the delay axis: H[c] = sum_k h_k exp(-2j pi c k / n_c).
    h = np.fft.fft(taps, n=n_c, axis=0)
    return ChannelRealization(h=h, noise_power=noise_power)


def uniform_power_profile(n_taps: int) -> np.ndarray:
    return np.full(n_taps, 1.0 / n_taps)


def exponential_power_profile(n_taps: int, decay: float = 0.5) -> np.ndarray:
    """Exponentially decaying tap powers ``p_k ~ decay**k``, normalized."""
    if not 0 < decay <= 1:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    p = decay ** np.arange(n_taps)
    return p / p.sum()


def _effective_h(real: ChannelRealization, n_s: int | None) -> np.ndarray:
    """Channel seen by the streams: first ``n_s`` transmit antennas."""
    if n_s is None:
        n_s = real.n_streams
    if not 1 <= n_s <= real.n_streams:
        raise ValueError(f"n_s must be in [1, {real.n_streams}], got {n_s}")
    return real.h[:, :, :n_s]


def apply_channel(
    real: ChannelRealization,
    s: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Transmit symbol rows through the channel and add receiver noise.

    ``s`` has shape ``(n_sym, n_s)``; row ``k`` rides on subcarrier
    ``k mod n_c``.  Returns the received ``(n_sym, n_r)`` array.
    """
    s = np.asarray(s, dtype=np.complex128)
    if s.ndim != 2:
        raise ValueError(f"symbol matrix must be 2-D, got shape {s.shape}")
    if not np.all(np.isfinite(s.view(np.float64))):
        raise ValueError("symbol matrix contains non-finite entries")
    h_eff = _effective_h(real, s.shape[1])
    idx = np.arange(s.shape[0]) % real.n_c
    received = np.einsum("krt,kt->kr", h_eff[idx], s)
    if real.noise_power > 0:
        received = received + _crandn(rng, received.shape) * np.sqrt(real.noise_power)
    return received


def _zf_weights(real: ChannelRealization, n_s: int | None):
    """Per-subcarrier ZF matrix ``W = (H^H H)^-1 H^H`` and diag of ``(H^H H)^-1``.

    Built from a QR factorization (W = R^-1 Q^H), which keeps the applied
    error at condition-number order instead of its square.
    """
    h_eff = _effective_h(real, n_s)
    cond = np.linalg.cond(h_eff)
    bad = np.nonzero(~(cond < MAX_CONDITION_NUMBER))[0]
    if bad.size:
        raise DetectionError(
            f"subcarrier {bad[0]} is rank deficient for ZF "
            f"(condition number {cond[bad[0]]:.3e} >= {MAX_CONDITION_NUMBER:.0e})"
        )
    q, r = np.linalg.qr(h_eff)
    w = np.linalg.solve(r, q.conj().transpose(0, 2, 1))
    r_inv = np.linalg.inv(r)
    inv_diag = np.sum(np.abs(r_inv) ** 2, axis=2)  # diag of R^-1 R^-H
    return w, inv_diag


def zf_stream_sinr(real: ChannelRealization, n_s: int | None = None) -> np.ndarray:
    """Post-ZF SINR per subcarrier and stream, shape ``(n_c, n_s)``.

    ``SINR_{c,t} = 1 / (noise_power * [(H^H H)^-1]_{tt})``; infinite when the
    link is noiseless.
    """
    _, inv_diag = _zf_weights(real, n_s)
    if real.noise_power == 0:
        return np.full_like(inv_diag, np.inf)
    return 1.0 / (real.noise_power * inv_diag)


def zf_capacities(
    real: ChannelRealization,
    n_s: int | None = None,
    cqi_levels: np.ndarray | None = None,
) -> CqiReport:
    """Per-stream averaged capacity and quantized CQI for the transmitter.

    Capacity is averaged in the capacity domain: ``mean_c log2(1 + SINR_{c,t})``.
    The reported effective SINR is the one consistent with that average.
    """
    sinr = zf_stream_sinr(real, n_s)
    capacity = np.mean(np.log2(1.0 + sinr), axis=0)
    eff_sinr = np.exp2(capacity) - 1.0
    levels = DEFAULT_CQI_LEVELS if cqi_levels is None else cqi_levels
    quantized = np.array([quantize_cqi(c, levels)[0] for c in capacity], dtype=np.intp)
    return CqiReport(
        per_stream_sinr=eff_sinr,
        per_stream_capacity=capacity,
        quantized_cqi=quantized,
    )


def zf_detect(
    real: ChannelRealization,
    received: np.ndarray,
    n_s: int | None = None,
    cqi_levels: np.ndarray | None = None,
) -> tuple[np.ndarray, CqiReport]:
    """Zero-forcing detection of ``received`` rows, plus the stream CQI report.

    Returns ``(s_hat, report)`` with ``s_hat`` of shape ``(n_sym, n_s)``;
    ``s_hat_k = (H^H H)^-1 H^H y_k`` with the subcarrier of row ``k``.
    """
    received = np.asarray(received, dtype=np.complex128)
    if received.ndim != 2 or received.shape[1] != real.n_r:
        raise ValueError(
            f"received must be (n_sym, {real.n_r}), got shape {received.shape}"
        )
    if n_s is None:
        n_s = real.n_streams
    w, _ = _zf_weights(real, n_s)
    idx = np.arange(received.shape[0]) % real.n_c
    detected = np.einsum("ksr,kr->ks", w[idx], received)
    return detected, zf_capacities(real, n_s, cqi_levels)


def zf_equalize_adjoint(
    real: ChannelRealization,
    g_detected: np.ndarray,
    n_s: int | None = None,
) -> np.ndarray:
    """Adjoint of the linear map ``s -> zf_detect(apply_channel(s))``.

    Used by the manual backward pass: with gradients in the
    ``dL/dRe + j dL/dIm`` convention, the pullback through ``y = A x`` is
    ``A^H g``.  Composes the channel and ZF weight adjoints.
    """
    g_detected = np.asarray(g_detected, dtype=np.complex128)
    if n_s is None:
        n_s = real.n_streams
    w, _ = _zf_weights(real, n_s)
    h_eff = _effective_h(real, n_s)
    idx = np.arange(g_detected.shape[0]) % real.n_c
    g_received = np.einsum("ksr,ks->kr", w[idx].conj(), g_detected)
    return np.einsum("krt,kr->kt", h_eff[idx].conj(), g_received)


def quantize_cqi(capacity: float, levels) -> tuple[int, float]:
    """Nearest-level scalar quantization of a capacity value.

    Ties go to the smaller level (a conservative rate estimate); values beyond
    the grid saturate at the extremes.  Returns ``(index, level_value)``.
    """
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0:
        raise ValueError("CQI level set must not be empty")
    if levels.size > 1 and np.any(np.diff(levels) <= 0):
        raise ValueError("CQI levels must be strictly increasing")
    if np.isinf(capacity):
        return int(levels.size - 1), float(levels[-1])
    dist = np.abs(levels - capacity)
    best = dist.min()
    # Ties resolve to the smallest qualifying level.
    idx = int(np.nonzero(dist == best)[0][0])
    return idx, float(levels[idx])
