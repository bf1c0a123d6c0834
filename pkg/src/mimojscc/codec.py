"""Patch-MLP codec with manually implemented forward and backward passes.

Networks (all per-patch, shared weights across patches, tanh hidden layers):

* ``ga``  analysis: p*p*channels pixel patch -> c-dim latent
* ``gs``  synthesis: latent -> pixel patch (clamped to [0, 1] at eval only)
* ``ha``  hyper encoder: latent -> c_z-dim hyper-latent
* ``hs``  hyper decoder: hyper-latent -> (mu, sigma) for every latent element
* ``fe``  JSCC encoder: latent + rate token + CSI token -> trunk feature,
  then one output head per admissible symbol count maps to 2*kbar reals
* ``fd``  JSCC decoder: per-level input head lifts 2*kbar reals to a unified
  width, tokens are concatenated, a shared trunk emits the latent estimate

Consecutive real pairs form one complex channel symbol.  All trainable
arrays live in one flat float64 vector so gradients can be checked
index-by-index against finite differences.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .asm import DEFAULT_RATE_LEVELS, RateQuantizer
from .channel import DEFAULT_CQI_LEVELS
from .entropy import SIGMA_MIN, GaussianParams

__all__ = [
    "CodecConfig",
    "LatentTensor",
    "SymbolStreams",
    "ToyCodecParams",
    "extract_patches",
    "assemble_patches",
    "analyze",
    "synthesize",
    "hyper_encode",
    "hyper_decode",
    "jscc_encode",
    "jscc_decode",
    "power_normalize",
    "save_params",
    "load_params",
]

CHECKPOINT_FORMAT_VERSION = 1

# Output-layer gain for the analysis and hyper encoders at initialization.
# Integer-bin entropy models need latents spanning several bins; starting at
# sub-integer scale makes round(z) destroy the side information.
LATENT_INIT_GAIN = 3.0


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass(frozen=True)
class CodecConfig:
    """Architecture hyperparameters; fixes the parameter layout."""

    patch_size: int = 4
    channels: int = 3
    latent_dim: int = 16
    hyper_dim: int = 4
    hidden: int = 64
    trunk_hidden: int = 64
    unify_dim: int = 32
    token_dim: int = 8
    k_q: int = 3
    rate_levels: tuple = DEFAULT_RATE_LEVELS
    cqi_levels: tuple = DEFAULT_CQI_LEVELS
    sigma_min: float = SIGMA_MIN

    def __post_init__(self):
        object.__setattr__(self, "rate_levels", tuple(int(v) for v in self.rate_levels))
        object.__setattr__(self, "cqi_levels", tuple(float(v) for v in self.cqi_levels))
        for name in ("patch_size", "channels", "latent_dim", "hyper_dim", "hidden",
                     "trunk_hidden", "unify_dim", "token_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        # Delegates level-set validation (count = 2**k_q, increasing, >= 1).
        RateQuantizer(self.k_q, self.rate_levels)
        if len(self.cqi_levels) < 1 or any(
            b <= a for a, b in zip(self.cqi_levels, self.cqi_levels[1:])
        ):
            raise ValueError("cqi_levels must be non-empty and strictly increasing")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def rate_quantizer(self) -> RateQuantizer:
        return RateQuantizer(self.k_q, self.rate_levels)


@dataclass(frozen=True)
class LatentTensor:
    """Sequence of patch embeddings plus the patch-grid shape."""

    patches: np.ndarray  # (l, c)
    spatial_shape: tuple  # (rows, cols) with rows*cols == l

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=np.float64)
        rows, cols = self.spatial_shape
        if patches.ndim != 2 or patches.shape[0] != rows * cols:
            raise ValueError(
                f"patches shape {patches.shape} inconsistent with grid {self.spatial_shape}"
            )
        if not np.all(np.isfinite(patches)):
            raise ValueError("latent entries must be finite")
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "spatial_shape", (int(rows), int(cols)))

    @property
    def l(self) -> int:
        return self.patches.shape[0]

    @property
    def c(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True)
class SymbolStreams:
    """Zero-padded per-stream complex symbol matrix, one column per stream."""

    data: np.ndarray  # (max_len, n_s) complex
    lengths: tuple  # true symbol count per stream, before padding
    power_scale: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 2:
            raise ValueError(f"stream matrix must be 2-D, got shape {data.shape}")
        lengths = tuple(int(v) for v in self.lengths)
        if len(lengths) != data.shape[1] or any(
            not 0 <= v <= data.shape[0] for v in lengths
        ):
            raise ValueError("stream lengths inconsistent with the data matrix")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "lengths", lengths)


# ---------------------------------------------------------------------------
# Parameter storage


def _mlp_dims(config: CodecConfig, name: str) -> list[int]:
    c = config
    return {
        "ga": [c.patch_dim, c.hidden, c.hidden, c.latent_dim],
        "gs": [c.latent_dim, c.hidden, c.hidden, c.patch_dim],
        "ha": [c.latent_dim, c.hidden, c.hidden, c.hyper_dim],
        "hs": [c.hyper_dim, c.hidden, c.hidden, 2 * c.latent_dim],
        "fe": [c.latent_dim + 2 * c.token_dim, c.trunk_hidden, c.trunk_hidden],
        "fd": [c.unify_dim + 2 * c.token_dim, c.trunk_hidden, c.trunk_hidden, c.latent_dim],
    }[name]


def _param_shapes(config: CodecConfig) -> dict:
    shapes: dict[str, tuple] = {}

    def mlp(prefix, dims):
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            shapes[f"{prefix}.w{i}"] = (a, b)
            shapes[f"{prefix}.b{i}"] = (b,)

    mlp("ga", _mlp_dims(config, "ga"))
    mlp("gs", _mlp_dims(config, "gs"))
    mlp("ha", _mlp_dims(config, "ha"))
    mlp("hs", _mlp_dims(config, "hs"))
    mlp("fe", _mlp_dims(config, "fe"))
    for lv in config.rate_levels:
        shapes[f"fe.head{lv}.w"] = (config.trunk_hidden, 2 * lv)
        shapes[f"fe.head{lv}.b"] = (2 * lv,)
    for lv in config.rate_levels:
        shapes[f"fd.head{lv}.w"] = (2 * lv, config.unify_dim)
        shapes[f"fd.head{lv}.b"] = (config.unify_dim,)
    mlp("fd", _mlp_dims(config, "fd"))
    shapes["rate_tokens"] = (len(config.rate_levels), config.token_dim)
    shapes["csi_tokens"] = (len(config.cqi_levels), config.token_dim)
    shapes["prior.loc"] = (config.hyper_dim,)
    shapes["prior.raw_scale"] = (config.hyper_dim,)
    # Constant sigma fallback when no side information is transmitted.
    shapes["fallback.raw_sigma"] = (config.latent_dim,)
    return shapes


class ToyCodecParams:
    """All trainable weights, flat-indexable as one float64 vector.

    Named arrays are views into ``flat``; mutating either side is visible to
    the other, which is what the finite-difference checks rely on.
    """

    def __init__(self, config: CodecConfig, flat: np.ndarray | None = None):
        self.config = config
        self._shapes = _param_shapes(config)
        sizes = {k: int(np.prod(s)) for k, s in self._shapes.items()}
        total = sum(sizes.values())
        if flat is None:
            flat = np.zeros(total, dtype=np.float64)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (total,):
                raise ValueError(f"flat vector must have {total} entries, got {flat.shape}")
        self.flat = flat
        self._views = {}
        offset = 0
        for name, shape in self._shapes.items():
            self._views[name] = self.flat[offset : offset + sizes[name]].reshape(shape)
            offset += sizes[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        view = self._views[name]
        if value is not view:
            view[...] = value

    @property
    def size(self) -> int:
        return self.flat.size

    def names(self):
        return self._shapes.keys()

    def zeros_like(self) -> "ToyCodecParams":
        return ToyCodecParams(self.config)

    def copy(self) -> "ToyCodecParams":
        return ToyCodecParams(self.config, self.flat.copy())

    @classmethod
    def init_random(cls, config: CodecConfig, seed=0) -> "ToyCodecParams":
        rng = np.random.default_rng(seed)
        params = cls(config)
        for name, shape in params._shapes.items():
            view = params._views[name]
            last = name.split(".")[-1]
            is_weight = last[0] == "w" and (last == "w" or last[1:].isdigit())
            is_bias = last[0] == "b" and (last == "b" or last[1:].isdigit())
            if is_weight:
                view[...] = rng.standard_normal(shape) / np.sqrt(shape[0])
            elif is_bias or name == "prior.loc":
                pass  # stay zero
            elif name in ("rate_tokens", "csi_tokens"):
                view[...] = 0.5 * rng.standard_normal(shape)
            elif name in ("prior.raw_scale", "fallback.raw_sigma"):
                view[...] = _softplus_inv(1.0)
            else:  # pragma: no cover - layout and init must stay in sync
                raise AssertionError(f"no initializer for parameter {name}")
        params["ga.w2"] *= LATENT_INIT_GAIN
        params["ha.w2"] *= LATENT_INIT_GAIN
        return params

    def prior_scale(self) -> np.ndarray:
        return _softplus(self["prior.raw_scale"]) + 1e-6

    def fallback_sigma(self) -> np.ndarray:
        return _softplus(self["fallback.raw_sigma"]) + self.config.sigma_min


# ---------------------------------------------------------------------------
# Generic MLP forward/backward


def mlp_forward(params, prefix: str, x: np.ndarray, n_layers: int, act_last: bool):
    """Dense stack with tanh hidden activations; returns (out, cache)."""
    cache = []
    h = x
    for i in range(n_layers):
        pre = h @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"]
        if i < n_layers - 1 or act_last:
            post = np.tanh(pre)
            cache.append((h, post))
            h = post
        else:
            cache.append((h, None))
            h = pre
    return h, cache


def mlp_backward(params, prefix: str, cache, g: np.ndarray, grads) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; return input gradient."""
    for i in reversed(range(len(cache))):
        x_in, post = cache[i]
        if post is not None:
            g = g * (1.0 - post * post)
        grads[f"{prefix}.w{i}"] += x_in.T @ g
        grads[f"{prefix}.b{i}"] += g.sum(axis=0)
        g = g @ params[f"{prefix}.w{i}"].T
    return g


def _n_layers(config: CodecConfig, prefix: str) -> int:
    return len(_mlp_dims(config, prefix)) - 1


# ---------------------------------------------------------------------------
# Patch handling


def extract_patches(x: np.ndarray, patch_size: int):
    """Split an (h, w, ch) image into non-overlapping patches, row-major.

    Returns ``(patches, grid)`` with patches of shape (l, p*p*ch).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"source must be (h, w, ch), got shape {x.shape}")
    h, w, ch = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image dims {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    blocks = x.reshape(rows, p, cols, p, ch).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(rows * cols, p * p * ch), (rows, cols)


def assemble_patches(patches: np.ndarray, grid, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`extract_patches`."""
    rows, cols = grid
    p = patch_size
    blocks = patches.reshape(rows, cols, p, p, channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(rows * p, cols * p, channels)


# ---------------------------------------------------------------------------
# Analysis / synthesis


def analyze_fwd(x: np.ndarray, params: ToyCodecParams):
    cfg = params.config
    patches, grid = extract_patches(x, cfg.patch_size)
    y, cache = mlp_forward(params, "ga", patches, _n_layers(cfg, "ga"), act_last=False)
    return LatentTensor(patches=y, spatial_shape=grid), cache


def analyze(x: np.ndarray, params: ToyCodecParams) -> LatentTensor:
    """Analysis transform: pixel patches to latent embeddings."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("source tensor must be finite")
    lat, _ = analyze_fwd(x, params)
    return lat


def analyze_bwd(g_y: np.ndarray, cache, params, grads) -> None:
    mlp_backward(params, "ga", cache, g_y, grads)


def synthesize_fwd(y_hat: np.ndarray, grid, params: ToyCodecParams):
    cfg = params.config
    out, cache = mlp_forward(params, "gs", y_hat, _n_layers(cfg, "gs"), act_last=False)
    x_hat = assemble_patches(out, grid, cfg.patch_size, cfg.channels)
    return x_hat, cache


def synthesize(y_hat: LatentTensor, params: ToyCodecParams, clamp: bool = True) -> np.ndarray:
    """Synthesis transform; clamps to [0, 1] at evaluation time."""
    cfg = params.config
    if y_hat.c != cfg.latent_dim:
        raise ValueError(f"latent dim {y_hat.c} != configured {cfg.latent_dim}")
    x_hat, _ = synthesize_fwd(y_hat.patches, y_hat.spatial_shape, params)
    return np.clip(x_hat, 0.0, 1.0) if clamp else x_hat


def synthesize_bwd(g_xhat: np.ndarray, cache, params, grads) -> np.ndarray:
    cfg = params.config
    g_patches, _ = extract_patches(g_xhat, cfg.patch_size)
    return mlp_backward(params, "gs", cache, g_patches, grads)


# ---------------------------------------------------------------------------
# Hyperprior path


def hyper_encode_fwd(y: np.ndarray, params: ToyCodecParams):
    return mlp_forward(params, "ha", y, _n_layers(params.config, "ha"), act_last=False)


def hyper_encode(y: LatentTensor, params: ToyCodecParams) -> np.ndarray:
    """Hyper encoder: one c_z-vector per patch, shape (l, c_z)."""
    z, _ = hyper_encode_fwd(y.patches, params)
    return z


def hyper_encode_bwd(g_z, cache, params, grads) -> np.ndarray:
    return mlp_backward(params, "ha", cache, g_z, grads)


def hyper_decode_fwd(z_arr: np.ndarray, params: ToyCodecParams):
    cfg = params.config
    out, cache = mlp_forward(params, "hs", z_arr, _n_layers(cfg, "hs"), act_last=False)
    mu = out[:, : cfg.latent_dim]
    raw = out[:, cfg.latent_dim :]
    sigma = _softplus(raw) + cfg.sigma_min
    return mu, sigma, (cache, raw)


def hyper_decode(z_bar: np.ndarray, params: ToyCodecParams):
    """Hyper decoder: (mu, sigma) per latent element from (quantized) z."""
    z_arr = np.asarray(z_bar, dtype=np.float64)
    if z_arr.ndim != 2 or z_arr.shape[1] != params.config.hyper_dim:
        raise ValueError(f"z must be (l, {params.config.hyper_dim}), got {z_arr.shape}")
    mu, sigma, _ = hyper_decode_fwd(z_arr, params)
    return GaussianParams(mu=mu, sigma=sigma)


def hyper_decode_bwd(g_mu, g_sigma, fwd_state, params, grads) -> np.ndarray:
    cache, raw = fwd_state
    g_out = np.concatenate([g_mu, g_sigma * expit(raw)], axis=1)
    return mlp_backward(params, "hs", cache, g_out, grads)


# ---------------------------------------------------------------------------
# JSCC encoder / decoder


def _encoder_input(y, level_idx, cqi_idx, params):
    return np.concatenate(
        [y, params["rate_tokens"][level_idx], params["csi_tokens"][cqi_idx]], axis=1
    )


def jscc_encode_batch(y: np.ndarray, level_idx: np.ndarray, cqi_idx: np.ndarray, params):
    """Encode every patch at its assigned level; returns per-patch real vectors.

    ``level_idx`` and ``cqi_idx`` index the rate/CSI token tables.  Output i
    has length ``2 * levels[level_idx[i]]``.
    """
    cfg = params.config
    feat, trunk_cache = mlp_forward(
        params, "fe", _encoder_input(y, level_idx, cqi_idx, params),
        _n_layers(cfg, "fe"), act_last=True,
    )
    outs = [None] * y.shape[0]
    groups = {}
    for i, li in enumerate(level_idx):
        groups.setdefault(int(li), []).append(i)
    for li, members in groups.items():
        lv = cfg.rate_levels[li]
        head = feat[members] @ params[f"fe.head{lv}.w"] + params[f"fe.head{lv}.b"]
        for row, i in enumerate(members):
            outs[i] = head[row]
    cache = {"trunk": trunk_cache, "feat": feat, "groups": groups,
             "level_idx": np.asarray(level_idx), "cqi_idx": np.asarray(cqi_idx)}
    return outs, cache


def jscc_encode_batch_bwd(g_outs, cache, params, grads):
    """Backward of :func:`jscc_encode_batch`; returns gradient w.r.t. ``y``."""
    cfg = params.config
    feat = cache["feat"]
    g_feat = np.zeros_like(feat)
    for li, members in cache["groups"].items():
        lv = cfg.rate_levels[li]
        g_head = np.stack([g_outs[i] for i in members])
        grads[f"fe.head{lv}.w"] += feat[members].T @ g_head
        grads[f"fe.head{lv}.b"] += g_head.sum(axis=0)
        g_feat[members] += g_head @ params[f"fe.head{lv}.w"].T
    g_inp = mlp_backward(params, "fe", cache["trunk"], g_feat, grads)
    c, d = cfg.latent_dim, cfg.token_dim
    g_y = g_inp[:, :c]
    np.add.at(grads["rate_tokens"], cache["level_idx"], g_inp[:, c : c + d])
    np.add.at(grads["csi_tokens"], cache["cqi_idx"], g_inp[:, c + d :])
    return g_y


def jscc_encode(
    y_i: np.ndarray,
    rate_token_index: int,
    csi_token_index: int,
    target_dims: int,
    params: ToyCodecParams,
) -> np.ndarray:
    """Encode one patch to ``2 * target_dims`` reals (= ``target_dims`` symbols)."""
    cfg = params.config
    if target_dims not in cfg.rate_levels:
        raise ValueError(f"{target_dims} is not a configured quantizer level")
    if cfg.rate_levels[rate_token_index] != target_dims:
        raise ValueError("rate token index and target_dims disagree")
    outs, _ = jscc_encode_batch(
        np.asarray(y_i, dtype=np.float64)[None, :],
        np.array([rate_token_index]),
        np.array([csi_token_index]),
        params,
    )
    return outs[0]


def jscc_decode_batch(w_reals: list, level_idx: np.ndarray, cqi_idx: np.ndarray, params):
    """Decode per-patch real symbol vectors back to latent estimates (l, c)."""
    cfg = params.config
    l = len(w_reals)
    unified = np.zeros((l, cfg.unify_dim))
    groups = {}
    for i, li in enumerate(level_idx):
        groups.setdefault(int(li), []).append(i)
    head_inputs = {}
    for li, members in groups.items():
        lv = cfg.rate_levels[li]
        w_mat = np.stack([w_reals[i] for i in members])
        head_inputs[li] = w_mat
        unified[members] = w_mat @ params[f"fd.head{lv}.w"] + params[f"fd.head{lv}.b"]
    inp = np.concatenate(
        [unified, params["rate_tokens"][level_idx], params["csi_tokens"][cqi_idx]], axis=1
    )
    y_hat, trunk_cache = mlp_forward(params, "fd", inp, _n_layers(cfg, "fd"), act_last=False)
    cache = {"trunk": trunk_cache, "groups": groups, "head_inputs": head_inputs,
             "level_idx": np.asarray(level_idx), "cqi_idx": np.asarray(cqi_idx)}
    return y_hat, cache


def jscc_decode_batch_bwd(g_yhat, cache, params, grads):
    """Backward of :func:`jscc_decode_batch`; returns per-patch symbol gradients."""
    cfg = params.config
    g_inp = mlp_backward(params, "fd", cache["trunk"], g_yhat, grads)
    u, d = cfg.unify_dim, cfg.token_dim
    g_unified = g_inp[:, :u]
    np.add.at(grads["rate_tokens"], cache["level_idx"], g_inp[:, u : u + d])
    np.add.at(grads["csi_tokens"], cache["cqi_idx"], g_inp[:, u + d :])
    g_w = [None] * g_yhat.shape[0]
    for li, members in cache["groups"].items():
        lv = cfg.rate_levels[li]
        w_mat = cache["head_inputs"][li]
        g_u = g_unified[members]
        grads[f"fd.head{lv}.w"] += w_mat.T @ g_u
        grads[f"fd.head{lv}.b"] += g_u.sum(axis=0)
        g_w_mat = g_u @ params[f"fd.head{lv}.w"].T
        for row, i in enumerate(members):
            g_w[i] = g_w_mat[row]
    return g_w


def jscc_decode(
    w_hat_i: np.ndarray,
    rate_token_index: int,
    csi_token_index: int,
    params: ToyCodecParams,
) -> np.ndarray:
    """Decode one patch's complex symbols back to a latent estimate."""
    cfg = params.config
    w_hat_i = np.asarray(w_hat_i)
    if np.iscomplexobj(w_hat_i):
        w_reals = complex_to_reals(w_hat_i)
    else:
        w_reals = w_hat_i.astype(np.float64)
    n_sym = w_reals.size // 2
    if w_reals.size % 2 or n_sym not in cfg.rate_levels:
        raise ValueError(f"symbol count {w_reals.size / 2} is not a configured level")
    if cfg.rate_levels[rate_token_index] != n_sym:
        raise ValueError("rate token index and symbol count disagree")
    y_hat, _ = jscc_decode_batch(
        [w_reals], np.array([rate_token_index]), np.array([csi_token_index]), params
    )
    return y_hat[0]


# ---------------------------------------------------------------------------
# Real/complex packing and power normalization


def reals_to_complex(w: np.ndarray) -> np.ndarray:
    """Pair consecutive reals into complex symbols: (re0, im0, re1, im1, ...)."""
    w = np.asarray(w, dtype=np.float64)
    if w.size % 2:
        raise ValueError("need an even number of reals")
    return w[0::2] + 1j * w[1::2]


def complex_to_reals(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.complex128)
    out = np.empty(2 * c.size, dtype=np.float64)
    out[0::2] = c.real
    out[1::2] = c.imag
    return out


def power_normalize(streams: SymbolStreams) -> SymbolStreams:
    """Scale all streams by one global factor so mean per-symbol power is 1.

    The factor is recorded in ``power_scale`` (communicated out-of-band, not
    charged to bandwidth); multiplying the data by it restores the input.
    """
    data = streams.data
    if data.size == 0:
        raise ValueError("cannot normalize an empty stream matrix")
    mean_power = np.mean(np.abs(data) ** 2)
    if mean_power == 0:
        raise ValueError("cannot normalize all-zero streams")
    scale = np.sqrt(mean_power)
    return SymbolStreams(
        data=data / scale,
        lengths=streams.lengths,
        power_scale=streams.power_scale * scale,
    )


def pack_streams(symbols: list, alloc):
    """Lay per-patch complex symbols onto streams, zero-padded to the max load.

    Patches occupy their stream in ascending patch-index order.  Returns
    ``(SymbolStreams, offsets)`` where ``offsets[i]`` is patch i's start row.
    """
    n_s = alloc.n_streams
    loads = alloc.stream_loads()
    max_len = int(loads.max()) if loads.size else 0
    data = np.zeros((max_len, n_s), dtype=np.complex128)
    offsets = np.zeros(len(symbols), dtype=np.intp)
    cursor = np.zeros(n_s, dtype=np.intp)
    for i, w in enumerate(symbols):
        t = int(alloc.stream[i])
        k = w.size
        if k != int(alloc.quantized[i]):
            raise ValueError(f"patch {i} has {k} symbols, allocation says {alloc.quantized[i]}")
        offsets[i] = cursor[t]
        data[cursor[t] : cursor[t] + k, t] = w
        cursor[t] += k
    return SymbolStreams(data=data, lengths=tuple(int(v) for v in loads)), offsets


def unpack_streams(detected: np.ndarray, alloc, offsets) -> list:
    """Inverse of :func:`pack_streams` applied to the detected symbol matrix."""
    out = []
    for i in range(len(offsets)):
        t = int(alloc.stream[i])
        k = int(alloc.quantized[i])
        o = int(offsets[i])
        out.append(detected[o : o + k, t])
    return out


# ---------------------------------------------------------------------------
# Checkpoint serialization


def save_params(params: ToyCodecParams, path) -> None:
    """JSON header line + little-endian float32 payload in flat-index order."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": dataclasses.asdict(params.config),
        "param_count": int(params.size),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(params.flat.astype("<f4").tobytes())


def load_params(path) -> ToyCodecParams:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {header.get('format_version')}")
    cfg_dict = dict(header["config"])
    for key in ("rate_levels", "cqi_levels"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = CodecConfig(**cfg_dict)
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if flat.size != header["param_count"]:
        raise ValueError(
            f"checkpoint payload has {flat.size} floats, header says {header['param_count']}"
        )
    return ToyCodecParams(config, flat)
