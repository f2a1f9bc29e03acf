"""Masked conv + GRU embedding network with exact reverse-mode gradients.

Pipeline per window::

    standardize valid rows -> [conv(same) -> ReLU -> mask -> dropout -> maxpool] x blocks
    -> GRU over valid steps -> masked GAP -> FC1 + ReLU -> FC2 -> L2 normalize

An optional sigmoid head (``head.w``, ``head.b``) sits on top of the
embedding during binary classification training.

All arrays are float64 and batched along the first axis.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .signal import DEFAULT_T_MAX, N_CHANNELS, Window, stack_windows

FORMAT_VERSION = 1
FC_KEYS = ("fc1.w", "fc1.b", "fc2.w", "fc2.b")
HEAD_KEYS = ("head.w", "head.b")


class ParamsFormatError(ValueError):
    """Weight file is unreadable or does not match the expected config."""


class InvalidInputError(ValueError):
    """Window too short to survive the pooling stages."""


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = N_CHANNELS
    conv_blocks: tuple[tuple[int, int], ...] = ((32, 5), (64, 3))
    dropout_p: float = 0.2
    pool_size: int = 2
    gru_hidden: int = 64
    fc_dims: tuple[int, int] = (64, 32)
    t_max: int = DEFAULT_T_MAX

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(tuple(int(v) for v in b) for b in self.conv_blocks))
        object.__setattr__(self, "fc_dims", tuple(int(v) for v in self.fc_dims))
        if len(self.fc_dims) != 2:
            raise ValueError("fc_dims must have exactly two entries")
        if not self.conv_blocks:
            raise ValueError("at least one conv block is required")
        if any(k % 2 == 0 for _, k in self.conv_blocks):
            raise ValueError("conv kernel sizes must be odd for same padding")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.pool_size < 1:
            raise ValueError("pool_size must be positive")

    @property
    def embedding_dim(self) -> int:
        return self.fc_dims[1]

    @property
    def min_valid_len(self) -> int:
        return self.pool_size ** len(self.conv_blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        d["fc_dims"] = list(self.fc_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "conv_blocks": tuple(tuple(b) for b in d["conv_blocks"]),
                      "fc_dims": tuple(d["fc_dims"])})

    def param_shapes(self, head: bool = False) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = self.input_channels
        for i, (filters, k) in enumerate(self.conv_blocks):
            shapes[f"conv{i}.w"] = (k, cin, filters)
            shapes[f"conv{i}.b"] = (filters,)
            cin = filters
        h = self.gru_hidden
        for g in "zrh":
            shapes[f"gru.W{g}"] = (cin, h)
            shapes[f"gru.U{g}"] = (h, h)
            shapes[f"gru.b{g}"] = (h,)
        d1, d2 = self.fc_dims
        shapes.update({"fc1.w": (h, d1), "fc1.b": (d1,), "fc2.w": (d1, d2), "fc2.b": (d2,)})
        if head:
            shapes.update({"head.w": (d2,), "head.b": (1,)})
        return shapes

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_CHANNELS))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(N_CHANNELS))

    @property
    def has_head(self) -> bool:
        return "head.w" in self.weights

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                           self.norm_mean.copy(), self.norm_std.copy())

    def check(self) -> None:
        expected = self.config.param_shapes(self.has_head)
        found = {k: v.shape for k, v in self.weights.items()}
        if expected != found:
            raise ParamsFormatError(f"parameter shapes {found} do not match config {expected}")
        for k, v in self.weights.items():
            if not np.all(np.isfinite(v)):
                raise ParamsFormatError(f"non-finite values in {k}")


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(config: ModelConfig, seed: int = 0, head: bool = True) -> ModelParams:
    """Uniform fan-in/fan-out initialization; biases start at zero except ``fc2.b``.

    A nonzero ``fc2.b`` keeps the embedding normalizable when every FC1 unit is off.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for key, shape in config.param_shapes(head).items():
        if key == "fc2.b":
            weights[key] = _glorot(rng, shape, *config.fc_dims)
        elif key.endswith(".b") or key.startswith("gru.b"):
            weights[key] = np.zeros(shape)
        elif key.startswith("conv"):
            k, cin, cout = shape
            weights[key] = _glorot(rng, shape, k * cin, k * cout)
        elif key == "head.w":
            weights[key] = _glorot(rng, shape, shape[0], 1)
        else:
            weights[key] = _glorot(rng, shape, shape[0], shape[1])
    return ModelParams(config, weights)


def attach_head(params: ModelParams, seed: int = 0) -> ModelParams:
    out = params.copy()
    rng = np.random.default_rng(seed)
    d2 = params.config.embedding_dim
    out.weights["head.w"] = _glorot(rng, (d2,), d2, 1)
    out.weights["head.b"] = np.zeros(1)
    return out


def detach_head(params: ModelParams) -> ModelParams:
    out = params.copy()
    for k in HEAD_KEYS:
        out.weights.pop(k, None)
    return out


# -- forward -----------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class _BlockCache:
    cols: np.ndarray            # [B, T, k*Cin] im2col of the block input
    pre: np.ndarray             # conv output before ReLU
    mask: np.ndarray            # [B, T] validity at conv resolution
    drop: np.ndarray | None     # inverted-dropout multipliers
    argmax: np.ndarray          # [B, T', C] winning offset within each pool group
    pooled_mask: np.ndarray     # [B, T']
    in_len: int


@dataclass
class ForwardTrace:
    params: ModelParams
    lens: list[np.ndarray]
    blocks: list[_BlockCache]
    gru_x: np.ndarray
    gru_h: np.ndarray           # [B, S+1, H] hidden states, index 0 is h0
    gru_z: np.ndarray
    gru_r: np.ndarray
    gru_hh: np.ndarray
    gru_mask: np.ndarray        # [B, S]
    gap: np.ndarray
    fc1_pre: np.ndarray
    fc1_out: np.ndarray
    fc2_out: np.ndarray
    norm: np.ndarray
    embedding: np.ndarray


def _seq_mask(lens: np.ndarray, t: int) -> np.ndarray:
    return (np.arange(t)[None, :] < lens[:, None]).astype(np.float64)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    # [B, T, C, k] -> [B, T, k, C] -> [B, T, k*C]
    cols = sliding_window_view(xp, k, axis=1).transpose(0, 1, 3, 2)
    return cols.reshape(x.shape[0], x.shape[1], k * x.shape[2])


def forward_batch(params: ModelParams, x: np.ndarray, lens: np.ndarray,
                  train: bool = False, rng_seed: int | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Embed a batch of padded windows ``x [B, T, C]`` with valid lengths ``lens``."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    lens = np.asarray(lens, dtype=np.int64)
    if x.ndim != 3 or x.shape[2] != cfg.input_channels:
        raise InvalidInputError(f"expected [B, T, {cfg.input_channels}] input, got {x.shape}")
    if np.any(lens < cfg.min_valid_len) or np.any(lens > x.shape[1]):
        raise InvalidInputError(
            f"valid lengths must lie in [{cfg.min_valid_len}, {x.shape[1]}], got {lens.min()}..{lens.max()}")
    rng = np.random.default_rng(rng_seed) if train else None
    p = cfg.pool_size
    w = params.weights

    mask = _seq_mask(lens, x.shape[1])
    h = (x - params.norm_mean) / params.norm_std * mask[:, :, None]
    blocks, all_lens = [], [lens]
    cur_lens = lens
    for i, (_, k) in enumerate(cfg.conv_blocks):
        B, T, _ = h.shape
        cols = _im2col(h, k)
        kw = w[f"conv{i}.w"]
        pre = (cols.reshape(B * T, -1) @ kw.reshape(-1, kw.shape[2])).reshape(B, T, -1) + w[f"conv{i}.b"]
        out = np.maximum(pre, 0.0) * mask[:, :, None]
        drop = None
        if train and cfg.dropout_p > 0:
            drop = (rng.random(out.shape) >= cfg.dropout_p) / (1.0 - cfg.dropout_p)
            out = out * drop
        tp = -(-T // p)
        buf = np.full((B, tp * p, out.shape[2]), -np.inf)
        buf[:, :T] = np.where(mask[:, :, None] > 0, out, -np.inf)
        groups = buf.reshape(B, tp, p, -1)
        arg = groups.argmax(axis=2)
        pooled = np.take_along_axis(groups, arg[:, :, None, :], axis=2)[:, :, 0, :]
        cur_lens = -(-cur_lens // p)
        pmask = _seq_mask(cur_lens, tp)
        pooled = np.where(pmask[:, :, None] > 0, pooled, 0.0)
        blocks.append(_BlockCache(cols, pre, mask, drop, arg, pmask, T))
        all_lens.append(cur_lens)
        h, mask = pooled, pmask

    # GRU; steps past max valid length never influence anything
    B = h.shape[0]
    S = int(cur_lens.max())
    H = cfg.gru_hidden
    gx = np.ascontiguousarray(h[:, :S])
    gm = mask[:, :S]
    gflat = gx.reshape(B * S, -1)
    xz = (gflat @ w["gru.Wz"]).reshape(B, S, H) + w["gru.bz"]
    xr = (gflat @ w["gru.Wr"]).reshape(B, S, H) + w["gru.br"]
    xh = (gflat @ w["gru.Wh"]).reshape(B, S, H) + w["gru.bh"]
    hs = np.zeros((B, S + 1, H))
    zs = np.empty((B, S, H))
    rs = np.empty((B, S, H))
    hhs = np.empty((B, S, H))
    hprev = hs[:, 0]
    for t in range(S):
        z = sigmoid(xz[:, t] + hprev @ w["gru.Uz"])
        r = sigmoid(xr[:, t] + hprev @ w["gru.Ur"])
        hh = np.tanh(xh[:, t] + (r * hprev) @ w["gru.Uh"])
        hn = hprev + z * (hh - hprev)
        m = gm[:, t:t + 1]
        hprev = m * hn + (1.0 - m) * hprev
        hs[:, t + 1] = hprev
        zs[:, t], rs[:, t], hhs[:, t] = z, r, hh

    gap = (hs[:, 1:] * gm[:, :, None]).sum(axis=1) / cur_lens[:, None]
    fc1_pre = gap @ w["fc1.w"] + w["fc1.b"]
    fc1_out = np.maximum(fc1_pre, 0.0)
    fc2_out = fc1_out @ w["fc2.w"] + w["fc2.b"]
    norm = np.sqrt((fc2_out**2).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, 1e-12)
    emb = fc2_out / norm
    trace = ForwardTrace(params, all_lens, blocks, gx, hs, zs, rs, hhs, gm, gap,
                         fc1_pre, fc1_out, fc2_out, norm, emb)
    return emb, trace


def forward(params: ModelParams, window: Window, train: bool = False,
            rng_seed: int | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Embed a single window; returns a unit vector of the embedding dimension."""
    emb, trace = forward_batch(params, window.data[None], np.array([window.valid_len]), train, rng_seed)
    return emb[0], trace


def embed_windows(params: ModelParams, windows: Sequence[Window], batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings for many windows, shape [N, d2]."""
    x, lens, _ = stack_windows(windows)
    return embed_arrays(params, x, lens, batch_size)


def embed_arrays(params: ModelParams, x: np.ndarray, lens: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward_batch(params, x[i:i + batch_size], lens[i:i + batch_size])[0]
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def head_forward(embedding: np.ndarray, params: ModelParams) -> np.ndarray:
    """Peak probability ``sigmoid(w . e + b)``; works on one vector or a batch."""
    return sigmoid(np.asarray(embedding) @ params.weights["head.w"] + params.weights["head.b"][0])


# -- backward ----------------------------------------------------------------

def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.weights.items()}


def backward(trace: ForwardTrace, upstream: np.ndarray,
             trainable: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given ``upstream = dLoss/dEmbedding`` of shape [B, d2].

    Head gradients are not produced here; see ``head_backward``. Parameters
    outside ``trainable`` (default: all) get exact zeros, and layers below the
    lowest trainable one are skipped entirely.
    """
    params = trace.params
    w = params.weights
    upstream = np.asarray(upstream, dtype=np.float64).reshape(trace.embedding.shape)
    grads = zero_grads(params)
    keys = set(w) if trainable is None else set(trainable)
    unknown = keys - set(w)
    if unknown:
        raise KeyError(f"unknown parameters in trainable set: {sorted(unknown)}")
    if not np.all(np.isfinite(upstream)):
        raise FloatingPointError("non-finite upstream gradient")

    y = trace.embedding
    de = (upstream - y * (y * upstream).sum(axis=1, keepdims=True)) / trace.norm
    grads["fc2.w"] = trace.fc1_out.T @ de
    grads["fc2.b"] = de.sum(axis=0)
    da1 = (de @ w["fc2.w"].T) * (trace.fc1_pre > 0)
    grads["fc1.w"] = trace.gap.T @ da1
    grads["fc1.b"] = da1.sum(axis=0)
    below = {k for k in keys if k.startswith(("gru.", "conv"))}
    if not below:
        return _masked(grads, keys)

    dgap = da1 @ w["fc1.w"].T
    lens = trace.lens[-1]
    gm = trace.gru_mask
    dH = gm[:, :, None] * (dgap / lens[:, None])[:, None, :]
    B, S, H = trace.gru_z.shape
    dxz = np.empty((B, S, H))
    dxr = np.empty((B, S, H))
    dxh = np.empty((B, S, H))
    dUz = np.zeros((H, H))
    dUr = np.zeros((H, H))
    dUh = np.zeros((H, H))
    dh = np.zeros((B, H))
    for t in range(S - 1, -1, -1):
        hprev = trace.gru_h[:, t]
        z, r, hh = trace.gru_z[:, t], trace.gru_r[:, t], trace.gru_hh[:, t]
        m = gm[:, t:t + 1]
        dh = dh + dH[:, t]
        dhn = m * dh
        dh_prev = (1.0 - m) * dh + dhn * (1.0 - z)
        dz = dhn * (hh - hprev)
        dah = dhn * z * (1.0 - hh * hh)
        dUh += (r * hprev).T @ dah
        drh = dah @ w["gru.Uh"].T
        dar = drh * hprev * r * (1.0 - r)
        dh_prev += drh * r
        daz = dz * z * (1.0 - z)
        dUr += hprev.T @ dar
        dUz += hprev.T @ daz
        dh_prev += dar @ w["gru.Ur"].T + daz @ w["gru.Uz"].T
        dxz[:, t], dxr[:, t], dxh[:, t] = daz, dar, dah
        dh = dh_prev
    gx = trace.gru_x.reshape(B * S, -1)
    for g, dxg, dU in (("z", dxz, dUz), ("r", dxr, dUr), ("h", dxh, dUh)):
        flat = dxg.reshape(B * S, H)
        grads[f"gru.W{g}"] = gx.T @ flat
        grads[f"gru.b{g}"] = flat.sum(axis=0)
        grads[f"gru.U{g}"] = dU
    conv_keys = {k for k in keys if k.startswith("conv")}
    if not conv_keys:
        return _masked(grads, keys)
    lowest = min(int(k[4:k.index(".")]) for k in conv_keys)

    dx = (dxz.reshape(B * S, H) @ w["gru.Wz"].T + dxr.reshape(B * S, H) @ w["gru.Wr"].T
          + dxh.reshape(B * S, H) @ w["gru.Wh"].T).reshape(B, S, -1)
    cfg = params.config
    p = cfg.pool_size
    for i in range(len(cfg.conv_blocks) - 1, lowest - 1, -1):
        blk = trace.blocks[i]
        Bq, tp = blk.pooled_mask.shape
        dpool = np.zeros((Bq, tp, dx.shape[2]))
        dpool[:, :dx.shape[1]] = dx
        dpool *= blk.pooled_mask[:, :, None]
        groups = np.zeros((Bq, tp, p, dx.shape[2]))
        np.put_along_axis(groups, blk.argmax[:, :, None, :], dpool[:, :, None, :], axis=2)
        dout = groups.reshape(Bq, tp * p, -1)[:, :blk.in_len]
        if blk.drop is not None:
            dout = dout * blk.drop
        dpre = dout * blk.mask[:, :, None] * (blk.pre > 0)
        kw = w[f"conv{i}.w"]
        k, cin, cout = kw.shape
        flat = dpre.reshape(-1, cout)
        grads[f"conv{i}.w"] = (blk.cols.reshape(-1, k * cin).T @ flat).reshape(k, cin, cout)
        grads[f"conv{i}.b"] = flat.sum(axis=0)
        if i > lowest:
            dcols = (flat @ kw.reshape(k * cin, cout).T).reshape(Bq, blk.in_len, k, cin)
            pad = (k - 1) // 2
            dxp = np.zeros((Bq, blk.in_len + 2 * pad, cin))
            for j in range(k):
                dxp[:, j:j + blk.in_len] += dcols[:, :, j, :]
            dx = dxp[:, pad:pad + blk.in_len]
    return _masked(grads, keys)


def _masked(grads: dict[str, np.ndarray], keys: set[str]) -> dict[str, np.ndarray]:
    for k in grads:
        if k not in keys:
            grads[k] = np.zeros_like(grads[k])
    return grads


def head_backward(embedding: np.ndarray, params: ModelParams,
                  dlogit: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Head gradients and dLoss/dEmbedding given dLoss/dLogit for a batch."""
    dlogit = np.asarray(dlogit, dtype=np.float64)
    g = {"head.w": embedding.T @ dlogit, "head.b": np.array([dlogit.sum()])}
    return g, dlogit[:, None] * params.weights["head.w"][None, :]


# -- persistence -------------------------------------------------------------

def save_params(params: ModelParams, path: str | Path) -> None:
    """npz container: JSON header plus little-endian float64 arrays."""
    header = {"format_version": FORMAT_VERSION, "config": params.config.to_dict(),
              "fingerprint": params.config.fingerprint(), "head": params.has_head,
              "shapes": {k: list(v.shape) for k, v in params.weights.items()}}
    arrays = {f"w/{k}": v.astype("<f8") for k, v in params.weights.items()}
    arrays["norm_mean"] = params.norm_mean.astype("<f8")
    arrays["norm_std"] = params.norm_std.astype("<f8")
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_params(path: str | Path, expected: ModelConfig | None = None) -> ModelParams:
    try:
        with np.load(Path(path), allow_pickle=False) as npz:
            header = json.loads(str(npz["__header__"]))
            weights = {k[2:]: npz[k].astype(np.float64) for k in npz.files if k.startswith("w/")}
            mean, std = npz["norm_mean"].astype(np.float64), npz["norm_std"].astype(np.float64)
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
        raise ParamsFormatError(f"cannot read weight file {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ParamsFormatError(f"unsupported format version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    if config.fingerprint() != header.get("fingerprint"):
        raise ParamsFormatError("config fingerprint in header does not match its config")
    if expected is not None and expected != config:
        raise ParamsFormatError(
            f"config mismatch: expected shapes {expected.param_shapes(header['head'])}, "
            f"found {config.param_shapes(header['head'])}")
    params = ModelParams(config, weights, mean, std)
    params.check()
    return params
