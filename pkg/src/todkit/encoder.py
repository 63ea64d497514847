"""Bidirectional transformer encoder in float64 numpy with exact backprop.

Post-layer-norm ordering throughout: summed token/position/segment
embeddings are layer-normed, then each layer applies multi-head scaled
dot-product attention (padding keys masked to -inf before the softmax),
residual + layer norm, a GELU feed-forward block, residual + layer norm.
Dropout (attention weights and both sublayer outputs) is active only in
train mode and is generated from an explicit seed so that a forward pass
can be replayed exactly.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed like
``L0.attn.wq`` / ``emb.tok`` / ``L1.ln2.g`` so optimizers and checkpoints
can treat the model as a name -> tensor map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, kernels
from .mathutil import trunc_normal as _trunc_normal
from .tokenizer import TokenSequence

ParamDict = dict[str, np.ndarray]


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 4
    hidden: int = 128
    ffn_dim: int = 512
    vocab_size: int = 512
    max_positions: int = 128
    dropout: float = 0.1
    num_segments: int = 2
    ln_eps: float = 1e-12

    def __post_init__(self):
        for fld in ("num_layers", "num_heads", "hidden", "ffn_dim",
                    "vocab_size", "max_positions", "num_segments"):
            if getattr(self, fld) < 1:
                raise ValueError(f"{fld} must be >= 1")
        if self.hidden % self.num_heads != 0:
            raise ValueError(
                f"hidden {self.hidden} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads


@dataclass
class EncoderOutput:
    hidden_states: np.ndarray  # (L, hidden)
    cls: np.ndarray            # (hidden,) == hidden_states[0]


def init_params(cfg: EncoderConfig, seed: int) -> ParamDict:
    """Truncated-normal (std 0.02) weights, unit layer-norm scales, zero biases."""
    rng = np.random.default_rng(seed)
    h, f = cfg.hidden, cfg.ffn_dim
    p: ParamDict = {
        "emb.tok": _trunc_normal(rng, (cfg.vocab_size, h)),
        "emb.pos": _trunc_normal(rng, (cfg.max_positions, h)),
        "emb.seg": _trunc_normal(rng, (cfg.num_segments, h)),
        "emb.ln.g": np.ones(h),
        "emb.ln.b": np.zeros(h),
    }
    for i in range(cfg.num_layers):
        pre = f"L{i}"
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{name}"] = _trunc_normal(rng, (h, h))
        for name in ("bq", "bk", "bv", "bo"):
            p[f"{pre}.attn.{name}"] = np.zeros(h)
        p[f"{pre}.ln1.g"] = np.ones(h)
        p[f"{pre}.ln1.b"] = np.zeros(h)
        p[f"{pre}.ffn.w1"] = _trunc_normal(rng, (h, f))
        p[f"{pre}.ffn.b1"] = np.zeros(f)
        p[f"{pre}.ffn.w2"] = _trunc_normal(rng, (f, h))
        p[f"{pre}.ffn.b2"] = np.zeros(h)
        p[f"{pre}.ln2.g"] = np.ones(h)
        p[f"{pre}.ln2.b"] = np.zeros(h)
    return p


def zeros_like_params(params: ParamDict) -> ParamDict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Expected shape of every encoder tensor for a config."""
    h, f = cfg.hidden, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "emb.tok": (cfg.vocab_size, h),
        "emb.pos": (cfg.max_positions, h),
        "emb.seg": (cfg.num_segments, h),
        "emb.ln.g": (h,),
        "emb.ln.b": (h,),
    }
    for i in range(cfg.num_layers):
        pre = f"L{i}"
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{pre}.attn.{name}"] = (h, h)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"{pre}.attn.{name}"] = (h,)
        shapes[f"{pre}.ln1.g"] = shapes[f"{pre}.ln1.b"] = (h,)
        shapes[f"{pre}.ffn.w1"] = (h, f)
        shapes[f"{pre}.ffn.b1"] = (f,)
        shapes[f"{pre}.ffn.w2"] = (f, h)
        shapes[f"{pre}.ffn.b2"] = (h,)
        shapes[f"{pre}.ln2.g"] = shapes[f"{pre}.ln2.b"] = (h,)
    return shapes


def check_params(params: ParamDict, cfg: EncoderConfig) -> None:
    """Validate encoder tensor shapes and finiteness (heads are left alone)."""
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise ValueError(f"missing parameter tensor {name}")
        if params[name].shape != shape:
            raise ValueError(
                f"parameter {name} has shape {params[name].shape}, expected {shape}")
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} contains non-finite values")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _split_heads(x: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    b, l, _ = x.shape
    return x.reshape(b, l, cfg.num_heads, cfg.head_dim).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    b, nh, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, nh * dh)


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    # inverted dropout: surviving activations are pre-scaled by 1/(1-rate)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _ln_fwd(x3d, gain, bias, eps):
    b, l, h = x3d.shape
    y, mean, rstd = kernels.layer_norm_fwd(x3d.reshape(b * l, h), gain, bias, eps)
    return y.reshape(b, l, h), mean, rstd


def _ln_bwd(dy3d, x3d, gain, mean, rstd):
    b, l, h = x3d.shape
    dx, dg, db = kernels.layer_norm_bwd(
        dy3d.reshape(b * l, h), x3d.reshape(b * l, h), gain, mean, rstd)
    return dx.reshape(b, l, h), dg, db


def forward_batch(params: ParamDict, cfg: EncoderConfig, ids: np.ndarray,
                  attention_mask: np.ndarray, positions: np.ndarray | None = None,
                  segments: np.ndarray | None = None, train_mode: bool = False,
                  dropout_seed: int = 0, need_cache: bool = False):
    """Run the encoder on a padded batch.

    Returns ``(hidden, cache)`` with hidden shaped (B, L, hidden); the cache
    holds every intermediate needed by :func:`backward_batch` (including the
    realized dropout masks, keyed by ``dropout_seed``).
    """
    ids = np.asarray(ids, dtype=np.int64)
    attention_mask = np.asarray(attention_mask, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must be a (batch, length) array")
    b, l = ids.shape
    if l > cfg.max_positions:
        raise ValueError(f"sequence length {l} exceeds max_positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(
            f"token id out of range [0, {cfg.vocab_size}): {int(ids.min())}..{int(ids.max())}")
    if positions is None:
        positions = np.tile(np.arange(l, dtype=np.int64), (b, 1))
    if segments is None:
        segments = np.zeros((b, l), dtype=np.int64)

    rate = cfg.dropout if train_mode else 0.0
    rng = np.random.default_rng(dropout_seed) if rate > 0.0 else None

    emb = params["emb.tok"][ids] + params["emb.pos"][positions] + params["emb.seg"][segments]
    x, emb_mean, emb_rstd = _ln_fwd(emb, params["emb.ln.g"], params["emb.ln.b"], cfg.ln_eps)

    cache: dict = {
        "ids": ids, "positions": positions, "segments": segments,
        "mask": attention_mask, "emb": emb, "emb_mean": emb_mean,
        "emb_rstd": emb_rstd, "rate": rate, "layers": [],
    }
    scale = 1.0 / math.sqrt(cfg.head_dim)

    for i in range(cfg.num_layers):
        pre = f"L{i}"
        lc: dict = {"x_in": x}
        q = x @ params[f"{pre}.attn.wq"] + params[f"{pre}.attn.bq"]
        k = x @ params[f"{pre}.attn.wk"] + params[f"{pre}.attn.bk"]
        v = x @ params[f"{pre}.attn.wv"] + params[f"{pre}.attn.bv"]
        qh, kh, vh = (_split_heads(t, cfg) for t in (q, k, v))
        scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
        probs = kernels.masked_softmax(scores, attention_mask)
        if rate > 0.0:
            pmask = _dropout_mask(rng, probs.shape, rate)
            probs_used = probs * pmask
        else:
            pmask = None
            probs_used = probs
        ctx = np.matmul(probs_used, vh)
        ctx_m = _merge_heads(ctx, cfg)
        attn_out = ctx_m @ params[f"{pre}.attn.wo"] + params[f"{pre}.attn.bo"]
        if rate > 0.0:
            omask = _dropout_mask(rng, attn_out.shape, rate)
            attn_out = attn_out * omask
        else:
            omask = None
        res1 = x + attn_out
        x1, m1, r1 = _ln_fwd(res1, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"], cfg.ln_eps)

        ff_pre = x1 @ params[f"{pre}.ffn.w1"] + params[f"{pre}.ffn.b1"]
        ff_act = kernels.gelu_fwd(ff_pre)
        ffn_out = ff_act @ params[f"{pre}.ffn.w2"] + params[f"{pre}.ffn.b2"]
        if rate > 0.0:
            fmask = _dropout_mask(rng, ffn_out.shape, rate)
            ffn_out = ffn_out * fmask
        else:
            fmask = None
        res2 = x1 + ffn_out
        x2, m2, r2 = _ln_fwd(res2, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"], cfg.ln_eps)

        lc.update(qh=qh, kh=kh, vh=vh, probs=probs, pmask=pmask,
                  probs_used=probs_used, ctx_m=ctx_m, omask=omask, res1=res1,
                  x1=x1, m1=m1, r1=r1, ff_pre=ff_pre, ff_act=ff_act,
                  fmask=fmask, res2=res2, m2=m2, r2=r2)
        cache["layers"].append(lc)
        x = x2

    if need_cache:
        return x, cache
    return x, None


def backward_batch(params: ParamDict, cfg: EncoderConfig, cache: dict,
                   d_hidden: np.ndarray) -> ParamDict:
    """Exact gradients for every parameter tensor given upstream d_hidden."""
    grads = zeros_like_params(params)
    mask = cache["mask"]
    scale = 1.0 / math.sqrt(cfg.head_dim)
    dx = np.asarray(d_hidden, dtype=np.float64)

    for i in reversed(range(cfg.num_layers)):
        pre = f"L{i}"
        lc = cache["layers"][i]

        d_res2, dg2, db2 = _ln_bwd(dx, lc["res2"], params[f"{pre}.ln2.g"],
                                   lc["m2"], lc["r2"])
        grads[f"{pre}.ln2.g"] += dg2
        grads[f"{pre}.ln2.b"] += db2
        d_ffn_out = d_res2 if lc["fmask"] is None else d_res2 * lc["fmask"]
        grads[f"{pre}.ffn.w2"] += np.tensordot(lc["ff_act"], d_ffn_out, axes=([0, 1], [0, 1]))
        grads[f"{pre}.ffn.b2"] += d_ffn_out.sum(axis=(0, 1))
        d_ff_act = d_ffn_out @ params[f"{pre}.ffn.w2"].T
        d_ff_pre = kernels.gelu_bwd(lc["ff_pre"], d_ff_act)
        grads[f"{pre}.ffn.w1"] += np.tensordot(lc["x1"], d_ff_pre, axes=([0, 1], [0, 1]))
        grads[f"{pre}.ffn.b1"] += d_ff_pre.sum(axis=(0, 1))
        d_x1 = d_res2 + d_ff_pre @ params[f"{pre}.ffn.w1"].T

        d_res1, dg1, db1 = _ln_bwd(d_x1, lc["res1"], params[f"{pre}.ln1.g"],
                                   lc["m1"], lc["r1"])
        grads[f"{pre}.ln1.g"] += dg1
        grads[f"{pre}.ln1.b"] += db1
        d_attn_out = d_res1 if lc["omask"] is None else d_res1 * lc["omask"]
        grads[f"{pre}.attn.wo"] += np.tensordot(lc["ctx_m"], d_attn_out, axes=([0, 1], [0, 1]))
        grads[f"{pre}.attn.bo"] += d_attn_out.sum(axis=(0, 1))
        d_ctx_m = d_attn_out @ params[f"{pre}.attn.wo"].T
        d_ctx = _split_heads(d_ctx_m, cfg)

        d_probs_used = np.matmul(d_ctx, lc["vh"].transpose(0, 1, 3, 2))
        d_vh = np.matmul(lc["probs_used"].transpose(0, 1, 3, 2), d_ctx)
        d_probs = d_probs_used if lc["pmask"] is None else d_probs_used * lc["pmask"]
        d_scores = kernels.softmax_bwd(lc["probs"], d_probs) * scale
        d_qh = np.matmul(d_scores, lc["kh"])
        d_kh = np.matmul(d_scores.transpose(0, 1, 3, 2), lc["qh"])

        dq = _merge_heads(d_qh, cfg)
        dk = _merge_heads(d_kh, cfg)
        dv = _merge_heads(d_vh, cfg)
        x_in = lc["x_in"]
        grads[f"{pre}.attn.wq"] += np.tensordot(x_in, dq, axes=([0, 1], [0, 1]))
        grads[f"{pre}.attn.bq"] += dq.sum(axis=(0, 1))
        grads[f"{pre}.attn.wk"] += np.tensordot(x_in, dk, axes=([0, 1], [0, 1]))
        grads[f"{pre}.attn.bk"] += dk.sum(axis=(0, 1))
        grads[f"{pre}.attn.wv"] += np.tensordot(x_in, dv, axes=([0, 1], [0, 1]))
        grads[f"{pre}.attn.bv"] += dv.sum(axis=(0, 1))
        dx = (d_res1 + dq @ params[f"{pre}.attn.wq"].T
              + dk @ params[f"{pre}.attn.wk"].T
              + dv @ params[f"{pre}.attn.wv"].T)

    d_emb, dg, db = _ln_bwd(dx, cache["emb"], params["emb.ln.g"],
                            cache["emb_mean"], cache["emb_rstd"])
    grads["emb.ln.g"] += dg
    grads["emb.ln.b"] += db
    np.add.at(grads["emb.tok"], cache["ids"].reshape(-1), d_emb.reshape(-1, cfg.hidden))
    np.add.at(grads["emb.pos"], cache["positions"].reshape(-1), d_emb.reshape(-1, cfg.hidden))
    np.add.at(grads["emb.seg"], cache["segments"].reshape(-1), d_emb.reshape(-1, cfg.hidden))
    return grads


def forward(params: ParamDict, cfg: EncoderConfig, seq: TokenSequence,
            train_mode: bool = False, dropout_seed: int = 0) -> EncoderOutput:
    """Single-sequence convenience wrapper around :func:`forward_batch`."""
    hidden, _ = forward_batch(
        params, cfg, seq.ids[None, :], seq.attention_mask[None, :],
        positions=seq.positions[None, :], segments=seq.segments[None, :],
        train_mode=train_mode, dropout_seed=dropout_seed)
    states = hidden[0]
    return EncoderOutput(hidden_states=states, cls=states[0])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_encoder(path: str | Path, params: ParamDict, cfg: EncoderConfig,
                 extra_meta: dict | None = None) -> None:
    meta = {"kind": "encoder", "config": asdict(cfg)}
    if extra_meta:
        meta.update(extra_meta)
    checkpoint.save_tensors(path, params, meta)


def load_encoder(path: str | Path) -> tuple[ParamDict, EncoderConfig, dict]:
    tensors, meta = checkpoint.load_tensors(path)
    cfg = EncoderConfig(**meta["config"])
    return tensors, cfg, meta
