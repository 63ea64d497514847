"""Pre-training objectives: dynamic masked language modeling and the
in-batch response contrastive loss, plus their weighted combination.

MLM: maskable (non-special) positions are selected independently at the
masking rate; a selected token becomes [MASK] / a random non-special token
/ itself with probability mask_prob / random_prob / remainder, and its
original id is recorded as the label either way. The loss is the summed
negative log-likelihood of the original tokens at masked positions under a
linear vocabulary head on the final hidden states.

RCL: each dialogue in a batch is split at a random system turn into
(context, next system response); both sides are encoded by the same
parameters in separate passes, and the b x b matrix of [CLS] dot products
is trained with a row-softmax cross-entropy against the diagonal, treating
the other in-batch responses as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Dialogue
from .encoder import EncoderConfig, ParamDict, backward_batch, forward_batch, zeros_like_params
from .mathutil import log_softmax, trunc_normal
from .tokenizer import TokenSequence, Vocab, encode_text, flatten_dialogue, stack_sequences

LABEL_SENTINEL = -1


@dataclass
class MaskedItem:
    seq: TokenSequence
    labels: np.ndarray  # original ids at masked positions, -1 elsewhere
    mask_count: int


@dataclass
class MaskedBatch:
    items: list[MaskedItem]

    @property
    def mask_count(self) -> int:
        return sum(it.mask_count for it in self.items)


@dataclass
class ContrastivePair:
    context: TokenSequence
    response: TokenSequence
    split_turn: int


def apply_dynamic_masking(vocab: Vocab, seq: TokenSequence, rate: float,
                          seed: int | np.random.Generator,
                          mask_prob: float = 0.8,
                          random_prob: float = 0.1) -> MaskedItem:
    """One dynamic-masking draw; call again with a new seed for a new draw."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"masking rate must be in [0, 1], got {rate}")
    if mask_prob < 0 or random_prob < 0 or mask_prob + random_prob > 1.0 + 1e-12:
        raise ValueError("mask_prob + random_prob must be <= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = seq.ids.copy()
    n = len(ids)
    maskable = (ids >= vocab.num_specials) & (seq.attention_mask == 1)
    selected = maskable & (rng.random(n) < rate)
    labels = np.full(n, LABEL_SENTINEL, dtype=np.int64)
    labels[selected] = ids[selected]
    branch = rng.random(n)
    to_mask = selected & (branch < mask_prob)
    to_random = selected & (branch >= mask_prob) & (branch < mask_prob + random_prob)
    ids[to_mask] = vocab.mask_id
    if to_random.any():
        ids[to_random] = rng.integers(vocab.num_specials, len(vocab),
                                      size=int(to_random.sum()))
    masked_seq = TokenSequence(ids, seq.positions.copy(), seq.segments.copy(),
                               seq.attention_mask.copy())
    return MaskedItem(seq=masked_seq, labels=labels, mask_count=int(selected.sum()))


def make_mlm_batch(vocab: Vocab, seqs: list[TokenSequence], rate: float,
                   seed: int | np.random.Generator,
                   mask_prob: float = 0.8, random_prob: float = 0.1) -> MaskedBatch:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return MaskedBatch([apply_dynamic_masking(vocab, s, rate, rng, mask_prob, random_prob)
                        for s in seqs])


# ---------------------------------------------------------------------------
# MLM loss
# ---------------------------------------------------------------------------

def init_mlm_head(cfg: EncoderConfig, seed: int) -> ParamDict:
    rng = np.random.default_rng(seed)
    return {
        "mlm.w": trunc_normal(rng, (cfg.hidden, cfg.vocab_size)),
        "mlm.b": np.zeros(cfg.vocab_size),
    }


@dataclass
class MlmResult:
    loss_sum: float
    loss_mean: float
    mask_count: int
    grads: ParamDict
    empty: bool = False  # flagged when the batch had no masked positions


def mlm_loss(params: ParamDict, cfg: EncoderConfig, batch: MaskedBatch,
             pad_id: int = 0, train_mode: bool = False, dropout_seed: int = 0,
             tie_embeddings: bool = False) -> MlmResult:
    """Summed negative log-likelihood at masked positions, with exact grads.

    With ``tie_embeddings`` the vocabulary projection reuses the token
    embedding matrix (transposed) instead of the separate ``mlm.w``.
    """
    if batch.mask_count == 0:
        return MlmResult(0.0, 0.0, 0, zeros_like_params(params), empty=True)

    seqs = [it.seq for it in batch.items]
    ids, positions, segments, mask = stack_sequences(seqs, pad_id)
    b, l = ids.shape
    labels = np.full((b, l), LABEL_SENTINEL, dtype=np.int64)
    for i, it in enumerate(batch.items):
        labels[i, :len(it.labels)] = it.labels

    hidden, cache = forward_batch(params, cfg, ids, mask, positions=positions,
                                  segments=segments, train_mode=train_mode,
                                  dropout_seed=dropout_seed, need_cache=True)
    rows, cols = np.nonzero(labels != LABEL_SENTINEL)
    h_m = hidden[rows, cols]                      # (M, hidden)
    targets = labels[rows, cols]
    proj = params["emb.tok"].T if tie_embeddings else params["mlm.w"]
    logits = h_m @ proj + params["mlm.b"]
    logp = log_softmax(logits, axis=1)
    m = len(targets)
    loss_sum = float(-logp[np.arange(m), targets].sum())

    dlogits = np.exp(logp)
    dlogits[np.arange(m), targets] -= 1.0
    head_grads = {"mlm.b": dlogits.sum(axis=0)}
    d_hidden = np.zeros_like(hidden)
    d_hidden[rows, cols] = dlogits @ proj.T
    enc_grads = backward_batch(params, cfg, cache, d_hidden)
    if tie_embeddings:
        enc_grads["emb.tok"] += (h_m.T @ dlogits).T
    else:
        head_grads["mlm.w"] = h_m.T @ dlogits
    enc_grads.update(head_grads)
    for name in params:
        if name not in enc_grads:
            enc_grads[name] = np.zeros_like(params[name])
    return MlmResult(loss_sum=loss_sum, loss_mean=loss_sum / m, mask_count=m,
                     grads=enc_grads)


# ---------------------------------------------------------------------------
# response contrastive loss
# ---------------------------------------------------------------------------

def valid_split_points(d: Dialogue) -> list[int]:
    """Turn indices usable as the response side: system turns with context."""
    return [i for i, t in enumerate(d.turns) if t.speaker == "system" and i >= 1]


def make_contrastive_batch(dialogues: list[Dialogue], b: int,
                           seed: int | np.random.Generator, vocab: Vocab,
                           max_len: int = 512) -> list[ContrastivePair]:
    """Draw b dialogues and split each at a random system turn."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eligible = [d for d in dialogues if valid_split_points(d)]
    if not eligible:
        raise ValueError("no dialogue in the corpus has a splittable system turn")
    idx = rng.choice(len(eligible), size=b, replace=b > len(eligible))
    pairs: list[ContrastivePair] = []
    for i in idx:
        d = eligible[int(i)]
        points = valid_split_points(d)
        t = points[int(rng.integers(len(points)))]
        context = flatten_dialogue(vocab, d, upto_turn=t - 1, max_len=max_len)
        resp_ids = [vocab.cls_id, vocab.sys_id] + encode_text(vocab, d.turns[t].text)
        response = TokenSequence.from_ids(resp_ids[:max_len])
        pairs.append(ContrastivePair(context=context, response=response, split_turn=t))
    return pairs


def rcl_from_embeddings(c: np.ndarray, r: np.ndarray):
    """Row-softmax cross-entropy of C R^T against the diagonal.

    Returns ``(loss_sum, probs, dC, dR)``.
    """
    if c.shape != r.shape or c.ndim != 2:
        raise ValueError("context and response matrices must both be (b, hidden)")
    b = c.shape[0]
    logits = c @ r.T
    logp = log_softmax(logits, axis=1)
    loss = float(-np.trace(logp))
    probs = np.exp(logp)
    dlogits = probs - np.eye(b)
    return loss, probs, dlogits @ r, dlogits.T @ c


@dataclass
class RclResult:
    loss_sum: float
    loss_mean: float
    grads: ParamDict
    sim_matrix: np.ndarray  # row-softmaxed b x b matrix


def rcl_loss(params: ParamDict, cfg: EncoderConfig, pairs: list[ContrastivePair],
             pad_id: int = 0, train_mode: bool = False,
             dropout_seed: int = 0) -> RclResult:
    """Contrastive loss over a batch of (context, response) pairs.

    Contexts and responses go through the same encoder in two separate
    passes (distinct dropout streams), and gradients from both passes are
    summed.
    """
    b = len(pairs)
    if b < 1:
        raise ValueError("need at least one contrastive pair")
    ctx_ids, ctx_pos, ctx_seg, ctx_mask = stack_sequences([p.context for p in pairs], pad_id)
    rsp_ids, rsp_pos, rsp_seg, rsp_mask = stack_sequences([p.response for p in pairs], pad_id)
    ctx_hidden, ctx_cache = forward_batch(
        params, cfg, ctx_ids, ctx_mask, positions=ctx_pos, segments=ctx_seg,
        train_mode=train_mode, dropout_seed=2 * dropout_seed, need_cache=True)
    rsp_hidden, rsp_cache = forward_batch(
        params, cfg, rsp_ids, rsp_mask, positions=rsp_pos, segments=rsp_seg,
        train_mode=train_mode, dropout_seed=2 * dropout_seed + 1, need_cache=True)
    c = ctx_hidden[:, 0, :]
    r = rsp_hidden[:, 0, :]
    loss, probs, dc, dr = rcl_from_embeddings(c, r)

    d_ctx_hidden = np.zeros_like(ctx_hidden)
    d_ctx_hidden[:, 0, :] = dc
    d_rsp_hidden = np.zeros_like(rsp_hidden)
    d_rsp_hidden[:, 0, :] = dr
    grads = backward_batch(params, cfg, ctx_cache, d_ctx_hidden)
    rsp_grads = backward_batch(params, cfg, rsp_cache, d_rsp_hidden)
    for name, g in rsp_grads.items():
        grads[name] += g
    for name in params:
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
    return RclResult(loss_sum=loss, loss_mean=loss / b, grads=grads, sim_matrix=probs)


def combined_loss(mlm: float, rcl: float, w_mlm: float = 1.0, w_rcl: float = 1.0) -> float:
    """Weighted sum of the two objectives (defaults sum them directly)."""
    if not (np.isfinite(mlm) and np.isfinite(rcl)):
        raise ValueError(f"loss terms must be finite, got mlm={mlm}, rcl={rcl}")
    return w_mlm * mlm + w_rcl * rcl
