"""Downstream dialogue heads: intent classification, dialogue state
tracking, dialogue act prediction, and response selection.

Each head is a thin layer over the encoder's [CLS] representation:

* intent: softmax over a linear map, trained with cross-entropy,
* state tracking: per-(domain, slot) projection compared by cosine to
  frozen candidate-value embeddings, trained with summed cross-entropy,
* acts: per-act sigmoid, triggered strictly above 0.5, trained with
  binary cross-entropy,
* response selection: cosine score between context and candidate [CLS]
  vectors; training reuses the in-batch contrastive objective.

Fine-tuning updates encoder and head jointly with the shared optimizer
machinery; probe mode updates only the head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dialogue
from .encoder import EncoderConfig, ParamDict, backward_batch, forward_batch
from .mathutil import (cosine_rows, cosine_rows_backward, cosine_similarity,
                       log_softmax, sigmoid, trunc_normal)
from .objectives import rcl_from_embeddings
from .tokenizer import (TokenSequence, Vocab, encode_text, encode_utterance,
                        flatten_dialogue, stack_sequences)
from .trainer import FitResult, TrainConfig, run_training

TASKS = ("intent", "dst", "act", "rs")
NONE_VALUE = "none"
RS_CONTEXT_LIMIT = 256  # most recent tokens kept when scoring responses


@dataclass
class Ontology:
    """Ordered (domain, slot) pairs with their candidate value lists."""

    pairs: list[str]                  # "domain-slot"
    values: dict[str, list[str]]

    def __post_init__(self):
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("ontology pairs must be unique")
        for pair in self.pairs:
            vals = self.values.get(pair)
            if not vals:
                raise ValueError(f"ontology pair {pair!r} has no values")
            if NONE_VALUE not in vals:
                raise ValueError(f"ontology pair {pair!r} is missing the '{NONE_VALUE}' value")
            if len(set(vals)) != len(vals):
                raise ValueError(f"ontology pair {pair!r} has duplicate values")

    def value_index(self, pair: str, value: str) -> int:
        try:
            return self.values[pair].index(value)
        except ValueError:
            raise ValueError(f"value {value!r} not in ontology for pair {pair!r}") from None

    @classmethod
    def from_dialogues(cls, dialogues: list[Dialogue]) -> "Ontology":
        observed: dict[str, set[str]] = {}
        for d in dialogues:
            for t in d.turns:
                for pair, value in (t.state or {}).items():
                    observed.setdefault(pair, set()).add(value)
        pairs = sorted(observed)
        values = {p: [NONE_VALUE] + sorted(observed[p]) for p in pairs}
        return cls(pairs=pairs, values=values)

    @classmethod
    def from_file(cls, path: str | Path) -> "Ontology":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(pairs=list(raw), values={k: list(v) for k, v in raw.items()})

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({p: self.values[p] for p in self.pairs}, indent=2,
                       ensure_ascii=False) + "\n",
            encoding="utf-8")


# ---------------------------------------------------------------------------
# head parameters
# ---------------------------------------------------------------------------

def init_linear_head(prefix: str, num_out: int, cfg: EncoderConfig, seed: int) -> ParamDict:
    rng = np.random.default_rng(seed)
    return {
        f"{prefix}.w": trunc_normal(rng, (num_out, cfg.hidden)),
        f"{prefix}.b": np.zeros(num_out),
    }


def init_dst_head(ontology: Ontology, cfg: EncoderConfig, seed: int) -> ParamDict:
    rng = np.random.default_rng(seed)
    head: ParamDict = {}
    for j, _ in enumerate(ontology.pairs):
        head[f"dst.{j}.w"] = trunc_normal(rng, (cfg.hidden, cfg.hidden))
        head[f"dst.{j}.b"] = np.zeros(cfg.hidden)
    return head


def head_param_names(params: ParamDict) -> list[str]:
    return [k for k in params if k.split(".", 1)[0] in ("intent", "act", "dst")]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def intent_probs_from_cls(params: ParamDict, cls_vec: np.ndarray) -> np.ndarray:
    logits = params["intent.w"] @ cls_vec + params["intent.b"]
    return np.exp(log_softmax(logits[None, :], axis=1))[0]


def intent_forward(params: ParamDict, cfg: EncoderConfig,
                   seq: TokenSequence) -> tuple[np.ndarray, int]:
    """Probability vector over intents and the argmax class (lowest index wins ties)."""
    cls_vec = _encode_cls(params, cfg, [seq])[0]
    probs = intent_probs_from_cls(params, cls_vec)
    return probs, int(np.argmax(probs))


def act_probs_from_cls(params: ParamDict, cls_vec: np.ndarray) -> np.ndarray:
    return sigmoid(params["act.w"] @ cls_vec + params["act.b"])


def act_forward(params: ParamDict, cfg: EncoderConfig,
                seq: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-act probabilities and trigger decisions (strictly above 0.5)."""
    cls_vec = _encode_cls(params, cfg, [seq])[0]
    probs = act_probs_from_cls(params, cls_vec)
    return probs, probs > 0.5


def compute_value_embeddings(params: ParamDict, cfg: EncoderConfig, vocab: Vocab,
                             ontology: Ontology, max_len: int = 64) -> dict[str, np.ndarray]:
    """[CLS] embeddings of every candidate value, to be frozen during training."""
    out: dict[str, np.ndarray] = {}
    for pair in ontology.pairs:
        seqs = [TokenSequence.from_ids([vocab.cls_id] + encode_text(vocab, v)[:max_len - 1])
                for v in ontology.values[pair]]
        out[pair] = _encode_cls(params, cfg, seqs)
    return out


def dst_forward(params: ParamDict, cfg: EncoderConfig, seq: TokenSequence,
                ontology: Ontology, value_embs: dict[str, np.ndarray]):
    """Cosine similarities and argmax value per (domain, slot) pair."""
    cls_vec = _encode_cls(params, cfg, [seq])[0]
    sims: dict[str, np.ndarray] = {}
    preds: dict[str, str] = {}
    for j, pair in enumerate(ontology.pairs):
        proj = params[f"dst.{j}.w"] @ cls_vec + params[f"dst.{j}.b"]
        s, _ = cosine_rows(proj, value_embs[pair])
        sims[pair] = s
        preds[pair] = ontology.values[pair][int(np.argmax(s))]
    return sims, preds


def response_selection_score(params: ParamDict, cfg: EncoderConfig,
                             context: TokenSequence, candidate: TokenSequence) -> float:
    """Cosine similarity between context and candidate [CLS] vectors."""
    cls_vecs = _encode_cls(params, cfg, [context, candidate])
    return cosine_similarity(cls_vecs[0], cls_vecs[1])


def _encode_cls(params: ParamDict, cfg: EncoderConfig, seqs: list[TokenSequence],
                pad_id: int = 0, train_mode: bool = False, dropout_seed: int = 0,
                need_cache: bool = False):
    ids, pos, seg, mask = stack_sequences(seqs, pad_id)
    hidden, cache = forward_batch(params, cfg, ids, mask, positions=pos,
                                  segments=seg, train_mode=train_mode,
                                  dropout_seed=dropout_seed, need_cache=need_cache)
    if need_cache:
        return hidden[:, 0, :], (cache, hidden.shape)
    return hidden[:, 0, :]


def encode_cls_batch(params: ParamDict, cfg: EncoderConfig,
                     seqs: list[TokenSequence], pad_id: int = 0,
                     batch_size: int = 64) -> np.ndarray:
    """[CLS] vectors for a list of sequences, evaluated in mini-batches."""
    return np.vstack([_encode_cls(params, cfg, seqs[lo:lo + batch_size], pad_id)
                      for lo in range(0, len(seqs), batch_size)])


# ---------------------------------------------------------------------------
# example extraction from annotated dialogues
# ---------------------------------------------------------------------------

def make_intent_examples(vocab: Vocab, dialogues: list[Dialogue],
                         max_len: int = 128):
    """(utterance sequence, intent label) per annotated user turn."""
    examples: list[tuple[TokenSequence, str]] = []
    for d in dialogues:
        for t in d.turns:
            if t.intent is not None:
                examples.append((encode_utterance(vocab, t.speaker, t.text, max_len),
                                 t.intent))
    labels = sorted({lab for _, lab in examples})
    return examples, labels


def make_domain_examples(vocab: Vocab, dialogues: list[Dialogue],
                         max_len: int = 128):
    """(utterance sequence, primary domain) for every turn; probe-style task."""
    examples: list[tuple[TokenSequence, str]] = []
    for d in dialogues:
        if not d.domains:
            continue
        label = sorted(d.domains)[0]
        for t in d.turns:
            examples.append((encode_utterance(vocab, t.speaker, t.text, max_len), label))
    labels = sorted({lab for _, lab in examples})
    return examples, labels


def make_act_examples(vocab: Vocab, dialogues: list[Dialogue], max_len: int = 128,
                      label_map: dict[str, str] | None = None):
    """(history sequence, act set of the following system turn) examples."""
    examples: list[tuple[TokenSequence, set[str]]] = []
    for d in dialogues:
        for i, t in enumerate(d.turns):
            if t.speaker != "system" or t.acts is None or i == 0:
                continue
            acts = {label_map.get(a, a) for a in t.acts} if label_map else set(t.acts)
            history = flatten_dialogue(vocab, d, upto_turn=i - 1, max_len=max_len)
            examples.append((history, acts))
    labels = sorted({a for _, acts in examples for a in acts})
    return examples, labels


def make_dst_examples(vocab: Vocab, dialogues: list[Dialogue], ontology: Ontology,
                      max_len: int = 128):
    """(history through the user turn, full per-pair state) examples."""
    examples: list[tuple[TokenSequence, dict[str, str]]] = []
    for d in dialogues:
        for i, t in enumerate(d.turns):
            if t.speaker != "user" or t.state is None:
                continue
            gold = {pair: t.state.get(pair, NONE_VALUE) for pair in ontology.pairs}
            history = flatten_dialogue(vocab, d, upto_turn=i, max_len=max_len)
            examples.append((history, gold))
    return examples


def make_rs_examples(vocab: Vocab, dialogues: list[Dialogue],
                     context_limit: int = RS_CONTEXT_LIMIT, max_len: int = 128):
    """(front-truncated context, next system response) pairs."""
    examples: list[tuple[TokenSequence, TokenSequence]] = []
    for d in dialogues:
        for i, t in enumerate(d.turns):
            if t.speaker != "system" or i == 0:
                continue
            context = flatten_dialogue(vocab, d, upto_turn=i - 1, max_len=context_limit)
            response = encode_utterance(vocab, "system", t.text, max_len)
            examples.append((context, response))
    return examples


# ---------------------------------------------------------------------------
# batch losses (loss, full grads) per task
# ---------------------------------------------------------------------------

def _cls_batch_with_backward(params, cfg, seqs, d_cls, cache_info, pad_id=0):
    cache, hidden_shape = cache_info
    d_hidden = np.zeros(hidden_shape)
    d_hidden[:, 0, :] = d_cls
    return backward_batch(params, cfg, cache, d_hidden)


def intent_batch_loss(params: ParamDict, cfg: EncoderConfig,
                      batch: list[tuple[TokenSequence, int]], pad_id: int = 0,
                      train_mode: bool = False, dropout_seed: int = 0):
    seqs = [s for s, _ in batch]
    targets = np.array([y for _, y in batch], dtype=np.int64)
    cls_vecs, cache_info = _encode_cls(params, cfg, seqs, pad_id, train_mode,
                                       dropout_seed, need_cache=True)
    logits = cls_vecs @ params["intent.w"].T + params["intent.b"]
    logp = log_softmax(logits, axis=1)
    n = len(batch)
    loss = float(-logp[np.arange(n), targets].sum()) / n
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    grads = _cls_batch_with_backward(params, cfg, seqs, dlogits @ params["intent.w"],
                                     cache_info, pad_id)
    grads["intent.w"] = dlogits.T @ cls_vecs
    grads["intent.b"] = dlogits.sum(axis=0)
    correct = int((np.argmax(logits, axis=1) == targets).sum())
    return loss, grads, correct


def act_batch_loss(params: ParamDict, cfg: EncoderConfig,
                   batch: list[tuple[TokenSequence, np.ndarray]], pad_id: int = 0,
                   train_mode: bool = False, dropout_seed: int = 0):
    seqs = [s for s, _ in batch]
    targets = np.stack([y for _, y in batch]).astype(np.float64)  # (n, N) 0/1
    cls_vecs, cache_info = _encode_cls(params, cfg, seqs, pad_id, train_mode,
                                       dropout_seed, need_cache=True)
    logits = cls_vecs @ params["act.w"].T + params["act.b"]
    probs = sigmoid(logits)
    eps = 1e-12
    n = len(batch)
    loss = float(-(targets * np.log(probs + eps)
                   + (1 - targets) * np.log(1 - probs + eps)).sum()) / n
    dlogits = (probs - targets) / n
    grads = _cls_batch_with_backward(params, cfg, seqs, dlogits @ params["act.w"],
                                     cache_info, pad_id)
    grads["act.w"] = dlogits.T @ cls_vecs
    grads["act.b"] = dlogits.sum(axis=0)
    return loss, grads


def dst_batch_loss(params: ParamDict, cfg: EncoderConfig,
                   batch: list[tuple[TokenSequence, dict[str, str]]],
                   ontology: Ontology, value_embs: dict[str, np.ndarray],
                   pad_id: int = 0, train_mode: bool = False, dropout_seed: int = 0):
    seqs = [s for s, _ in batch]
    cls_vecs, cache_info = _encode_cls(params, cfg, seqs, pad_id, train_mode,
                                       dropout_seed, need_cache=True)
    n = len(batch)
    loss = 0.0
    d_cls = np.zeros_like(cls_vecs)
    grads_head: ParamDict = {}
    for j, pair in enumerate(ontology.pairs):
        w, bias = params[f"dst.{j}.w"], params[f"dst.{j}.b"]
        v = value_embs[pair]
        dw = np.zeros_like(w)
        db = np.zeros_like(bias)
        targets = np.array([ontology.value_index(pair, gold[pair]) for _, gold in batch])
        for i in range(n):
            proj = w @ cls_vecs[i] + bias
            sims, ccache = cosine_rows(proj, v)
            logp = log_softmax(sims[None, :], axis=1)[0]
            loss += -float(logp[targets[i]])
            dsims = np.exp(logp)
            dsims[targets[i]] -= 1.0
            dproj = cosine_rows_backward(dsims, proj, v, ccache)
            dw += np.outer(dproj, cls_vecs[i])
            db += dproj
            d_cls[i] += w.T @ dproj
        grads_head[f"dst.{j}.w"] = dw / n
        grads_head[f"dst.{j}.b"] = db / n
    loss /= n
    d_cls /= n
    grads = _cls_batch_with_backward(params, cfg, seqs, d_cls, cache_info, pad_id)
    grads.update(grads_head)
    return loss, grads


def rs_batch_loss(params: ParamDict, cfg: EncoderConfig,
                  batch: list[tuple[TokenSequence, TokenSequence]], pad_id: int = 0,
                  train_mode: bool = False, dropout_seed: int = 0):
    """In-batch contrastive objective over (context, response) pairs."""
    ctx_vecs, ctx_info = _encode_cls(params, cfg, [c for c, _ in batch], pad_id,
                                     train_mode, 2 * dropout_seed, need_cache=True)
    rsp_vecs, rsp_info = _encode_cls(params, cfg, [r for _, r in batch], pad_id,
                                     train_mode, 2 * dropout_seed + 1, need_cache=True)
    n = len(batch)
    loss, _, dc, dr = rcl_from_embeddings(ctx_vecs, rsp_vecs)
    loss /= n
    grads = _cls_batch_with_backward(params, cfg, [c for c, _ in batch], dc / n,
                                     ctx_info, pad_id)
    rsp_grads = _cls_batch_with_backward(params, cfg, [r for _, r in batch], dr / n,
                                         rsp_info, pad_id)
    for name, g in rsp_grads.items():
        grads[name] += g
    return loss, grads


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    params: ParamDict
    fit: FitResult
    label_space: list[str] | None
    task: str


def _restrict(grads: ParamDict, names: list[str]) -> ParamDict:
    return {k: grads[k] for k in names}


def finetune(task: str, params: ParamDict, enc_cfg: EncoderConfig, vocab: Vocab,
             train_dialogues: list[Dialogue], dev_dialogues: list[Dialogue],
             cfg: TrainConfig, seed: int, probe: bool = False,
             ontology: Ontology | None = None,
             act_label_map: dict[str, str] | None = None) -> FinetuneResult:
    """Fine-tune encoder plus task head (head only when probe=True)."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    params = {k: v.copy() for k, v in params.items()}
    label_space: list[str] | None = None

    if task == "intent":
        train_ex, labels = make_intent_examples(vocab, train_dialogues, cfg.max_len)
        dev_ex, _ = make_intent_examples(vocab, dev_dialogues, cfg.max_len)
        label_space = labels
        label_to_idx = {lab: i for i, lab in enumerate(labels)}
        for _, lab in train_ex + dev_ex:
            if lab not in label_to_idx:
                raise ValueError(f"label {lab!r} outside the training label space")
        train_data = [(s, label_to_idx[lab]) for s, lab in train_ex]
        dev_data = [(s, label_to_idx[lab]) for s, lab in dev_ex]
        params.update(init_linear_head("intent", len(labels), enc_cfg, seed + 101))
        batch_fn = lambda p, b, step: intent_batch_loss(
            p, enc_cfg, b, vocab.pad_id, train_mode=True, dropout_seed=step)[:2]
        eval_batch_fn = lambda p, b: intent_batch_loss(p, enc_cfg, b, vocab.pad_id)[0]
    elif task == "act":
        train_ex, labels = make_act_examples(vocab, train_dialogues, cfg.max_len, act_label_map)
        dev_ex, _ = make_act_examples(vocab, dev_dialogues, cfg.max_len, act_label_map)
        label_space = labels
        lab_idx = {lab: i for i, lab in enumerate(labels)}
        for _, acts in train_ex + dev_ex:
            for a in acts:
                if a not in lab_idx:
                    raise ValueError(f"label {a!r} outside the training label space")

        def to_vec(acts: set[str]) -> np.ndarray:
            vec = np.zeros(len(labels))
            for a in acts:
                vec[lab_idx[a]] = 1.0
            return vec

        train_data = [(s, to_vec(a)) for s, a in train_ex]
        dev_data = [(s, to_vec(a)) for s, a in dev_ex]
        params.update(init_linear_head("act", len(labels), enc_cfg, seed + 102))
        batch_fn = lambda p, b, step: act_batch_loss(
            p, enc_cfg, b, vocab.pad_id, train_mode=True, dropout_seed=step)
        eval_batch_fn = lambda p, b: act_batch_loss(p, enc_cfg, b, vocab.pad_id)[0]
    elif task == "dst":
        if ontology is None:
            # cover every annotated value visible to this run
            ontology = Ontology.from_dialogues(train_dialogues + dev_dialogues)
        train_data = make_dst_examples(vocab, train_dialogues, ontology, cfg.max_len)
        dev_data = make_dst_examples(vocab, dev_dialogues, ontology, cfg.max_len)
        params.update(init_dst_head(ontology, enc_cfg, seed + 103))
        # value embeddings snapshot the starting encoder and stay fixed
        value_embs = compute_value_embeddings(params, enc_cfg, vocab, ontology)
        batch_fn = lambda p, b, step: dst_batch_loss(
            p, enc_cfg, b, ontology, value_embs, vocab.pad_id,
            train_mode=True, dropout_seed=step)
        eval_batch_fn = lambda p, b: dst_batch_loss(
            p, enc_cfg, b, ontology, value_embs, vocab.pad_id)[0]
    else:  # rs
        train_data = make_rs_examples(vocab, train_dialogues,
                                      context_limit=min(RS_CONTEXT_LIMIT, cfg.max_len),
                                      max_len=cfg.max_len)
        dev_data = make_rs_examples(vocab, dev_dialogues,
                                    context_limit=min(RS_CONTEXT_LIMIT, cfg.max_len),
                                    max_len=cfg.max_len)
        batch_fn = lambda p, b, step: rs_batch_loss(
            p, enc_cfg, b, vocab.pad_id, train_mode=True, dropout_seed=step)
        eval_batch_fn = lambda p, b: rs_batch_loss(p, enc_cfg, b, vocab.pad_id)[0]

    if not train_data:
        raise ValueError(f"no training examples with {task} annotations")
    if not dev_data:
        dev_data = train_data

    head_names = head_param_names(params)

    def step_fn(p: ParamDict, step: int):
        srng = np.random.default_rng((seed, step))
        idx = srng.integers(0, len(train_data), size=min(cfg.batch_size, len(train_data)))
        batch = [train_data[int(i)] for i in idx]
        loss, grads = batch_fn(p, batch, step)
        if probe:
            grads = _restrict(grads, head_names)
        return {"loss": float(loss)}, grads

    def eval_fn(p: ParamDict) -> float:
        total = 0.0
        count = 0
        for lo in range(0, len(dev_data), cfg.batch_size):
            b = dev_data[lo:lo + cfg.batch_size]
            total += eval_batch_fn(p, b) * len(b)
            count += len(b)
        return total / count

    fit = run_training(params, cfg, step_fn, eval_fn, metric_name="dev_loss")
    return FinetuneResult(params=fit.params, fit=fit, label_space=label_space, task=task)
