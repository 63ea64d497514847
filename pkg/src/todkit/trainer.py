"""Optimization loop: AdamW with decoupled weight decay, global-norm
gradient clipping, warmup-free linear learning-rate decay, dev-perplexity
early stopping, and resumable checkpoints.

Every source of randomness in a run is derived from ``(seed, step)``, so a
run resumed from a mid-training checkpoint continues bit-for-bit like the
uninterrupted run.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, kernels
from .corpus import Dialogue
from .encoder import EncoderConfig, ParamDict, check_params, init_params
from .objectives import (combined_loss, init_mlm_head, make_contrastive_batch,
                         make_mlm_batch, mlm_loss, rcl_loss)
from .tokenizer import Vocab, flatten_dialogue

OBJECTIVE_CHOICES = ("mlm", "mlm+rcl")


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_len: int = 128
    lr0: float = 1e-3
    total_steps: int = 1000
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 100
    patience: int = 3
    seed: int = 13
    mask_rate: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    dev_mask_seed: int = 9001   # fixed so perplexity is comparable across evals
    dev_batch_cap: int = 64

    def __post_init__(self):
        for fld in ("batch_size", "max_len", "total_steps", "eval_every"):
            if getattr(self, fld) < 1:
                raise ValueError(f"{fld} must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr0 <= 0 or self.clip_norm <= 0:
            raise ValueError("lr0 and clip_norm must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class OptimizerState:
    m: ParamDict = field(default_factory=dict)
    v: ParamDict = field(default_factory=dict)
    step: int = 0


def _no_decay(name: str) -> bool:
    # layer-norm scales/offsets and bias vectors are exempt from decay
    last = name.rsplit(".", 1)[-1]
    return last == "g" or last.startswith("b")


def adamw_step(params: ParamDict, grads: ParamDict, state: OptimizerState,
               lr: float, cfg: TrainConfig) -> tuple[ParamDict, OptimizerState]:
    """Decoupled-weight-decay Adam update, in place.

    Only tensors present in ``grads`` are touched, so callers freeze
    parameters by omitting their gradients.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for tensor {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        wd = 0.0 if _no_decay(name) else cfg.weight_decay
        kernels.adamw_update(p, g, state.m[name], state.v[name],
                             lr, cfg.beta1, cfg.beta2, cfg.adam_eps, wd, bc1, bc2)
    return params, state


def clip_gradients(grads: ParamDict, clip_norm: float) -> tuple[ParamDict, float]:
    """Scale all gradients so the global L2 norm is at most clip_norm."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    sq = 0.0
    # reduce in sorted name order so the norm is independent of dict history
    for name in sorted(grads):
        g = grads[name]
        sq += float((g * g).sum())
    gnorm = math.sqrt(sq)
    if gnorm > clip_norm:
        scale = clip_norm / gnorm
        for g in grads.values():
            g *= scale
    return grads, gnorm


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear decay from lr0 to zero over total_steps, no warm-up."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    return cfg.lr0 * (1.0 - step / cfg.total_steps)


# ---------------------------------------------------------------------------
# generic early-stopping loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: ParamDict            # best checkpoint (argmin of the dev metric)
    best_metric: float
    best_step: int
    final_params: ParamDict
    state: OptimizerState
    log: list[dict]
    stopped_step: int


StepFn = Callable[[ParamDict, int], tuple[dict, ParamDict]]
EvalFn = Callable[[ParamDict], float]


def run_training(params: ParamDict, cfg: TrainConfig, step_fn: StepFn,
                 eval_fn: EvalFn, metric_name: str = "dev_loss",
                 resume: dict | None = None,
                 session_steps: int | None = None) -> FitResult:
    """Drive step_fn/eval_fn under clipping, AdamW, LR decay, early stopping.

    ``step_fn(params, step)`` returns ``(loss_terms, grads)``;
    ``eval_fn(params)`` returns the dev metric (lower is better), evaluated
    before training and every ``eval_every`` steps thereafter. Training
    stops after ``patience`` consecutive evaluations without improvement
    and the best (not last) parameters are returned. ``session_steps``
    caps how many steps this invocation runs (an interrupted run can be
    resumed later and continues the schedule exactly).
    """
    log: list[dict] = []
    if resume is None:
        state = OptimizerState()
        start = 1
        first_eval = float(eval_fn(params))
        best_metric = first_eval
        best_step = 0
        best_params = copy.deepcopy(params)
        bad_evals = 0
        log.append({"step": 0, metric_name: first_eval})
    else:
        state = resume["state"]
        start = state.step + 1
        best_metric = resume["best_metric"]
        best_step = resume["best_step"]
        best_params = resume["best_params"]
        bad_evals = resume["bad_evals"]

    end = cfg.total_steps
    if session_steps is not None:
        end = min(end, start - 1 + session_steps)
    stopped = end
    for step in range(start, end + 1):
        lr = lr_schedule(step, cfg)
        loss_terms, grads = step_fn(params, step)
        grads, gnorm = clip_gradients(grads, cfg.clip_norm)
        params, state = adamw_step(params, grads, state, lr, cfg)
        rec = {"step": step, "lr": lr, "grad_norm": gnorm}
        rec.update(loss_terms)
        if step % cfg.eval_every == 0:
            metric = float(eval_fn(params))
            rec[metric_name] = metric
            if metric < best_metric:
                best_metric = metric
                best_step = step
                best_params = copy.deepcopy(params)
                bad_evals = 0
            else:
                bad_evals += 1
        log.append(rec)
        if step % cfg.eval_every == 0 and bad_evals >= cfg.patience:
            stopped = step
            break

    return FitResult(params=best_params, best_metric=best_metric,
                     best_step=best_step, final_params=params, state=state,
                     log=log, stopped_step=stopped)


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    params: ParamDict
    best_perplexity: float
    best_step: int
    log: list[dict]
    fit: FitResult


def _dev_perplexity_fn(dev_dialogues: list[Dialogue], vocab: Vocab,
                       enc_cfg: EncoderConfig, cfg: TrainConfig) -> EvalFn:
    seqs = [flatten_dialogue(vocab, d, max_len=cfg.max_len)
            for d in dev_dialogues[:cfg.dev_batch_cap]]

    def eval_fn(params: ParamDict) -> float:
        total_loss = 0.0
        total_m = 0
        # fixed masking seed keeps the early-stopping signal comparable
        for lo in range(0, len(seqs), cfg.batch_size):
            batch = make_mlm_batch(vocab, seqs[lo:lo + cfg.batch_size],
                                   cfg.mask_rate, cfg.dev_mask_seed + lo,
                                   cfg.mask_prob, cfg.random_prob)
            res = mlm_loss(params, enc_cfg, batch, pad_id=vocab.pad_id)
            total_loss += res.loss_sum
            total_m += res.mask_count
        if total_m == 0:
            return float("inf")
        return math.exp(total_loss / total_m)

    return eval_fn


def pretrain(train_dialogues: list[Dialogue], dev_dialogues: list[Dialogue],
             vocab: Vocab, enc_cfg: EncoderConfig, cfg: TrainConfig,
             objectives: str = "mlm+rcl", out_dir: str | Path | None = None,
             resume_from: str | Path | None = None,
             session_steps: int | None = None) -> PretrainResult:
    """Joint (or MLM-only) pre-training with early stopping on dev perplexity."""
    if objectives not in OBJECTIVE_CHOICES:
        raise ValueError(f"objectives must be one of {OBJECTIVE_CHOICES}")
    if not train_dialogues or not dev_dialogues:
        raise ValueError("train and dev corpora must be non-empty")
    use_rcl = objectives == "mlm+rcl"

    if resume_from is not None:
        params, resume = load_trainer_state(resume_from)
    else:
        params = init_params(enc_cfg, cfg.seed)
        params.update(init_mlm_head(enc_cfg, cfg.seed + 1))
        resume = None

    eval_fn = _dev_perplexity_fn(dev_dialogues, vocab, enc_cfg, cfg)

    def step_fn(p: ParamDict, step: int):
        rng = np.random.default_rng((cfg.seed, step))
        idx = rng.integers(0, len(train_dialogues), size=cfg.batch_size)
        batch_dialogues = [train_dialogues[int(i)] for i in idx]
        seqs = [flatten_dialogue(vocab, d, max_len=cfg.max_len) for d in batch_dialogues]
        masked = make_mlm_batch(vocab, seqs, cfg.mask_rate, rng,
                                cfg.mask_prob, cfg.random_prob)
        mres = mlm_loss(p, enc_cfg, masked, pad_id=vocab.pad_id,
                        train_mode=True, dropout_seed=2 * step)
        terms = {"mlm_loss": mres.loss_sum}
        grads = mres.grads
        if use_rcl:
            pairs = make_contrastive_batch(train_dialogues, cfg.batch_size, rng,
                                           vocab, max_len=cfg.max_len)
            rres = rcl_loss(p, enc_cfg, pairs, pad_id=vocab.pad_id,
                            train_mode=True, dropout_seed=2 * step + 1)
            terms["rcl_loss"] = rres.loss_sum
            for name, g in rres.grads.items():
                grads[name] += g
            terms["loss"] = combined_loss(mres.loss_sum, rres.loss_sum)
        else:
            terms["loss"] = mres.loss_sum
        return terms, grads

    fit = run_training(params, cfg, step_fn, eval_fn,
                       metric_name="dev_perplexity", resume=resume,
                       session_steps=session_steps)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(out / "model.ckpt", fit.params, enc_cfg,
                   {"objectives": objectives, "best_step": fit.best_step,
                    "best_perplexity": fit.best_metric})
        save_trainer_state(out / "trainer_state.ckpt", fit, enc_cfg, cfg)
        write_metrics_log(fit.log, out / "metrics.jsonl")

    return PretrainResult(params=fit.params, best_perplexity=fit.best_metric,
                          best_step=fit.best_step, log=fit.log, fit=fit)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(path: str | Path, params: ParamDict, enc_cfg: EncoderConfig,
               extra_meta: dict | None = None) -> None:
    meta = {"kind": "model", "config": asdict(enc_cfg)}
    if extra_meta:
        meta.update(extra_meta)
    checkpoint.save_tensors(path, params, meta)


def load_model(path: str | Path) -> tuple[ParamDict, EncoderConfig, dict]:
    tensors, meta = checkpoint.load_tensors(path)
    cfg = EncoderConfig(**meta["config"])
    check_params(tensors, cfg)
    return tensors, cfg, meta


def save_trainer_state(path: str | Path, fit: FitResult,
                       enc_cfg: EncoderConfig, cfg: TrainConfig) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in fit.final_params.items():
        tensors[f"param/{name}"] = arr
    for name, arr in fit.state.m.items():
        tensors[f"adam_m/{name}"] = arr
        tensors[f"adam_v/{name}"] = fit.state.v[name]
    for name, arr in fit.params.items():
        tensors[f"best/{name}"] = arr
    bad_evals = _bad_evals_from_log(fit.log, fit.best_step)
    meta = {
        "kind": "trainer_state",
        "config": asdict(enc_cfg),
        "train_config": asdict(cfg),
        "step": fit.state.step,
        "best_metric": fit.best_metric,
        "best_step": fit.best_step,
        "bad_evals": bad_evals,
    }
    checkpoint.save_tensors(path, tensors, meta)


def _bad_evals_from_log(log: list[dict], best_step: int) -> int:
    evals = [rec["step"] for rec in log if "dev_perplexity" in rec or "dev_loss" in rec]
    return sum(1 for s in evals if s > best_step)


def load_trainer_state(path: str | Path) -> tuple[ParamDict, dict]:
    tensors, meta = checkpoint.load_tensors(path)
    params: ParamDict = {}
    state = OptimizerState(step=meta["step"])
    best: ParamDict = {}
    for name, arr in tensors.items():
        group, key = name.split("/", 1)
        if group == "param":
            params[key] = arr
        elif group == "adam_m":
            state.m[key] = arr
        elif group == "adam_v":
            state.v[key] = arr
        elif group == "best":
            best[key] = arr
    resume = {
        "state": state,
        "best_metric": meta["best_metric"],
        "best_step": meta["best_step"],
        "best_params": best,
        "bad_evals": meta["bad_evals"],
    }
    return params, resume


def write_metrics_log(log: list[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
