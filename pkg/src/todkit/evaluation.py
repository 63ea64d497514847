"""Metrics and probing: intent accuracies, joint goal / slot accuracy,
micro/macro F1, k-of-100 ranking accuracy, few-shot samplers, the linear
probe, the K-means + NMI clustering probe, embedding export, and
multi-seed aggregation into metric reports.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Dialogue
from .downstream import encode_cls_batch, finetune
from .encoder import EncoderConfig, ParamDict
from .tokenizer import TokenSequence, Vocab, encode_utterance
from .trainer import TrainConfig


# ---------------------------------------------------------------------------
# metric reports
# ---------------------------------------------------------------------------

@dataclass
class MetricValue:
    mean: float
    std: float
    values: list[float]


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, MetricValue]
    config_fingerprint: str
    seeds: list[int]

    def __post_init__(self):
        for name, mv in self.metrics.items():
            if mv.values:
                mean = float(np.mean(mv.values))
                if abs(mean - mv.mean) > 1e-12:
                    raise ValueError(f"metric {name}: mean inconsistent with per-seed values")
            if len(mv.values) <= 1 and mv.std != 0.0:
                raise ValueError(f"metric {name}: std must be 0 with a single seed")

    def to_json(self) -> str:
        payload = {
            "task": self.task,
            "config_fingerprint": self.config_fingerprint,
            "seeds": self.seeds,
            "metrics": {k: {"mean": v.mean, "std": v.std, "values": v.values}
                        for k, v in self.metrics.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        raw = json.loads(text)
        metrics = {k: MetricValue(v["mean"], v["std"], list(v["values"]))
                   for k, v in raw["metrics"].items()}
        return cls(task=raw["task"], metrics=metrics,
                   config_fingerprint=raw["config_fingerprint"], seeds=raw["seeds"])


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if all(v == values[0] for v in values):
        return float(values[0]), 0.0
    return float(np.mean(values)), float(np.std(values, ddof=1))


def make_report(task: str, per_seed: list[dict[str, float]], seeds: list[int],
                fingerprint: str = "") -> MetricReport:
    """Aggregate per-seed metric dicts (identical keys) into one report."""
    if not per_seed:
        raise ValueError("need at least one per-seed metric dict")
    keys = set(per_seed[0])
    for d in per_seed[1:]:
        if set(d) != keys:
            raise ValueError(f"metric keys differ across seeds: {sorted(keys)} "
                             f"vs {sorted(d)}")
    metrics = {}
    for k in sorted(keys):
        vals = [float(d[k]) for d in per_seed]
        mean, std = _mean_std(vals)
        metrics[k] = MetricValue(mean=mean, std=std, values=vals)
    return MetricReport(task=task, metrics=metrics,
                        config_fingerprint=fingerprint, seeds=list(seeds))


def aggregate_seeds(reports: list[MetricReport]) -> MetricReport:
    """Merge single-seed reports into one mean/std report."""
    if not reports:
        raise ValueError("need at least one report")
    per_seed = []
    seeds: list[int] = []
    for rep in reports:
        per_seed.append({k: v.mean for k, v in rep.metrics.items()})
        seeds.extend(rep.seeds)
    return make_report(reports[0].task, per_seed, seeds,
                       reports[0].config_fingerprint)


# ---------------------------------------------------------------------------
# task metrics
# ---------------------------------------------------------------------------

def intent_metrics(preds: Sequence[str], golds: Sequence[str],
                   out_of_scope_label: str) -> dict[str, float]:
    """acc_all, acc_in (gold in-scope only), acc_out (binary in/out decision),
    recall_out (absent when no gold out-of-scope samples exist)."""
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(golds)} golds")
    if not golds:
        raise ValueError("empty evaluation set")
    n = len(golds)
    correct = sum(p == g for p, g in zip(preds, golds))
    in_idx = [i for i, g in enumerate(golds) if g != out_of_scope_label]
    out_idx = [i for i, g in enumerate(golds) if g == out_of_scope_label]
    out: dict[str, float] = {"acc_all": correct / n}
    if in_idx:
        out["acc_in"] = sum(preds[i] == golds[i] for i in in_idx) / len(in_idx)
    binary = sum((preds[i] == out_of_scope_label) == (golds[i] == out_of_scope_label)
                 for i in range(n))
    out["acc_out"] = binary / n
    if out_idx:
        out["recall_out"] = sum(preds[i] == out_of_scope_label for i in out_idx) / len(out_idx)
    return out


def dst_metrics(pred_states: Sequence[dict[str, str]],
                gold_states: Sequence[dict[str, str]]) -> tuple[float, float]:
    """Joint goal accuracy and slot accuracy over per-turn state dicts."""
    if len(pred_states) != len(gold_states):
        raise ValueError("prediction / gold turn counts differ")
    if not gold_states:
        raise ValueError("empty evaluation set")
    joint_hits = 0
    slot_hits = 0
    slot_total = 0
    for pred, gold in zip(pred_states, gold_states):
        if set(pred) != set(gold):
            raise ValueError(
                f"(domain, slot) universe mismatch: {sorted(pred)} vs {sorted(gold)}")
        matches = sum(pred[pair] == gold[pair] for pair in gold)
        slot_hits += matches
        slot_total += len(gold)
        if matches == len(gold):
            joint_hits += 1
    return joint_hits / len(gold_states), slot_hits / slot_total


def multilabel_f1(preds: Sequence[set], golds: Sequence[set],
                  label_space: Sequence[str]) -> tuple[float, float]:
    """Micro F1 from global counts; macro F1 averages per-label F1 with
    absent labels contributing 0."""
    if len(preds) != len(golds):
        raise ValueError("prediction / gold counts differ")
    space = list(label_space)
    space_set = set(space)
    for i, (p, g) in enumerate(zip(preds, golds)):
        stray = (set(p) | set(g)) - space_set
        if stray:
            raise ValueError(f"sample {i}: labels outside the label space: {sorted(stray)}")
    tp_all = fp_all = fn_all = 0
    per_label_f1 = []
    for lab in space:
        tp = sum(1 for p, g in zip(preds, golds) if lab in p and lab in g)
        fp = sum(1 for p, g in zip(preds, golds) if lab in p and lab not in g)
        fn = sum(1 for p, g in zip(preds, golds) if lab not in p and lab in g)
        tp_all += tp
        fp_all += fp
        fn_all += fn
        denom = 2 * tp + fp + fn
        per_label_f1.append(2 * tp / denom if denom else 0.0)
    micro_denom = 2 * tp_all + fp_all + fn_all
    micro = 2 * tp_all / micro_denom if micro_denom else 0.0
    macro = float(np.mean(per_label_f1)) if per_label_f1 else 0.0
    return micro, macro


# ---------------------------------------------------------------------------
# k-of-100 response selection
# ---------------------------------------------------------------------------

BatchScorer = Callable[[list, list], np.ndarray]


@dataclass
class KOf100Result:
    mean: float
    per_seed: list[float]
    k: int


def k_of_100(scorer: BatchScorer, pairs: Sequence[tuple], k: int,
             num_seeds: int = 5, base_seed: int = 0, batch: int = 100) -> KOf100Result:
    """Rank each gold response among a batch of 100 candidates.

    ``scorer(contexts, responses)`` returns the (n, n) score matrix. Ties
    count against the gold response, final partial batches are dropped,
    and the accuracy is averaged over ``num_seeds`` reshuffles.
    """
    if len(pairs) < batch:
        raise ValueError(f"need at least {batch} pairs, got {len(pairs)}")
    if not 1 <= k <= batch - 1:
        raise ValueError(f"k must be in 1..{batch - 1}, got {k}")
    per_seed = []
    for s in range(num_seeds):
        rng = np.random.default_rng((base_seed, s))
        order = rng.permutation(len(pairs))
        hits = 0
        total = 0
        for lo in range(0, len(pairs) - batch + 1, batch):
            chunk = [pairs[int(i)] for i in order[lo:lo + batch]]
            contexts = [c for c, _ in chunk]
            responses = [r for _, r in chunk]
            scores = np.asarray(scorer(contexts, responses), dtype=np.float64)
            if scores.shape != (batch, batch):
                raise ValueError(f"scorer returned shape {scores.shape}, "
                                 f"expected {(batch, batch)}")
            diag = np.diag(scores)
            # pessimistic rank: every tie pushes the gold response down
            worse_or_equal = (scores >= diag[:, None]).sum(axis=1) - 1
            ranks = 1 + worse_or_equal
            hits += int((ranks <= k).sum())
            total += batch
        per_seed.append(hits / total)
    return KOf100Result(mean=float(np.mean(per_seed)), per_seed=per_seed, k=k)


def encoder_rs_scorer(params: ParamDict, cfg: EncoderConfig, vocab: Vocab) -> BatchScorer:
    """Cosine score matrix between context and response [CLS] embeddings."""

    def scorer(contexts: list[TokenSequence], responses: list[TokenSequence]) -> np.ndarray:
        c = encode_cls_batch(params, cfg, contexts, vocab.pad_id)
        r = encode_cls_batch(params, cfg, responses, vocab.pad_id)
        c = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
        r = r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
        return c @ r.T

    return scorer


# ---------------------------------------------------------------------------
# few-shot sampling
# ---------------------------------------------------------------------------

@dataclass
class FewShotSpec:
    mode: str                      # "per-class-k" | "fraction"
    k: int | None = None
    fraction: float | None = None
    num_seeds: int = 3

    def __post_init__(self):
        if self.mode not in ("per-class-k", "fraction"):
            raise ValueError(f"unknown few-shot mode {self.mode!r}")
        if self.mode == "per-class-k" and (self.k is None or self.k < 1):
            raise ValueError("per-class-k mode needs k >= 1")
        if self.mode == "fraction" and (
                self.fraction is None or not 0.0 < self.fraction <= 1.0):
            raise ValueError("fraction mode needs fraction in (0, 1]")
        if self.num_seeds < 3:
            raise ValueError("few-shot protocols require at least 3 seeds")


def few_shot_sample(data: Sequence, spec: FewShotSpec, seed: int) -> list:
    """Deterministic subsample without replacement.

    per-class-k expects (item, label) pairs and draws exactly k per class;
    fraction mode draws floor(fraction * N) items (at least one).
    """
    rng = np.random.default_rng(seed)
    if spec.mode == "per-class-k":
        by_class: dict = {}
        for item, label in data:
            by_class.setdefault(label, []).append((item, label))
        out = []
        for label in sorted(by_class):
            group = by_class[label]
            if len(group) < spec.k:
                raise ValueError(
                    f"class {label!r} has only {len(group)} samples, need {spec.k}")
            idx = rng.choice(len(group), size=spec.k, replace=False)
            out.extend(group[int(i)] for i in idx)
        return out
    n = len(data)
    count = max(1, math.floor(spec.fraction * n))
    idx = rng.choice(n, size=count, replace=False)
    return [data[int(i)] for i in idx]


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def linear_probe(params: ParamDict, enc_cfg: EncoderConfig, vocab: Vocab, task: str,
                 train_dialogues: list[Dialogue], dev_dialogues: list[Dialogue],
                 cfg: TrainConfig, seed: int):
    """Train one linear layer on a frozen encoder; encoder tensors are
    guaranteed bit-identical afterwards."""
    if task not in ("intent", "act"):
        raise ValueError("linear probe supports the intent and act tasks")
    before = {k: v.copy() for k, v in params.items()}
    result = finetune(task, params, enc_cfg, vocab, train_dialogues, dev_dialogues,
                      cfg, seed, probe=True)
    for name, arr in before.items():
        if not np.array_equal(result.params[name], arr):
            raise RuntimeError(f"probe modified frozen encoder tensor {name}")
    return result


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> np.ndarray:
    """Seeded k-means++ initialization plus Lloyd iterations; returns labels."""
    n = len(points)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[int(rng.integers(n))]
            continue
        probs = d2 / total
        centers[j] = points[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for j in range(k):
            members = points[new_labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the farthest point
                centers[j] = points[int(dists.min(axis=1).argmax())]
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def nmi(a: Sequence, b: Sequence, normalization: str = "sqrt") -> float:
    """Normalized mutual information with natural logs.

    ``sqrt`` divides by sqrt(H(a) H(b)); ``max`` divides by max(H(a), H(b)).
    """
    if normalization not in ("sqrt", "max"):
        raise ValueError(f"unknown normalization {normalization!r}")
    if len(a) != len(b):
        raise ValueError("label sequences must have equal length")
    n = len(a)
    a_ids = {lab: i for i, lab in enumerate(sorted(set(a), key=repr))}
    b_ids = {lab: i for i, lab in enumerate(sorted(set(b), key=repr))}
    table = np.zeros((len(a_ids), len(b_ids)))
    for x, y in zip(a, b):
        table[a_ids[x], b_ids[y]] += 1
    pxy = table / n
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    info = 0.0
    for i in range(len(px)):
        for j in range(len(py)):
            if pxy[i, j] > 0:
                info += pxy[i, j] * math.log(pxy[i, j] / (px[i] * py[j]))
    ha = -sum(p * math.log(p) for p in px if p > 0)
    hb = -sum(p * math.log(p) for p in py if p > 0)
    if ha <= 0.0 or hb <= 0.0:
        return 0.0
    denom = math.sqrt(ha * hb) if normalization == "sqrt" else max(ha, hb)
    return float(min(max(info / denom, 0.0), 1.0))


def clustering_probe(embeddings: np.ndarray, labels: Sequence, k: int,
                     seed: int, max_iter: int = 100) -> float:
    """K-means the embeddings and score cluster/label agreement with NMI."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(embeddings) < k:
        raise ValueError("need at least k points")
    if np.allclose(embeddings, embeddings[0]):
        warnings.warn("all embeddings identical; clustering is degenerate, NMI = 0")
        return 0.0
    assignment = kmeans(embeddings, k, seed, max_iter)
    return nmi(assignment.tolist(), list(labels))


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def pca_2d(points: np.ndarray) -> np.ndarray:
    """First two principal components, deterministic sign convention."""
    x = points - points.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    coords = x @ comps.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((len(points), 2 - coords.shape[1]))])
    return coords


def export_embeddings(params: ParamDict, cfg: EncoderConfig, vocab: Vocab,
                      texts: Sequence[str], labels: Sequence[str],
                      out_path: str | Path, speaker: str = "system",
                      max_len: int = 128, pca: bool = False) -> np.ndarray:
    """Write one row per utterance: label, [CLS] vector, optional PCA-2D."""
    if len(texts) != len(labels):
        raise ValueError("texts and labels must have equal length")
    seqs = [encode_utterance(vocab, speaker, t, max_len) for t in texts]
    vecs = encode_cls_batch(params, cfg, seqs, vocab.pad_id)
    header = ["label"] + [f"dim{i}" for i in range(vecs.shape[1])]
    cols = [vecs]
    if pca:
        header += ["pca0", "pca1"]
        cols.append(pca_2d(vecs))
    data = np.hstack(cols)
    with Path(out_path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for lab, row in zip(labels, data):
            fh.write(lab + "\t" + "\t".join(f"{x:.17g}" for x in row) + "\n")
    return data


def extract_utterances(dialogues: Iterable[Dialogue], speaker: str = "system",
                       label_field: str = "domain") -> tuple[list[str], list[str]]:
    """Pull utterance texts plus a label column for export/probing."""
    texts: list[str] = []
    labels: list[str] = []
    for d in dialogues:
        for t in d.turns:
            if speaker != "all" and t.speaker != speaker:
                continue
            if label_field == "domain":
                lab = sorted(d.domains)[0] if d.domains else "unknown"
            elif label_field == "act":
                lab = ",".join(sorted(t.acts)) if t.acts else "none"
            elif label_field == "intent":
                lab = t.intent if t.intent else "none"
            else:
                raise ValueError(f"unknown label field {label_field!r}")
            texts.append(t.text)
            labels.append(lab)
    return texts, labels
