"""Command-line entry point.

Subcommands: unify, stats, synth, train-tokenizer, pretrain, finetune,
evaluate, probe, export-embeddings. All randomness flows from explicit
``--seed`` flags; every command that writes an output directory drops a
fully-resolved ``config.json`` snapshot into it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import corpus, downstream, evaluation, tokenizer, trainer
from .config import RunConfig


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON run config")
    p.add_argument("--seed", type=int, default=None, help="override config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="todkit",
                                     description="task-oriented dialogue encoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("unify", help="convert an external corpus to the unified format")
    p.add_argument("--adapter", required=True, choices=sorted(corpus.ADAPTERS))
    p.add_argument("--in", dest="in_dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("stats", help="report corpus statistics")
    p.add_argument("--in", dest="in_file", required=True, type=Path)

    p = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train-tokenizer", help="learn a subword vocabulary")
    p.add_argument("--in", dest="in_file", required=True, type=Path)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="pre-train the encoder")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--dev-corpus", type=Path, default=None,
                   help="held-out corpus (default: 10%% split of --corpus)")
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--objectives", choices=trainer.OBJECTIVE_CHOICES, default="mlm+rcl")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--resume", type=Path, default=None)
    _add_config_args(p)

    p = sub.add_parser("finetune", help="fine-tune a downstream head")
    p.add_argument("--task", required=True, choices=downstream.TASKS)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--train", dest="train_file", required=True, type=Path)
    p.add_argument("--dev", dest="dev_file", type=Path, default=None)
    p.add_argument("--ontology", type=Path, default=None)
    p.add_argument("--act-label-map", type=Path, default=None,
                   help="JSON file mapping raw act labels to training labels")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seeds", type=str, default=None,
                   help="comma-separated seeds for multi-seed runs")
    p.add_argument("--fewshot-k", type=int, default=None)
    p.add_argument("--fewshot-fraction", type=float, default=None)
    _add_config_args(p)

    p = sub.add_parser("evaluate", help="evaluate a fine-tuned model")
    p.add_argument("--task", required=True, choices=downstream.TASKS)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ontology", type=Path, default=None)
    p.add_argument("--oos-label", type=str, default=None)
    p.add_argument("--k", type=str, default="1,3,10", help="k values for k-of-100")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--metrics", type=str, default=None,
                   help="comma-separated subset of metrics to report")
    p.add_argument("--out", required=True, type=Path)
    _add_config_args(p)

    p = sub.add_parser("probe", help="linear or clustering probe")
    p.add_argument("--mode", required=True, choices=("linear", "cluster"))
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--task", choices=("intent", "act"), default="intent")
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--label-field", choices=("domain", "act", "intent"), default="domain")
    p.add_argument("--speaker", choices=("user", "system", "all"), default="system")
    p.add_argument("--out", required=True, type=Path)
    _add_config_args(p)

    p = sub.add_parser("export-embeddings", help="dump [CLS] vectors for plotting")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--speaker", choices=("user", "system", "all"), default="system")
    p.add_argument("--label-field", choices=("domain", "act", "intent"), default="domain")
    p.add_argument("--pca", action="store_true")
    p.add_argument("--out", required=True, type=Path)
    _add_config_args(p)

    return parser


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------

def _cmd_unify(args) -> int:
    dialogues = corpus.run_adapter(args.adapter, args.in_dir)
    corpus.write_unified(dialogues, args.out)
    print(f"wrote {len(dialogues)} dialogues to {args.out}")
    return 0


def _cmd_stats(args) -> int:
    dialogues = corpus.load_unified(args.in_file)
    stats = corpus.compute_stats(dialogues)
    print(json.dumps({
        "num_dialogues": stats.num_dialogues,
        "num_utterances": stats.num_utterances,
        "avg_turns": stats.avg_turns,
        "num_domains": stats.num_domains,
    }, indent=2))
    return 0


def _cmd_synth(args) -> int:
    dialogues = corpus.generate_synthetic(args.seed, args.n)
    corpus.write_unified(dialogues, args.out)
    print(f"wrote {len(dialogues)} synthetic dialogues to {args.out}")
    return 0


def _cmd_train_tokenizer(args) -> int:
    dialogues = corpus.load_unified(args.in_file)
    texts = [t.text for d in dialogues for t in d.turns]
    vocab = tokenizer.train_subword(texts, args.vocab_size, args.seed)
    tokenizer.save_vocab(vocab, args.out)
    print(f"trained vocab of {len(vocab)} tokens ({len(vocab.merges)} merges) -> {args.out}")
    return 0


def _load_corpus_normalized(path: Path) -> list[corpus.Dialogue]:
    return [corpus.normalize_speakers(d) for d in corpus.load_unified(path)]


def _cmd_pretrain(args) -> int:
    cfg = RunConfig.from_file(args.config).with_seed(args.seed)
    train_dialogues = _load_corpus_normalized(args.corpus)
    if args.dev_corpus is not None:
        dev_dialogues = _load_corpus_normalized(args.dev_corpus)
    else:
        train_dialogues, dev_dialogues, _ = corpus.split_corpus(
            train_dialogues, (0.9, 0.05, 0.05), cfg.seed)
    vocab = tokenizer.load_vocab(args.vocab)
    enc_cfg = cfg.encoder
    if enc_cfg.vocab_size != len(vocab):
        enc_cfg = dataclasses.replace(enc_cfg, vocab_size=len(vocab))
    cfg.snapshot(args.out)
    result = trainer.pretrain(train_dialogues, dev_dialogues, vocab, enc_cfg,
                              cfg.train, objectives=args.objectives,
                              out_dir=args.out, resume_from=args.resume)
    print(f"best dev perplexity {result.best_perplexity:.4f} at step "
          f"{result.best_step}; outputs in {args.out}")
    return 0


def _parse_seeds(arg: str | None, default_seed: int) -> list[int]:
    if arg is None:
        return [default_seed]
    return [int(s) for s in arg.split(",") if s.strip()]


def _cmd_finetune(args) -> int:
    cfg = RunConfig.from_file(args.config).with_seed(args.seed)
    params, enc_cfg, _ = trainer.load_model(args.checkpoint)
    vocab = tokenizer.load_vocab(args.vocab)
    train_dialogues = _load_corpus_normalized(args.train_file)
    dev_dialogues = (_load_corpus_normalized(args.dev_file)
                     if args.dev_file else train_dialogues)
    ontology = (downstream.Ontology.from_file(args.ontology)
                if args.ontology else None)
    act_label_map = None
    if args.act_label_map is not None:
        act_label_map = json.loads(args.act_label_map.read_text(encoding="utf-8"))
    seeds = _parse_seeds(args.seeds, cfg.seed)
    cfg.snapshot(args.out)

    reports = []
    for seed in seeds:
        run_train = train_dialogues
        if args.fewshot_k is not None:
            if args.task != "intent":
                raise ValueError("--fewshot-k applies to the intent task")
            utterances = [(t, t.intent) for d in train_dialogues for t in d.turns
                          if t.intent is not None]
            sampled = evaluation.few_shot_sample(
                utterances, evaluation.FewShotSpec("per-class-k", k=args.fewshot_k), seed)
            run_train = [corpus.Dialogue(id=f"fewshot-{seed}-{i}", domains=set(), turns=[t])
                         for i, (t, _) in enumerate(sampled)]
        elif args.fewshot_fraction is not None:
            run_train = evaluation.few_shot_sample(
                train_dialogues,
                evaluation.FewShotSpec("fraction", fraction=args.fewshot_fraction), seed)
        result = downstream.finetune(args.task, params, enc_cfg, vocab, run_train,
                                     dev_dialogues, cfg.train, seed,
                                     ontology=ontology, act_label_map=act_label_map)
        out_ckpt = Path(args.out) / f"model-seed{seed}.ckpt"
        meta = {"task": args.task, "label_space": result.label_space}
        trainer.save_model(out_ckpt, result.params, enc_cfg, meta)
        reports.append({"dev_loss": result.fit.best_metric})
    report = evaluation.make_report(args.task, reports, seeds, cfg.fingerprint())
    report.save(Path(args.out) / "report.json")
    print(report.to_json())
    return 0


def _predict_intent(params, enc_cfg, vocab, dialogues, label_space, max_len):
    preds, golds = [], []
    for d in dialogues:
        for t in d.turns:
            if t.intent is None:
                continue
            seq = tokenizer.encode_utterance(vocab, t.speaker, t.text, max_len)
            _, cls_idx = downstream.intent_forward(params, enc_cfg, seq)
            preds.append(label_space[cls_idx])
            golds.append(t.intent)
    return preds, golds


def _cmd_evaluate(args) -> int:
    cfg = RunConfig.from_file(args.config).with_seed(args.seed)
    params, enc_cfg, meta = trainer.load_model(args.model)
    vocab = tokenizer.load_vocab(args.vocab)
    dialogues = _load_corpus_normalized(args.data)
    max_len = cfg.train.max_len
    cfg.snapshot(args.out)

    if args.task == "intent":
        label_space = meta.get("label_space")
        if not label_space:
            raise ValueError("model checkpoint lacks an intent label space")
        preds, golds = _predict_intent(params, enc_cfg, vocab, dialogues,
                                       label_space, max_len)
        oos = args.oos_label if args.oos_label else "__none__"
        metrics = evaluation.intent_metrics(preds, golds, oos)
    elif args.task == "dst":
        if args.ontology is None:
            raise ValueError("dst evaluation requires --ontology")
        ontology = downstream.Ontology.from_file(args.ontology)
        value_embs = downstream.compute_value_embeddings(params, enc_cfg, vocab, ontology)
        examples = downstream.make_dst_examples(vocab, dialogues, ontology, max_len)
        preds, golds = [], []
        for seq, gold in examples:
            _, pred = downstream.dst_forward(params, enc_cfg, seq, ontology, value_embs)
            preds.append(pred)
            golds.append(gold)
        joint, slot = evaluation.dst_metrics(preds, golds)
        metrics = {"joint_goal_acc": joint, "slot_acc": slot}
    elif args.task == "act":
        label_space = meta.get("label_space")
        if not label_space:
            raise ValueError("model checkpoint lacks an act label space")
        examples, _ = downstream.make_act_examples(vocab, dialogues, max_len)
        preds, golds = [], []
        for seq, acts in examples:
            _, decisions = downstream.act_forward(params, enc_cfg, seq)
            preds.append({label_space[i] for i, on in enumerate(decisions) if on})
            golds.append(acts & set(label_space))
        micro, macro = evaluation.multilabel_f1(preds, golds, label_space)
        metrics = {"micro_f1": micro, "macro_f1": macro}
    else:  # rs
        pairs = downstream.make_rs_examples(vocab, dialogues, max_len=max_len)
        scorer = evaluation.encoder_rs_scorer(params, enc_cfg, vocab)
        metrics = {}
        for k in [int(x) for x in args.k.split(",")]:
            res = evaluation.k_of_100(scorer, pairs, k, num_seeds=args.num_seeds,
                                      base_seed=cfg.seed)
            metrics[f"{k}_of_100"] = res.mean
    if args.metrics is not None:
        wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
        unknown = [m for m in wanted if m not in metrics]
        if unknown:
            raise ValueError(f"unknown metrics {unknown}; available: {sorted(metrics)}")
        metrics = {m: metrics[m] for m in wanted}
    report = evaluation.make_report(args.task, [metrics], [cfg.seed], cfg.fingerprint())
    report.save(Path(args.out) / "report.json")
    print(report.to_json())
    return 0


def _cmd_probe(args) -> int:
    cfg = RunConfig.from_file(args.config).with_seed(args.seed)
    params, enc_cfg, _ = trainer.load_model(args.checkpoint)
    vocab = tokenizer.load_vocab(args.vocab)
    dialogues = _load_corpus_normalized(args.data)
    cfg.snapshot(args.out)
    if args.mode == "linear":
        result = evaluation.linear_probe(params, enc_cfg, vocab, args.task,
                                         dialogues, dialogues, cfg.train, cfg.seed)
        metrics = {"dev_loss": result.fit.best_metric}
    else:
        texts, labels = evaluation.extract_utterances(dialogues, args.speaker,
                                                      args.label_field)
        speaker = args.speaker if args.speaker != "all" else "system"
        seqs = [tokenizer.encode_utterance(vocab, speaker, t, cfg.train.max_len)
                for t in texts]
        vecs = downstream.encode_cls_batch(params, enc_cfg, seqs, vocab.pad_id)
        score = evaluation.clustering_probe(vecs, labels, args.clusters, cfg.seed)
        metrics = {"nmi": score}
    report = evaluation.make_report(f"probe-{args.mode}", [metrics], [cfg.seed],
                                    cfg.fingerprint())
    report.save(Path(args.out) / "report.json")
    print(report.to_json())
    return 0


def _cmd_export_embeddings(args) -> int:
    cfg = RunConfig.from_file(args.config).with_seed(args.seed)
    params, enc_cfg, _ = trainer.load_model(args.checkpoint)
    vocab = tokenizer.load_vocab(args.vocab)
    dialogues = _load_corpus_normalized(args.data)
    texts, labels = evaluation.extract_utterances(dialogues, args.speaker,
                                                  args.label_field)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    speaker = args.speaker if args.speaker != "all" else "system"
    evaluation.export_embeddings(params, enc_cfg, vocab, texts, labels, args.out,
                                 speaker=speaker, max_len=cfg.train.max_len,
                                 pca=args.pca)
    print(f"wrote {len(texts)} embeddings to {args.out}")
    return 0


_HANDLERS = {
    "unify": _cmd_unify,
    "stats": _cmd_stats,
    "synth": _cmd_synth,
    "train-tokenizer": _cmd_train_tokenizer,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "probe": _cmd_probe,
    "export-embeddings": _cmd_export_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
