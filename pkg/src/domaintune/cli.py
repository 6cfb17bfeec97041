"""Command-line front door.

Subcommands cover the whole workflow: corpus generation, domain-word
extraction, prefix fitting, training, evaluation, the three experiment
drivers, and report re-emission.  All file artifacts are deterministic
given (config hash, seed); wall-clock timings go to stderr only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Optional, Sequence

from .tensor import ContractError
from .corpus import (write_corpus_jsonl, assemble_encoder_input, detokenize)
from .model import EncoderDecoderModel, PrefixBanks
from .prefix import compute_banks, load_checkpoint
from . import evaluation
from .experiments import (ExperimentConfig, ExperimentReport, load_corpus,
                          build_bench, run_single, run_zero_shot,
                          run_ablations, run_sweeps, emit_report,
                          _bench_target)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domaintune",
        description="domain-adaptive prefix tuning for dialogue summarization")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--target-domain")
        p.add_argument("--seed", type=int)
        p.add_argument("--prefix-len", type=int)
        p.add_argument("--few-shot-k", type=int)
        p.add_argument("--out-dir", default="out")
        p.add_argument("--no-dw", action="store_true",
                       help="random prefix init instead of domain words")
        p.add_argument("--no-dp", action="store_true",
                       help="drop the serialized-state discrete prompt")
        p.add_argument("--no-enc-prefix", action="store_true")
        p.add_argument("--no-dec-prefix", action="store_true")

    for name in ("gen-corpus", "extract-words", "fit-prefix", "train",
                 "zero-shot", "ablate", "sweep"):
        common(sub.add_parser(name))

    p_eval = sub.add_parser("eval")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True,
                        help="trained prefix checkpoint to evaluate")

    p_report = sub.add_parser("report")
    p_report.add_argument("report_json", help="saved report.json to re-emit")
    p_report.add_argument("--out-dir", default="out")
    return parser


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = ExperimentConfig.from_json(fh.read())
    else:
        cfg = ExperimentConfig()
    if getattr(args, "target_domain", None) is not None:
        cfg.target_domain = args.target_domain
    if getattr(args, "seed", None) is not None:
        cfg.seeds = (args.seed,)
    if getattr(args, "prefix_len", None) is not None:
        cfg.prefix_len = args.prefix_len
    if getattr(args, "few_shot_k", None) is not None:
        cfg.few_shot_k = args.few_shot_k
    for flag in ("no_dw", "no_dp", "no_enc_prefix", "no_dec_prefix"):
        if getattr(args, flag, False):
            setattr(cfg, flag, True)
    return cfg


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_gen_corpus(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    corpus = load_corpus(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "corpus.jsonl")
    write_corpus_jsonl(corpus, path)
    print(f"{path}: {len(corpus.examples)} examples, "
          f"{len(corpus.domains)} domains")
    return 0


def _cmd_extract_words(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    corpus = load_corpus(cfg)
    target = _bench_target(cfg, corpus)
    bench = build_bench(cfg, corpus, target)
    path = os.path.join(args.out_dir, "domain_words.json")
    _write_text(path, json.dumps({"target_domain": target,
                                  "x_dw": bench.x_dw},
                                 sort_keys=True, indent=2) + "\n")
    print(f"{path}: {len(bench.x_dw)} words for target {target!r}")
    return 0


def _cmd_fit_prefix(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    from .prefix import (init_embeddings, precompute_targets, fit_mlp,
                         PrefixProjections, mlp_output_width, save_checkpoint)
    corpus = load_corpus(cfg)
    target = _bench_target(cfg, corpus)
    bench = build_bench(cfg, corpus, target)
    seed = cfg.seeds[0]
    mcfg = cfg.model_config(bench.tokenizer.vocab_size)
    model = EncoderDecoderModel(mcfg, seed=cfg.backbone_seed)
    emb = init_embeddings(bench.x_dw, cfg.d_m, seed=seed)
    targets = precompute_targets(model, bench.tokenizer, bench.x_dw)
    fit = fit_mlp(emb, targets, epochs=cfg.fit_epochs, lr=cfg.fit_lr,
                  seed=seed)
    proj = PrefixProjections(mlp_output_width(mcfg),
                             init_scale=cfg.alpha_init_scale)
    path = os.path.join(args.out_dir, "prefix_init.ckpt")
    os.makedirs(args.out_dir, exist_ok=True)
    save_checkpoint(path, emb, fit.mlp, proj, cfg.fingerprint())
    print(f"{path}: mse {fit.initial_mse:.6f} -> {fit.final_mse:.6f}")
    return 0


def _cmd_train(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    corpus = load_corpus(cfg)
    target = _bench_target(cfg, corpus)
    bench = build_bench(cfg, corpus, target,
                        few_shot_k=cfg.few_shot_k)
    seed = cfg.seeds[0]
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "prefix_trained.ckpt")
    t0 = time.time()
    rr = run_single(cfg, corpus, bench, seed,
                    use_dw=not cfg.no_dw, use_dp=not cfg.no_dp,
                    use_enc_prefix=not cfg.no_enc_prefix,
                    use_dec_prefix=not cfg.no_dec_prefix,
                    checkpoint_path=ckpt)
    _note(f"train: {time.time() - t0:.1f}s")
    metrics = {"target_domain": target, "seed": seed,
               "scores": rr.scores, "best_epoch": rr.best_epoch,
               "split_hash": rr.split_hash,
               "trainables_digest": rr.trainables_digest,
               "predictions_digest": rr.predictions_digest}
    _write_text(os.path.join(args.out_dir, "train_metrics.json"),
                json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    print(f"{ckpt}: R-L {rr.scores['rl']:.4f} "
          f"(best epoch {rr.best_epoch})")
    return 0


def _cmd_eval(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    corpus = load_corpus(cfg)
    target = _bench_target(cfg, corpus)
    bench = build_bench(cfg, corpus, target, few_shot_k=cfg.few_shot_k)
    emb, mlp, proj = load_checkpoint(args.checkpoint, cfg.fingerprint())
    mcfg = cfg.model_config(bench.tokenizer.vocab_size)
    model = EncoderDecoderModel(mcfg, seed=cfg.backbone_seed)
    full = compute_banks(emb, mlp, proj, mcfg)
    banks = PrefixBanks(
        encoder_self=None if cfg.no_enc_prefix else full.encoder_self,
        decoder_self=None if cfg.no_dec_prefix else full.decoder_self,
        decoder_cross=None if cfg.no_dec_prefix else full.decoder_cross)
    include_prompt = not cfg.no_dp
    lines = []
    scores = []
    for ex_id in bench.split.test_ids[:cfg.test_limit]:
        ex = corpus.get(ex_id)
        x_enc, _ = assemble_encoder_input(ex, bench.tokenizer,
                                          mcfg.max_encoder_len,
                                          include_prompt=include_prompt)
        out = evaluation.beam_decode(model, banks, x_enc,
                                     beam_size=cfg.eval_beam,
                                     max_tokens=cfg.eval_max_tokens)
        pred = detokenize(bench.tokenizer.decode(out))
        sc = evaluation.rouge(pred, ex.summary) if pred.strip() else None
        scores.append(sc)
        lines.append(json.dumps(
            {"id": ex.id, "prediction": pred,
             "r1": sc.r1.f1 if sc else 0.0,
             "r2": sc.r2.f1 if sc else 0.0,
             "rl": sc.rl.f1 if sc else 0.0}, sort_keys=True))
    kept = [s for s in scores if s is not None]
    mean = evaluation.mean_f1(kept)
    if len(kept) < len(scores) and scores:
        mean = {k: v * len(kept) / len(scores) for k, v in mean.items()}
    path = os.path.join(args.out_dir, "predictions.jsonl")
    _write_text(path, "\n".join(lines) + "\n")
    print(f"{path}: R-1 {mean['r1']:.4f} R-2 {mean['r2']:.4f} "
          f"R-L {mean['rl']:.4f} over {len(scores)} examples")
    return 0


def _cmd_experiment(cfg: ExperimentConfig, args: argparse.Namespace,
                    driver) -> int:
    t0 = time.time()
    report = driver(cfg)
    _note(f"{args.command}: {time.time() - t0:.1f}s")
    written = emit_report(report, args.out_dir)
    for path in written:
        print(path)
    if report.failures:
        for marker in report.failures:
            _note(f"failed: {marker}")
        return 1
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    with open(args.report_json, "r", encoding="utf-8") as fh:
        report = ExperimentReport.from_json(fh.read())
    for path in emit_report(report, args.out_dir):
        print(path)
    return 1 if report.failures else 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return _cmd_report(args)
        cfg = _load_config(args)
        if args.command == "gen-corpus":
            return _cmd_gen_corpus(cfg, args)
        if args.command == "extract-words":
            return _cmd_extract_words(cfg, args)
        if args.command == "fit-prefix":
            return _cmd_fit_prefix(cfg, args)
        if args.command == "train":
            return _cmd_train(cfg, args)
        if args.command == "eval":
            return _cmd_eval(cfg, args)
        if args.command == "zero-shot":
            return _cmd_experiment(cfg, args, run_zero_shot)
        if args.command == "ablate":
            return _cmd_experiment(cfg, args, run_ablations)
        if args.command == "sweep":
            return _cmd_experiment(cfg, args, run_sweeps)
        raise ContractError(f"unknown command {args.command!r}")
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
