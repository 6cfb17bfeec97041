"""Experiment orchestration: zero-shot transfer, ablations, sweeps, reports.

The surface mirrors the study design: a leave-one-domain-out zero-shot
benchmark against fixed baselines, an ablation grid over the domain-word
and discrete-prompt components plus the two prefix sites, and four
one-dimensional sweeps.  Every run is a pure function of (config
fingerprint, seed); reports serialize to JSON and emit Markdown, CSV,
and SVG artifacts byte-deterministically.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field, fields, asdict
from typing import Optional, Sequence

import numpy as np

from .tensor import ContractError
from .corpus import (Corpus, SyntheticSpec, SplitPlan, Tokenizer,
                     generate_synthetic_corpus, read_corpus_jsonl,
                     build_split, build_tokenizer, dialogue_tokens,
                     assemble_encoder_input, detokenize)
from .domain_words import (build_bow, fit_lda, top_domain_words,
                           build_prefix_sequence, corrupt_domain_words,
                           DEFAULT_DISTRACTORS)
from .model import EncoderDecoderModel, ModelConfig, PrefixBanks
from .prefix import (init_embeddings, PrefixMlp, PrefixProjections,
                     mlp_output_width, census, compute_banks,
                     precompute_targets, fit_mlp, save_checkpoint)
from .training import TrainConfig, run_training_loop, finetune_backbone
from . import evaluation

# default bench domain for ablations and sweeps; any domain works, this
# one sits mid-pack on transfer difficulty
DEFAULT_BENCH_DOMAIN = "taxi"

ABLATION_ARMS = ("full", "no_dw", "no_dp", "no_both",
                 "no_enc_prefix", "no_dec_prefix")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything a run needs; hashable to a reproduction fingerprint."""

    # corpus: JSONL path wins over the synthetic generator when set
    corpus_path: Optional[str] = None
    domains: tuple = ("restaurant", "hotel", "attraction", "taxi", "train")
    corpus_size: int = 300
    corpus_overlap: float = 0.5
    corpus_seed: int = 13

    # bench
    target_domain: Optional[str] = None
    seeds: tuple = (0, 1, 2)
    valid_size: int = 60
    train_per_domain: int = 50
    test_limit: int = 30
    few_shot_k: int = 0

    # backbone
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    ffn_hidden: int = 128
    max_encoder_len: int = 160
    max_decoder_len: int = 48
    d_m: int = 64
    backbone_seed: int = 0

    # domain-word extraction and prefix fitting
    prefix_len: int = 16
    lda_topics: int = 2
    lda_iterations: int = 300
    lda_seed: int = 7
    lda_top_k: int = 10
    fit_epochs: int = 200
    fit_lr: float = 1e-2
    alpha_init_scale: float = 0.125

    # prefix training
    epochs: int = 12
    batch_size: int = 2
    learning_rate: float = 1.5e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    valid_limit: int = 12
    valid_beam: int = 1
    valid_max_tokens: int = 24
    eval_beam: int = 2
    eval_max_tokens: int = 24

    # fine-tune baseline
    finetune_epochs: int = 4
    finetune_lr: float = 1e-3

    # ablation flags; compose freely
    no_dw: bool = False
    no_dp: bool = False
    no_enc_prefix: bool = False
    no_dec_prefix: bool = False

    # sweep definitions
    prefix_lengths: tuple = (8, 16, 24)
    noise_fractions: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    few_shot_ks: tuple = (0, 10, 50, 100)
    source_sizes: tuple = (10, 25, 50)

    def __post_init__(self):
        self.domains = tuple(self.domains)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.prefix_lengths = tuple(int(v) for v in self.prefix_lengths)
        self.noise_fractions = tuple(float(v) for v in self.noise_fractions)
        self.few_shot_ks = tuple(int(v) for v in self.few_shot_ks)
        self.source_sizes = tuple(int(v) for v in self.source_sizes)
        if not self.seeds:
            raise ContractError("seeds list must be nonempty")
        if self.prefix_len < 1:
            raise ContractError("prefix_len must be positive")
        if self.target_domain is not None and not self.corpus_path:
            if self.target_domain not in self.domains:
                raise ContractError(
                    f"target_domain {self.target_domain!r} not in domains")

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        obj = asdict(self)
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        obj = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ContractError(f"unknown config fields: {unknown}")
        return cls(**obj)

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True,
                             separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    # -- derived sub-configs ------------------------------------------------

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(domains=self.domains, size=self.corpus_size,
                             overlap=self.corpus_overlap,
                             seed=self.corpus_seed)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size,
                           num_layers=self.num_layers,
                           d_model=self.d_model,
                           num_heads=self.num_heads,
                           ffn_hidden=self.ffn_hidden,
                           max_encoder_len=self.max_encoder_len,
                           max_decoder_len=self.max_decoder_len,
                           d_m=self.d_m)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           initial_lr=self.learning_rate,
                           weight_decay=self.weight_decay,
                           grad_clip_norm=self.grad_clip, seed=seed)

    def finetune_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.finetune_epochs,
                           batch_size=self.batch_size,
                           initial_lr=self.finetune_lr,
                           weight_decay=self.weight_decay,
                           grad_clip_norm=self.grad_clip, seed=seed)


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    if cfg.corpus_path:
        return read_corpus_jsonl(cfg.corpus_path)
    return generate_synthetic_corpus(cfg.synthetic_spec())


# ---------------------------------------------------------------------------
# Bench: split, tokenizer, extracted domain words
# ---------------------------------------------------------------------------


@dataclass
class Bench:
    """Shared per-target scaffolding reused across seeds and arms."""

    target: str
    split: SplitPlan
    tokenizer: Tokenizer
    train_sub: list
    x_dw: list
    split_hash: str


def _split_hash(split: SplitPlan) -> str:
    payload = "|".join([",".join(split.train_ids), ",".join(split.valid_ids),
                        ",".join(split.test_ids)])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _train_subset(corpus: Corpus, split: SplitPlan,
                  per_source: int) -> list:
    """Quota per source domain; any few-shot target examples ride along."""
    by_dom: dict = {}
    for ex_id in split.train_ids:
        by_dom.setdefault(corpus.get(ex_id).domain, []).append(ex_id)
    sub: list = []
    for dom in sorted(by_dom):
        ids = by_dom[dom]
        sub.extend(ids if dom == split.target_domain else ids[:per_source])
    return sub


def extract_domain_words(cfg: ExperimentConfig, corpus: Corpus,
                         split: SplitPlan,
                         prefix_len: Optional[int] = None) -> list:
    """LDA over each source domain's training dialogues, interleaved."""
    want = prefix_len if prefix_len is not None else cfg.prefix_len
    by_dom: dict = {}
    for ex_id in split.train_ids:
        dom = corpus.get(ex_id).domain
        if dom != split.target_domain:
            by_dom.setdefault(dom, []).append(ex_id)
    lists = []
    for dom in sorted(by_dom):
        docs = [(dom, dialogue_tokens(corpus.get(i))) for i in by_dom[dom]]
        lda = fit_lda(build_bow(docs), num_topics=cfg.lda_topics,
                      iterations=cfg.lda_iterations, seed=cfg.lda_seed)
        lists.append(top_domain_words(lda, k=cfg.lda_top_k))
    return build_prefix_sequence(lists, want).words


def build_bench(cfg: ExperimentConfig, corpus: Corpus, target: str,
                few_shot_k: int = 0,
                source_size: Optional[int] = None) -> Bench:
    split = build_split(corpus, target, cfg.valid_size,
                        few_shot_k=few_shot_k, seed=0)
    tokenizer = build_tokenizer(corpus, split.train_ids)
    per_source = source_size if source_size is not None else cfg.train_per_domain
    train_sub = _train_subset(corpus, split, per_source)
    x_dw = extract_domain_words(cfg, corpus, split)
    return Bench(target=target, split=split, tokenizer=tokenizer,
                 train_sub=train_sub, x_dw=x_dw,
                 split_hash=_split_hash(split))


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    scores: dict
    best_epoch: int
    final_nll: float
    duration: float
    split_hash: str
    trainables_digest: str
    predictions_digest: str
    n_examples: int


def _params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()[:16]


def _score_predictions(model: EncoderDecoderModel, banks: PrefixBanks,
                       bench: Bench, cfg: ExperimentConfig, corpus: Corpus,
                       include_prompt: bool) -> tuple[dict, str, int]:
    scores = []
    preds = []
    for ex_id in bench.split.test_ids[:cfg.test_limit]:
        ex = corpus.get(ex_id)
        x_enc, _ = assemble_encoder_input(ex, bench.tokenizer,
                                          model.config.max_encoder_len,
                                          include_prompt=include_prompt)
        out = evaluation.beam_decode(model, banks, x_enc,
                                     beam_size=cfg.eval_beam,
                                     max_tokens=cfg.eval_max_tokens)
        pred = detokenize(bench.tokenizer.decode(out))
        preds.append(pred)
        scores.append(evaluation.rouge(pred, ex.summary) if pred.strip()
                      else None)
    mean = evaluation.mean_f1([s for s in scores if s is not None])
    if any(s is None for s in scores):
        # empty predictions count as zero, not as skipped examples
        kept = sum(1 for s in scores if s is not None)
        mean = {k: v * kept / len(scores) for k, v in mean.items()}
    digest = hashlib.sha256("\x1e".join(preds).encode("utf-8")).hexdigest()[:16]
    return mean, digest, len(scores)


def run_single(cfg: ExperimentConfig, corpus: Corpus, bench: Bench,
               seed: int, *, use_dw: bool, use_dp: bool,
               use_enc_prefix: bool = True, use_dec_prefix: bool = True,
               x_dw: Optional[Sequence[str]] = None,
               checkpoint_path: Optional[str] = None) -> RunResult:
    """One prefix-tuning run: init, fit, train, evaluate on the target."""
    t0 = time.time()
    tok = bench.tokenizer
    mcfg = cfg.model_config(tok.vocab_size)
    model = EncoderDecoderModel(mcfg, seed=cfg.backbone_seed)
    d_out = mlp_output_width(mcfg)
    words = list(x_dw) if x_dw is not None else list(bench.x_dw)
    if use_dw:
        emb = init_embeddings(words, cfg.d_m, seed=seed)
        targets = precompute_targets(model, tok, words)
        mlp = fit_mlp(emb, targets, epochs=cfg.fit_epochs,
                      lr=cfg.fit_lr, seed=seed).mlp
    else:
        emb = init_embeddings([f"s{i}" for i in range(len(words))],
                              cfg.d_m, seed=seed)
        mlp = PrefixMlp(cfg.d_m, d_out, seed=seed)
    proj = PrefixProjections(d_out, init_scale=cfg.alpha_init_scale)
    trainables = census(emb, mlp, proj)

    def make_banks() -> PrefixBanks:
        b = compute_banks(emb, mlp, proj, mcfg)
        return PrefixBanks(
            encoder_self=b.encoder_self if use_enc_prefix else None,
            decoder_self=b.decoder_self if use_dec_prefix else None,
            decoder_cross=b.decoder_cross if use_dec_prefix else None)

    res = run_training_loop(model, trainables, make_banks, tok, corpus,
                            bench.train_sub, bench.split.valid_ids,
                            cfg.train_config(seed), include_prompt=use_dp,
                            valid_limit=cfg.valid_limit,
                            valid_beam=cfg.valid_beam,
                            valid_max_tokens=cfg.valid_max_tokens)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, emb, mlp, proj, cfg.fingerprint())
    mean, pdigest, n_ex = _score_predictions(model, make_banks(), bench,
                                             cfg, corpus, use_dp)
    return RunResult(scores=mean, best_epoch=res.best_epoch,
                     final_nll=res.final_train_nll,
                     duration=time.time() - t0,
                     split_hash=bench.split_hash,
                     trainables_digest=_params_digest(trainables),
                     predictions_digest=pdigest, n_examples=n_ex)


def run_finetune(cfg: ExperimentConfig, corpus: Corpus, bench: Bench,
                 seed: int) -> RunResult:
    """Full-model fine-tune of the small backbone; no prefixes, no prompts."""
    t0 = time.time()
    tok = bench.tokenizer
    mcfg = cfg.model_config(tok.vocab_size)
    model = EncoderDecoderModel(mcfg, seed=cfg.backbone_seed)
    model.unfreeze()
    split = SplitPlan(bench.split.target_domain, bench.train_sub,
                      bench.split.valid_ids, bench.split.test_ids,
                      bench.split.few_shot_k)
    res = finetune_backbone(model, tok, corpus, split,
                            cfg.finetune_config(seed), include_prompt=False,
                            valid_limit=cfg.valid_limit,
                            valid_max_tokens=cfg.valid_max_tokens)
    mean, pdigest, n_ex = _score_predictions(model, PrefixBanks.empty(),
                                             bench, cfg, corpus, False)
    return RunResult(scores=mean, best_epoch=res.best_epoch,
                     final_nll=res.final_train_nll,
                     duration=time.time() - t0,
                     split_hash=bench.split_hash,
                     trainables_digest=_params_digest(dict(model.params)),
                     predictions_digest=pdigest, n_examples=n_ex)


def _extractive_cell(corpus: Corpus, bench: Bench, cfg: ExperimentConfig,
                     summarize) -> dict:
    scores = []
    for ex_id in bench.split.test_ids[:cfg.test_limit]:
        ex = corpus.get(ex_id)
        pred = summarize(ex)
        scores.append(evaluation.rouge(pred, ex.summary) if pred.strip()
                      else None)
    mean = evaluation.mean_f1([s for s in scores if s is not None])
    kept = sum(1 for s in scores if s is not None)
    if kept < len(scores) and scores:
        mean = {k: v * kept / len(scores) for k, v in mean.items()}
    mean["n"] = 1
    return mean


# ---------------------------------------------------------------------------
# Report type
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Aggregated results; serializes without durations for byte identity."""

    kind: str
    config_hash: str
    seeds: list
    tables: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    split_hashes: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    durations: dict = field(default_factory=dict)

    def to_json(self, include_durations: bool = False) -> str:
        obj = {"kind": self.kind, "config_hash": self.config_hash,
               "seeds": list(self.seeds), "tables": self.tables,
               "series": self.series, "split_hashes": self.split_hashes,
               "failures": list(self.failures)}
        if include_durations:
            obj["durations"] = self.durations
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        obj = json.loads(text)
        return cls(kind=obj["kind"], config_hash=obj["config_hash"],
                   seeds=list(obj["seeds"]), tables=obj.get("tables", {}),
                   series=obj.get("series", {}),
                   split_hashes=obj.get("split_hashes", {}),
                   failures=list(obj.get("failures", [])),
                   durations=dict(obj.get("durations", {})))


def _cell(per_seed: Sequence[dict]) -> dict:
    """Mean over seeds; every cell records how many seeds it averages."""
    n = len(per_seed)
    if n == 0:
        return {"r1": 0.0, "r2": 0.0, "rl": 0.0, "n": 0}
    return {"r1": sum(s["r1"] for s in per_seed) / n,
            "r2": sum(s["r2"] for s in per_seed) / n,
            "rl": sum(s["rl"] for s in per_seed) / n, "n": n}


def _series_point(x: float, per_seed: Sequence[dict]) -> dict:
    point = _cell(per_seed)
    point["x"] = float(x)
    rls = [s["rl"] for s in per_seed]
    if len(rls) > 1:
        mean = sum(rls) / len(rls)
        var = sum((v - mean) ** 2 for v in rls) / (len(rls) - 1)
        point["rl_se"] = math.sqrt(var / len(rls))
    else:
        point["rl_se"] = 0.0
    return point


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------


def _bench_target(cfg: ExperimentConfig, corpus: Corpus) -> str:
    if cfg.target_domain is not None:
        return cfg.target_domain
    if DEFAULT_BENCH_DOMAIN in corpus.domains:
        return DEFAULT_BENCH_DOMAIN
    return sorted(corpus.domains)[0]


def run_zero_shot(cfg: ExperimentConfig,
                  corpus: Optional[Corpus] = None) -> ExperimentReport:
    """Every domain as target: DOP vs prefix-tuning, fine-tune, Lead-3, Oracle."""
    corpus = corpus if corpus is not None else load_corpus(cfg)
    report = ExperimentReport(kind="zero_shot",
                              config_hash=cfg.fingerprint(),
                              seeds=list(cfg.seeds))
    systems = ("dop", "prefix", "finetune", "lead3", "oracle")
    for name in systems:
        report.tables[name] = {}
    for target in sorted(corpus.domains):
        try:
            bench = build_bench(cfg, corpus, target)
        except Exception as exc:   # pragma: no cover - corpus-dependent
            report.failures.append(f"bench/{target}: {exc}")
            continue
        report.split_hashes[f"zero_shot/{target}"] = bench.split_hash
        for name, runner in (
                ("dop", lambda s: run_single(cfg, corpus, bench, s,
                                             use_dw=True, use_dp=True)),
                ("prefix", lambda s: run_single(cfg, corpus, bench, s,
                                                use_dw=False, use_dp=False)),
                ("finetune", lambda s: run_finetune(cfg, corpus, bench, s))):
            per_seed = []
            for seed in cfg.seeds:
                try:
                    rr = runner(seed)
                except Exception as exc:
                    report.failures.append(f"{name}/{target}/seed{seed}: {exc}")
                    continue
                per_seed.append(rr.scores)
                report.durations[f"{name}/{target}/seed{seed}"] = rr.duration
            report.tables[name][target] = _cell(per_seed)
        report.tables["lead3"][target] = _extractive_cell(
            corpus, bench, cfg, evaluation.lead3)
        report.tables["oracle"][target] = _extractive_cell(
            corpus, bench, cfg, evaluation.oracle_greedy)
    return report


def run_ablations(cfg: ExperimentConfig,
                  corpus: Optional[Corpus] = None) -> ExperimentReport:
    """Six arms on one target with shared seeds and one shared split."""
    corpus = corpus if corpus is not None else load_corpus(cfg)
    target = _bench_target(cfg, corpus)
    report = ExperimentReport(kind="ablations",
                              config_hash=cfg.fingerprint(),
                              seeds=list(cfg.seeds))
    bench = build_bench(cfg, corpus, target)
    report.tables["ablation"] = {}
    flags = {
        "full": dict(use_dw=True, use_dp=True),
        "no_dw": dict(use_dw=False, use_dp=True),
        "no_dp": dict(use_dw=True, use_dp=False),
        "no_both": dict(use_dw=False, use_dp=False),
        "no_enc_prefix": dict(use_dw=True, use_dp=True,
                              use_enc_prefix=False),
        "no_dec_prefix": dict(use_dw=True, use_dp=True,
                              use_dec_prefix=False),
    }
    for arm in ABLATION_ARMS:
        report.split_hashes[f"ablation/{arm}"] = bench.split_hash
        per_seed = []
        for seed in cfg.seeds:
            try:
                rr = run_single(cfg, corpus, bench, seed, **flags[arm])
            except Exception as exc:
                report.failures.append(f"{arm}/{target}/seed{seed}: {exc}")
                continue
            per_seed.append(rr.scores)
            report.durations[f"{arm}/{target}/seed{seed}"] = rr.duration
        report.tables["ablation"][arm] = _cell(per_seed)
    return report


def run_sweeps(cfg: ExperimentConfig,
               corpus: Optional[Corpus] = None) -> ExperimentReport:
    """Prefix-length, noise, few-shot, and source-size sweeps on one target."""
    if not (cfg.prefix_lengths or cfg.noise_fractions or cfg.few_shot_ks
            or cfg.source_sizes):
        raise ContractError("run_sweeps: every sweep list is empty")
    corpus = corpus if corpus is not None else load_corpus(cfg)
    target = _bench_target(cfg, corpus)
    report = ExperimentReport(kind="sweeps", config_hash=cfg.fingerprint(),
                              seeds=list(cfg.seeds))
    bench = build_bench(cfg, corpus, target)
    report.split_hashes[f"sweeps/{target}"] = bench.split_hash

    def collect(series_name: str, x: float, make_run) -> None:
        per_seed = []
        for seed in cfg.seeds:
            try:
                rr = make_run(seed)
            except Exception as exc:
                report.failures.append(
                    f"{series_name}/x={x:g}/seed{seed}: {exc}")
                continue
            per_seed.append(rr.scores)
            report.durations[f"{series_name}/x={x:g}/seed{seed}"] = rr.duration
        report.series.setdefault(series_name, []).append(
            _series_point(x, per_seed))

    for length in cfg.prefix_lengths:
        words = extract_domain_words(cfg, corpus, bench.split,
                                     prefix_len=length)
        collect("prefix_length", length,
                lambda s, w=words: run_single(cfg, corpus, bench, s,
                                              use_dw=True, use_dp=True,
                                              x_dw=w))
    for frac in cfg.noise_fractions:
        collect("noise", frac,
                lambda s, f=frac: run_single(
                    cfg, corpus, bench, s, use_dw=True, use_dp=True,
                    x_dw=corrupt_domain_words(bench.x_dw, f,
                                              DEFAULT_DISTRACTORS, seed=s)))
    for k in cfg.few_shot_ks:
        bench_k = build_bench(cfg, corpus, target, few_shot_k=k)
        report.split_hashes[f"few_shot/k={k}"] = bench_k.split_hash
        collect("few_shot", k,
                lambda s, b=bench_k: run_single(cfg, corpus, b, s,
                                                use_dw=True, use_dp=True))
    for size in cfg.source_sizes:
        bench_n = build_bench(cfg, corpus, target, source_size=size)
        collect("source_size", size,
                lambda s, b=bench_n: run_single(cfg, corpus, b, s,
                                                use_dw=True, use_dp=True))
    return report


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


_SVG_W, _SVG_H = 480, 320
_SVG_ML, _SVG_MR, _SVG_MT, _SVG_MB = 56, 16, 28, 40


def _svg_line_plot(title: str, points: Sequence[dict]) -> str:
    xs = [p["x"] for p in points]
    ys = [p["rl"] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1e-6
    inner_w = _SVG_W - _SVG_ML - _SVG_MR
    inner_h = _SVG_H - _SVG_MT - _SVG_MB

    def px(x: float) -> float:
        return _SVG_ML + (x - x_lo) / (x_hi - x_lo) * inner_w

    def py(y: float) -> float:
        return _SVG_MT + (1.0 - (y - y_lo) / (y_hi - y_lo)) * inner_h

    path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
        f'height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W / 2:.0f}" y="18" text-anchor="middle" '
        f'font-family="monospace" font-size="13">{title}</text>',
        f'<line x1="{_SVG_ML}" y1="{_SVG_MT + inner_h}" '
        f'x2="{_SVG_ML + inner_w}" y2="{_SVG_MT + inner_h}" '
        f'stroke="black"/>',
        f'<line x1="{_SVG_ML}" y1="{_SVG_MT}" x2="{_SVG_ML}" '
        f'y2="{_SVG_MT + inner_h}" stroke="black"/>',
        f'<text x="{_SVG_ML}" y="{_SVG_H - 12}" text-anchor="middle" '
        f'font-family="monospace" font-size="11">{x_lo:g}</text>',
        f'<text x="{_SVG_ML + inner_w}" y="{_SVG_H - 12}" '
        f'text-anchor="middle" font-family="monospace" '
        f'font-size="11">{x_hi:g}</text>',
        f'<text x="{_SVG_ML - 6}" y="{_SVG_MT + inner_h:.0f}" '
        f'text-anchor="end" font-family="monospace" '
        f'font-size="11">{y_lo:.3f}</text>',
        f'<text x="{_SVG_ML - 6}" y="{_SVG_MT + 4}" text-anchor="end" '
        f'font-family="monospace" font-size="11">{y_hi:.3f}</text>',
        f'<polyline points="{path}" fill="none" stroke="steelblue" '
        f'stroke-width="2"/>',
    ]
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" '
                     f'fill="steelblue"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _markdown_table(rows: dict) -> list:
    lines = ["| row | R-1 | R-2 | R-L | seeds |",
             "| --- | --- | --- | --- | --- |"]
    for row in sorted(rows):
        c = rows[row]
        lines.append(f"| {row} | {c['r1']:.4f} | {c['r2']:.4f} "
                     f"| {c['rl']:.4f} | {c['n']} |")
    return lines


def emit_report(report: ExperimentReport, out_dir: str) -> list:
    """Write Markdown tables, per-sweep CSV, and per-sweep SVG plots.

    Re-emitting the same report produces byte-identical files; durations
    never reach disk.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    md = [f"# Experiment report: {report.kind}", "",
          f"- config hash: `{report.config_hash}`",
          f"- seeds: {', '.join(str(s) for s in report.seeds)}", ""]
    for name in sorted(report.tables):
        md.append(f"## {name}")
        md.append("")
        md.extend(_markdown_table(report.tables[name]))
        md.append("")
    for name in sorted(report.series):
        points = report.series[name]
        md.append(f"## sweep: {name}")
        md.append("")
        md.append("| x | R-1 | R-2 | R-L | R-L s.e. | seeds |")
        md.append("| --- | --- | --- | --- | --- | --- |")
        for p in points:
            md.append(f"| {p['x']:g} | {p['r1']:.4f} | {p['r2']:.4f} "
                      f"| {p['rl']:.4f} | {p['rl_se']:.4f} | {p['n']} |")
        md.append("")
    if report.split_hashes:
        md.append("## split hashes")
        md.append("")
        for key in sorted(report.split_hashes):
            md.append(f"- `{key}`: `{report.split_hashes[key]}`")
        md.append("")
    if report.failures:
        md.append("## failures")
        md.append("")
        for marker in report.failures:
            md.append(f"- {marker}")
        md.append("")
    md_path = os.path.join(out_dir, "report.md")
    with open(md_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(md))
    written.append(md_path)

    for name in sorted(report.series):
        points = report.series[name]
        csv_path = os.path.join(out_dir, f"sweep_{name}.csv")
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("x,r1,r2,rl,rl_se,n\n")
            for p in points:
                fh.write(f"{p['x']:g},{p['r1']:.6f},{p['r2']:.6f},"
                         f"{p['rl']:.6f},{p['rl_se']:.6f},{p['n']}\n")
        written.append(csv_path)
        if points:
            svg_path = os.path.join(out_dir, f"sweep_{name}.svg")
            with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(_svg_line_plot(f"{name} (mean R-L)", points))
            written.append(svg_path)

    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    written.append(json_path)
    return written
