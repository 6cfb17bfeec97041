"""Prefix training loop, AdamW with linear decay, few-shot continuation.

Only the prefix parameters (embedding, MLP, site heads) receive optimizer
state; the backbone's checksum is asserted unchanged around every run.  Each
batch accumulates per-example gradients (sequences are not padded; every
example contributes its token-mean NLL with equal weight), then takes one
clipped AdamW step.  Model selection is by validation ROUGE-L, falling back
to train NLL when no validation examples are supplied.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import evaluation
from .corpus import (BOS, Corpus, SplitPlan, Tokenizer, assemble_encoder_input,
                     detokenize, summary_target_ids)
from .model import EncoderDecoderModel, PrefixBanks
from .prefix import (PrefixEmbedding, PrefixMlp, PrefixProjections, census,
                     compute_banks)
from .tensor import ContractError, Tape, Tensor, add


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 5
    initial_lr: float = 5e-5
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.initial_lr <= 0:
            raise ContractError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class OptimizerState:
    total_steps: int
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor],
                   total_steps: int) -> "OptimizerState":
        state = cls(total_steps=total_steps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def linear_lr(initial_lr: float, step: int, total_steps: int) -> float:
    """Linear decay to zero; exactly 0 at step == total_steps."""
    frac = 1.0 - step / max(total_steps, 1)
    return initial_lr * max(frac, 0.0)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            p.grad *= scale
    return norm


def optimizer_step(params: dict[str, Tensor], state: OptimizerState,
                   cfg: TrainConfig) -> OptimizerState:
    """One clipped AdamW update with bias correction and decoupled decay.

    The schedule factor multiplies both the gradient step and the weight
    decay, so at the schedule endpoint the step is a complete no-op.
    """
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    if set(params) != set(state.m):
        raise ContractError("optimizer state does not match parameter census")
    clip_global_norm(params, cfg.grad_clip_norm)
    lr_t = linear_lr(cfg.initial_lr, state.step, state.total_steps)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        mhat = state.m[name] / (1 - beta1 ** t)
        vhat = state.v[name] / (1 - beta2 ** t)
        if cfg.weight_decay:
            p.data -= lr_t * cfg.weight_decay * p.data
        p.data -= lr_t * mhat / (np.sqrt(vhat) + eps)
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list[dict]
    best_epoch: int
    best_valid_rl: float
    final_train_nll: float
    aborted: bool
    phi_checksum_before: str
    phi_checksum_after: str


def write_metrics_csv(path: str, metrics: Sequence[dict]) -> None:
    fields = ["epoch", "train_nll", "valid_r1", "valid_r2", "valid_rl", "lr"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: row[k] for k in fields})


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, t in params.items():
        t.data[...] = snap[k]


def _evaluate_rouge(model: EncoderDecoderModel, banks: PrefixBanks,
                    tokenizer: Tokenizer, corpus: Corpus, ids: Sequence[str],
                    include_prompt: bool, beam_size: int,
                    max_tokens: int) -> dict[str, float]:
    scores = []
    for ex_id in ids:
        ex = corpus.get(ex_id)
        x_enc, _ = assemble_encoder_input(ex, tokenizer,
                                          model.config.max_encoder_len,
                                          include_prompt=include_prompt)
        out = evaluation.beam_decode(model, banks, x_enc, beam_size=beam_size,
                                     max_tokens=max_tokens)
        pred = detokenize(tokenizer.decode(out))
        if not pred:
            scores.append(evaluation.RougeScore(
                evaluation.Prf(0, 0, 0), evaluation.Prf(0, 0, 0),
                evaluation.Prf(0, 0, 0)))
        else:
            scores.append(evaluation.rouge(pred, ex.summary))
    return evaluation.mean_f1(scores)


def run_training_loop(model: EncoderDecoderModel,
                      trainables: dict[str, Tensor],
                      make_banks: Callable[[], PrefixBanks],
                      tokenizer: Tokenizer, corpus: Corpus,
                      train_ids: Sequence[str], valid_ids: Sequence[str],
                      cfg: TrainConfig, include_prompt: bool = True,
                      valid_limit: Optional[int] = None,
                      valid_beam: int = 1, valid_max_tokens: int = 32,
                      expect_frozen_backbone: bool = True) -> TrainResult:
    """Shared engine for prefix training and the fine-tune baseline."""
    if not train_ids:
        raise ContractError("empty train split")
    if expect_frozen_backbone and not model.frozen:
        raise ContractError("backbone must be frozen for prefix training")
    phi_before = model.checksum()
    eval_ids = list(valid_ids)[:valid_limit] if valid_limit else list(valid_ids)
    order = list(train_ids)
    rng = random.Random(cfg.seed)
    steps_per_epoch = (len(order) + cfg.batch_size - 1) // cfg.batch_size
    state = OptimizerState.for_params(trainables, cfg.epochs * steps_per_epoch)
    best = _snapshot(trainables)
    best_rl = -1.0
    best_nll = float("inf")
    best_epoch = 0
    metrics: list[dict] = []
    aborted = False
    final_nll = float("nan")
    for epoch in range(1, cfg.epochs + 1):
        # census assertion: optimizer state covers exactly the trainables,
        # and a frozen backbone contributes none of them
        if set(state.m) != set(trainables):
            raise ContractError("optimizer census drifted from trainables")
        if expect_frozen_backbone:
            assert all(not t.requires_grad for t in model.params.values())
        rng.shuffle(order)
        epoch_loss = 0.0
        nan_hit = False
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for p in trainables.values():
                p.zero_grad()
            with Tape() as tape:
                banks = make_banks()
                total = None
                for ex_id in batch:
                    ex = corpus.get(ex_id)
                    x_enc, _ = assemble_encoder_input(
                        ex, tokenizer, model.config.max_encoder_len,
                        include_prompt=include_prompt)
                    nll = model.sequence_nll(
                        x_enc, summary_target_ids(ex, tokenizer), banks, BOS)
                    total = nll if total is None else add(total, nll)
            value = total.item()
            if not np.isfinite(value):
                nan_hit = True
                break
            epoch_loss += value
            tape.backward(total, grad_scale=1.0 / len(batch))
            state = optimizer_step(trainables, state, cfg)
        if nan_hit:
            aborted = True
            _restore(trainables, best)
            break
        train_nll = epoch_loss / len(order)
        final_nll = train_nll
        banks = make_banks()
        valid_scores = (_evaluate_rouge(model, banks, tokenizer, corpus,
                                        eval_ids, include_prompt, valid_beam,
                                        valid_max_tokens)
                        if eval_ids else {"r1": 0.0, "r2": 0.0, "rl": 0.0})
        lr_now = linear_lr(cfg.initial_lr, state.step, state.total_steps)
        metrics.append({"epoch": epoch, "train_nll": train_nll,
                        "valid_r1": valid_scores["r1"],
                        "valid_r2": valid_scores["r2"],
                        "valid_rl": valid_scores["rl"], "lr": lr_now})
        # model selection: validation ROUGE-L when a valid set exists,
        # otherwise lowest train NLL (e.g. pure overfitting runs)
        if eval_ids:
            improved = valid_scores["rl"] > best_rl
        else:
            improved = train_nll < best_nll
        if improved:
            best_rl = valid_scores["rl"]
            best_nll = train_nll
            best_epoch = epoch
            best = _snapshot(trainables)
    _restore(trainables, best)
    phi_after = model.checksum()
    if expect_frozen_backbone and phi_after != phi_before:
        raise ContractError("frozen backbone changed during training")
    return TrainResult(metrics=metrics, best_epoch=best_epoch,
                       best_valid_rl=max(best_rl, 0.0),
                       final_train_nll=final_nll, aborted=aborted,
                       phi_checksum_before=phi_before,
                       phi_checksum_after=phi_after)


def train(model: EncoderDecoderModel, emb: PrefixEmbedding, mlp: PrefixMlp,
          proj: PrefixProjections, tokenizer: Tokenizer, corpus: Corpus,
          split: SplitPlan, cfg: TrainConfig, include_prompt: bool = True,
          use_encoder_prefix: bool = True, use_decoder_prefix: bool = True,
          valid_limit: Optional[int] = None,
          valid_max_tokens: int = 32) -> TrainResult:
    """Train the prefix stack on the split's source-domain examples.

    Site toggles drop the encoder or decoder banks for the ablations; the
    parameters still train through the remaining sites.
    """
    trainables = census(emb, mlp, proj)

    def make_banks() -> PrefixBanks:
        banks = compute_banks(emb, mlp, proj, model.config)
        return PrefixBanks(
            encoder_self=banks.encoder_self if use_encoder_prefix else None,
            decoder_self=banks.decoder_self if use_decoder_prefix else None,
            decoder_cross=banks.decoder_cross if use_decoder_prefix else None)

    return run_training_loop(model, trainables, make_banks, tokenizer, corpus,
                             split.train_ids, split.valid_ids, cfg,
                             include_prompt=include_prompt,
                             valid_limit=valid_limit,
                             valid_max_tokens=valid_max_tokens)


def few_shot_continue(model: EncoderDecoderModel, emb: PrefixEmbedding,
                      mlp: PrefixMlp, proj: PrefixProjections,
                      tokenizer: Tokenizer, corpus: Corpus, split: SplitPlan,
                      cfg: TrainConfig, **kwargs) -> TrainResult:
    """Resume training on a split holding k > 0 target-domain examples."""
    if split.few_shot_k <= 0:
        raise ContractError("few_shot_continue needs a split with k > 0")
    return train(model, emb, mlp, proj, tokenizer, corpus, split, cfg, **kwargs)


def finetune_backbone(model: EncoderDecoderModel, tokenizer: Tokenizer,
                      corpus: Corpus, split: SplitPlan, cfg: TrainConfig,
                      include_prompt: bool = True,
                      valid_limit: Optional[int] = None,
                      valid_max_tokens: int = 32) -> TrainResult:
    """Upper-bound baseline: update every backbone parameter, no prefixes."""
    if model.frozen:
        raise ContractError("finetune_backbone needs an unfrozen model")
    return run_training_loop(model, dict(model.params),
                             PrefixBanks.empty, tokenizer, corpus,
                             split.train_ids, split.valid_ids, cfg,
                             include_prompt=include_prompt,
                             valid_limit=valid_limit,
                             valid_max_tokens=valid_max_tokens,
                             expect_frozen_backbone=False)
