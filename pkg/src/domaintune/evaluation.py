"""ROUGE metrics, beam-search decoding, and extractive baselines.

ROUGE tokenization is lowercase alphanumeric-only (punctuation dropped, no
stemming).  R-1/R-2 use clipped n-gram counts; R-L uses the dynamic-program
longest common subsequence.  All three report precision/recall/F1.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import BOS, EOS, DialogueExample
from .model import EncoderDecoderModel, PrefixBanks
from .tensor import ContractError

_ROUGE_WORD_RE = re.compile(r"[a-z0-9]+")
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


def rouge_tokenize(text: str) -> list[str]:
    return _ROUGE_WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Prf:
    precision: float
    recall: float
    f1: float


def _prf(overlap: int, cand_total: int, ref_total: int) -> Prf:
    p = overlap / cand_total if cand_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return Prf(p, r, f)


@dataclass(frozen=True)
class RougeScore:
    r1: Prf
    r2: Prf
    rl: Prf

    def as_dict(self) -> dict:
        return {m: {"precision": s.precision, "recall": s.recall, "f1": s.f1}
                for m, s in (("r1", self.r1), ("r2", self.r2), ("rl", self.rl))}


def _ngram_prf(cand: list[str], ref: list[str], n: int) -> Prf:
    cand_grams = Counter(tuple(cand[i:i + n]) for i in range(len(cand) - n + 1))
    ref_grams = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
    overlap = sum(min(c, ref_grams[g]) for g, c in cand_grams.items())
    return _prf(overlap, sum(cand_grams.values()), sum(ref_grams.values()))


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge(candidate: str, reference: str) -> RougeScore:
    ref = rouge_tokenize(reference)
    if not ref:
        raise ContractError("rouge: reference has no tokens")
    cand = rouge_tokenize(candidate)
    lcs = _lcs_length(cand, ref)
    return RougeScore(r1=_ngram_prf(cand, ref, 1), r2=_ngram_prf(cand, ref, 2),
                      rl=_prf(lcs, len(cand), len(ref)))


def mean_f1(scores: Sequence[RougeScore]) -> dict[str, float]:
    if not scores:
        return {"r1": 0.0, "r2": 0.0, "rl": 0.0}
    n = len(scores)
    return {"r1": sum(s.r1.f1 for s in scores) / n,
            "r2": sum(s.r2.f1 for s in scores) / n,
            "rl": sum(s.rl.f1 for s in scores) / n}


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - math.log(np.exp(z).sum())


def _repeated_trigram_tokens(ids: Sequence[int]) -> set[int]:
    """Tokens whose emission would repeat a trigram already in ``ids``."""
    if len(ids) < 3:
        return set()
    tail = (ids[-2], ids[-1])
    out: set[int] = set()
    for i in range(len(ids) - 2):
        if (ids[i], ids[i + 1]) == tail:
            out.add(ids[i + 2])
    return out


def beam_decode(model: EncoderDecoderModel, banks: PrefixBanks,
                x_enc: Sequence[int], beam_size: int = 6,
                max_tokens: int = 125, length_norm: float = 1.0,
                bos_id: int = BOS, eos_id: int = EOS) -> list[int]:
    """Length-normalized beam search; returns generated ids without BOS/EOS.

    Candidates are ordered by total log-probability with ties broken by
    token id, so decoding is fully deterministic; ``beam_size=1`` reproduces
    greedy decoding exactly.  A candidate that would repeat a trigram
    already present in its hypothesis is skipped (EOS is never blocked),
    which stops degenerate token loops without touching the model.
    """
    if beam_size < 1:
        raise ContractError(f"beam_size must be >= 1, got {beam_size}")
    max_tokens = min(max_tokens, model.config.max_decoder_len - 1)
    enc = model.encode(x_enc, banks.encoder_self)
    beams: list[tuple[list[int], float]] = [([bos_id], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_tokens):
        if not beams:
            break
        # expand every live beam over the full vocabulary, then keep the
        # beam_size best candidates overall; EOS candidates retire
        pool: list[tuple[float, int, int]] = []   # (-logprob, token, beam idx)
        for bi, (ids, lp) in enumerate(beams):
            logp = _log_softmax(model.decode_step(ids, enc, banks))
            blocked = _repeated_trigram_tokens(ids)
            for tok in range(logp.shape[0]):
                if tok in blocked and tok != eos_id:
                    continue
                pool.append((-(lp + logp[tok]), tok, bi))
        pool.sort()
        next_beams: list[tuple[list[int], float]] = []
        for slot in range(min(beam_size, len(pool))):
            neg, tok, bi = pool[slot]
            cand = (beams[bi][0] + [tok], -neg)
            if tok == eos_id:
                finished.append(cand)
            else:
                next_beams.append(cand)
        beams = next_beams
    finished.extend(beams)   # ran out of length without EOS

    def final_score(item: tuple[list[int], float]) -> float:
        ids, lp = item
        gen_len = max(len(ids) - 1, 1)
        return lp / (gen_len ** length_norm)

    best = max(enumerate(finished),
               key=lambda kv: (final_score(kv[1]), -kv[0]))[1]
    out = best[0][1:]
    if out and out[-1] == eos_id:
        out = out[:-1]
    return out


# ---------------------------------------------------------------------------
# Extractive baselines
# ---------------------------------------------------------------------------


def _dialogue_sentences(example: DialogueExample) -> list[str]:
    text = " ".join(text for _, text in example.turns)
    return [s.strip() for s in _SENTENCE_SPLIT_RE.split(text) if s.strip()]


def lead3(example: DialogueExample) -> str:
    return " ".join(_dialogue_sentences(example)[:3])


def oracle_greedy(example: DialogueExample) -> str:
    """Greedy extractive upper bound on ROUGE-2 F1 against the gold summary."""
    sentences = _dialogue_sentences(example)
    chosen: list[int] = []
    best_f1 = 0.0
    while True:
        best_gain = 0.0
        best_idx: Optional[int] = None
        for i, _ in enumerate(sentences):
            if i in chosen:
                continue
            trial = sorted(chosen + [i])
            cand = " ".join(sentences[j] for j in trial)
            f1 = rouge(cand, example.summary).r2.f1
            if f1 - best_f1 > best_gain + 1e-12:
                best_gain = f1 - best_f1
                best_idx = i
        if best_idx is None:
            break
        chosen.append(best_idx)
        best_f1 += best_gain
    return " ".join(sentences[j] for j in sorted(chosen))


# ---------------------------------------------------------------------------
# Prediction emission
# ---------------------------------------------------------------------------


def write_predictions(path: str, rows: Sequence[dict]) -> None:
    """One JSON object per line: {"id", "prediction", "r1", "r2", "rl"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
