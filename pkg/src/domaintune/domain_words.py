"""Per-domain keyword extraction with LDA, and domain-word sequence assembly.

One LDA is fitted per domain on bag-of-words documents built from dialogue
text.  The bag-of-words build drops a built-in function-word list, punctuation
tokens, and any token appearing in more than ``max_doc_freq`` of all documents
(which removes the sentence scaffolding shared across domains).  Words are
ranked by their best smoothed topic-word probability.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import ContractError

STOPWORDS = frozenset("""
a an the and or but if of to in on at for with from by as is are was were be
been am do does did done have has had i you he she it we they me him her us
them my your his its our their this that these those what which who whom when
where why how would could should can will shall may might must not no yes
please about so than then there here any some all every each very just only
also too more most other another s t etc
""".split())


@dataclass
class BowCorpus:
    vocab: dict[str, int]
    id_to_token: list[str]
    docs: list[tuple[str, list[int]]]   # (domain label, token ids, repeats kept)

    def domains(self) -> list[str]:
        seen: list[str] = []
        for d, _ in self.docs:
            if d not in seen:
                seen.append(d)
        return seen

    def restrict(self, domain: str) -> "BowCorpus":
        kept = [(d, toks) for d, toks in self.docs if d == domain]
        if not kept:
            raise ContractError(f"no documents for domain {domain!r}")
        return BowCorpus(self.vocab, self.id_to_token, kept)


def build_bow(documents: Sequence[tuple[str, Sequence[str]]],
              stopwords: frozenset[str] = STOPWORDS,
              max_doc_freq: float = 0.4) -> BowCorpus:
    """Filter stopwords, punctuation, and high-document-frequency tokens.

    ``documents`` are (domain label, token list) pairs; documents left empty
    by filtering are dropped so every retained document has content.
    """
    if not documents:
        raise ContractError("build_bow: no documents")
    n_docs = len(documents)
    doc_freq: dict[str, int] = {}
    for _, toks in documents:
        for t in set(toks):
            doc_freq[t] = doc_freq.get(t, 0) + 1

    def keep(tok: str) -> bool:
        if tok in stopwords or not tok.isalnum():
            return False
        return doc_freq[tok] / n_docs <= max_doc_freq

    vocab: dict[str, int] = {}
    id_to_token: list[str] = []
    docs: list[tuple[str, list[int]]] = []
    for domain, toks in documents:
        ids = []
        for t in toks:
            if keep(t):
                if t not in vocab:
                    vocab[t] = len(id_to_token)
                    id_to_token.append(t)
                ids.append(vocab[t])
        if ids:
            docs.append((domain, ids))
    if not docs:
        raise ContractError("build_bow: filtering left no documents")
    return BowCorpus(vocab, id_to_token, docs)


# ---------------------------------------------------------------------------
# LDA via collapsed Gibbs sampling
# ---------------------------------------------------------------------------


@dataclass
class LdaModel:
    domain: str
    num_topics: int
    alpha: float
    beta: float
    vocab: dict[str, int]
    id_to_token: list[str]
    topic_word_counts: np.ndarray    # [K x V] ints
    doc_topic_counts: np.ndarray     # [D x K] ints
    assignments: list[list[int]]
    seed: int

    def topic_word_probs(self) -> np.ndarray:
        """Smoothed P(word | topic), rows summing to 1."""
        counts = self.topic_word_counts.astype(np.float64)
        v = counts.shape[1]
        return (counts + self.beta) / (counts.sum(axis=1, keepdims=True)
                                       + self.beta * v)

    def check_consistency(self) -> None:
        per_topic = np.zeros(self.num_topics, dtype=np.int64)
        per_doc_topic = np.zeros_like(self.doc_topic_counts)
        for d, za in enumerate(self.assignments):
            for z in za:
                per_topic[z] += 1
                per_doc_topic[d, z] += 1
        if not np.array_equal(per_topic, self.topic_word_counts.sum(axis=1)):
            raise ContractError("LDA topic-word counts disagree with assignments")
        if not np.array_equal(per_doc_topic, self.doc_topic_counts):
            raise ContractError("LDA doc-topic counts disagree with assignments")


def fit_lda(corpus: BowCorpus, num_topics: int = 5, alpha: float = 0.1,
            beta: float = 0.01, iterations: int = 500, seed: int = 0) -> LdaModel:
    """Collapsed Gibbs sampling over a single-domain bag-of-words corpus."""
    if not corpus.docs:
        raise ContractError("fit_lda: empty corpus")
    if num_topics < 1:
        raise ContractError(f"fit_lda: num_topics must be >= 1, got {num_topics}")
    domains = corpus.domains()
    domain = domains[0] if len(domains) == 1 else "+".join(domains)
    v = len(corpus.id_to_token)
    k = num_topics
    rng = random.Random(seed)
    docs = [toks for _, toks in corpus.docs]
    # plain python count tables: the inner loop is scalar-heavy and runs
    # millions of times, where list indexing beats numpy dispatch
    n_kw = [[0] * v for _ in range(k)]
    n_k = [0] * k
    n_dk = [[0] * k for _ in docs]
    assignments: list[list[int]] = []
    for d, toks in enumerate(docs):
        za = []
        for w in toks:
            z = rng.randrange(k)
            za.append(z)
            n_kw[z][w] += 1
            n_k[z] += 1
            n_dk[d][z] += 1
        assignments.append(za)
    beta_v = beta * v
    cum = [0.0] * k
    for _ in range(iterations):
        for d, toks in enumerate(docs):
            nd = n_dk[d]
            za = assignments[d]
            for j, w in enumerate(toks):
                z = za[j]
                nd[z] -= 1
                n_kw[z][w] -= 1
                n_k[z] -= 1
                total = 0.0
                for t in range(k):
                    total += (n_kw[t][w] + beta) / (n_k[t] + beta_v) * (nd[t] + alpha)
                    cum[t] = total
                u = rng.random() * total
                z = 0
                while cum[z] < u:
                    z += 1
                nd[z] += 1
                n_kw[z][w] += 1
                n_k[z] += 1
                za[j] = z
    return LdaModel(
        domain=domain, num_topics=k, alpha=alpha, beta=beta,
        vocab=dict(corpus.vocab), id_to_token=list(corpus.id_to_token),
        topic_word_counts=np.array(n_kw, dtype=np.int64),
        doc_topic_counts=np.array(n_dk, dtype=np.int64),
        assignments=assignments, seed=seed)


# ---------------------------------------------------------------------------
# Ranking and sequence assembly
# ---------------------------------------------------------------------------


@dataclass
class DomainWordList:
    domain: str
    words: list[str]
    scores: Optional[list[float]] = None

    def __post_init__(self):
        if len(self.words) != len(set(self.words)):
            raise ContractError(f"domain {self.domain}: duplicate words in list")


def top_domain_words(model: LdaModel, k: int) -> DomainWordList:
    """Rank the vocabulary by max-over-topics smoothed P(word|topic)."""
    v = len(model.id_to_token)
    if k < 0 or k > v:
        raise ContractError(f"top_domain_words: k={k} outside [0, {v}]")
    best = model.topic_word_probs().max(axis=0)
    order = sorted(range(v), key=lambda i: (-best[i], model.id_to_token[i]))
    chosen = order[:k]
    return DomainWordList(
        domain=model.domain,
        words=[model.id_to_token[i] for i in chosen],
        scores=[float(best[i]) for i in chosen])


@dataclass
class PrefixSequence:
    words: list[str]
    shortfall: bool    # true when distinct words ran out before total_len


def build_prefix_sequence(lists: Sequence[DomainWordList],
                          total_len: int) -> PrefixSequence:
    """Interleave per-domain quotas into one sequence of length total_len.

    Quota = floor(total_len / #domains); the remainder goes one word at a
    time to domains in label order.  A word already taken by an earlier
    domain is skipped and backfilled from the owner's next-ranked word.
    """
    if not lists:
        raise ContractError("build_prefix_sequence: no domain word lists")
    if total_len < len(lists):
        raise ContractError(
            f"total_len {total_len} below number of domains {len(lists)}")
    ordered = sorted(lists, key=lambda wl: wl.domain)
    base = total_len // len(ordered)
    rem = total_len - base * len(ordered)
    quotas = [base + (1 if i < rem else 0) for i in range(len(ordered))]
    taken: list[str] = []
    seen: set[str] = set()
    shortfall = False
    for wl, quota in zip(ordered, quotas):
        got = 0
        for w in wl.words:
            if got == quota:
                break
            if w in seen:
                continue
            taken.append(w)
            seen.add(w)
            got += 1
        if got < quota:
            shortfall = True
    return PrefixSequence(words=taken, shortfall=shortfall)


def corrupt_domain_words(x_dw: Sequence[str], fraction: float,
                         distractor_vocab: Sequence[str], seed: int = 0) -> list[str]:
    """Replace round(fraction * len) positions with distractor words."""
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction must lie in [0, 1], got {fraction}")
    words = list(x_dw)
    overlap = set(words) & set(distractor_vocab)
    if overlap:
        raise ContractError(
            f"distractor vocabulary overlaps the domain words: {sorted(overlap)[:5]}")
    n_replace = round(fraction * len(words))
    if n_replace == 0:
        return words
    if not distractor_vocab:
        raise ContractError("corrupt_domain_words: empty distractor vocabulary")
    rng = random.Random(seed)
    positions = rng.sample(range(len(words)), n_replace)
    for pos in positions:
        words[pos] = distractor_vocab[rng.randrange(len(distractor_vocab))]
    return words


# words far from any synthetic domain, for the noise sweep
DEFAULT_DISTRACTORS = [
    "nebula", "quartz", "violin", "tundra", "crater", "lagoon", "ember",
    "walrus", "cactus", "comet", "fjord", "geyser", "harp", "iceberg",
    "jigsaw", "kelp", "lichen", "magma", "obsidian", "plankton", "quasar",
    "reef", "sequoia", "talc", "umbra", "vortex", "wicker", "xylem",
    "yarrow", "zephyr", "anvil", "bellows", "chisel", "derrick", "easel",
]


# ---------------------------------------------------------------------------
# Plain-text emission
# ---------------------------------------------------------------------------


def write_word_lists(lists: Sequence[DomainWordList], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for wl in lists:
            fh.write(f"# domain: {wl.domain}\n")
            for w in wl.words:
                fh.write(w + "\n")


def read_word_lists(path: str) -> list[DomainWordList]:
    lists: list[DomainWordList] = []
    domain = None
    words: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("# domain:"):
                if domain is not None:
                    lists.append(DomainWordList(domain=domain, words=words))
                domain = line.split(":", 1)[1].strip()
                words = []
            elif domain is not None:
                words.append(line)
    if domain is not None:
        lists.append(DomainWordList(domain=domain, words=words))
    return lists
