"""Dialogue corpus: states, prompts, tokenization, synthetic generator, splits.

The discrete prompt for an example is either a serialized dialogue state
("intent, name is value, ...") or a free-text query passed through verbatim.
The encoder input is prompt tokens ++ [SEP] ++ flattened turns, with the
prompt preserved preferentially under truncation.

The synthetic generator covers five task-oriented domains built from shared
sentence scaffolds and disjoint per-domain content lexicons.  An ``overlap``
knob moves a fraction of two designated domain pairs' slot vocabulary (and
the slot's name) into a pool shared within the pair, emulating transfer
between similar domains; at overlap 0 the lexicons are fully disjoint.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .tensor import ContractError

PAD, UNK, BOS, EOS, SEP = 0, 1, 2, 3, 4
PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, SEP_TOKEN = (
    "<pad>", "<unk>", "<bos>", "<eos>", "<sep>")
_SPECIAL_TOKENS = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, SEP_TOKEN]

_WORD_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase word/punctuation split; inverse of ``detokenize`` up to spacing."""
    return _WORD_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


# ---------------------------------------------------------------------------
# Examples and states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DialogueState:
    intent: str
    slots: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        names = [n for n, _ in self.slots]
        if len(names) != len(set(names)):
            raise ContractError(f"duplicate slot names in state: {names}")


def serialize_state(s: DialogueState) -> str:
    parts = [s.intent] + [f"{name} is {value}" for name, value in s.slots]
    return ", ".join(parts)


@dataclass(frozen=True)
class DialogueExample:
    id: str
    domain: str
    turns: tuple[tuple[str, str], ...]   # (speaker, text), speaker in {user, system}
    summary: str
    state: Optional[DialogueState] = None
    query: Optional[str] = None

    def __post_init__(self):
        if not self.turns:
            raise ContractError(f"example {self.id}: turns must be nonempty")
        if not self.summary:
            raise ContractError(f"example {self.id}: summary must be nonempty")
        if (self.state is None) == (self.query is None):
            raise ContractError(
                f"example {self.id}: exactly one of state/query must be set")

    def prompt_text(self) -> str:
        if self.state is not None:
            return serialize_state(self.state)
        return self.query or ""


def flatten_turns(turns: Sequence[tuple[str, str]]) -> list[str]:
    out: list[str] = []
    for speaker, text in turns:
        out.append(f"{speaker.upper()}:")
        out.extend(tokenize(text))
    return out


def dialogue_tokens(example: DialogueExample) -> list[str]:
    """Turn text tokens without speaker tags; the unit for keyword extraction."""
    out: list[str] = []
    for _, text in example.turns:
        out.extend(tokenize(text))
    return out


@dataclass
class Corpus:
    domains: list[str]
    examples: list[DialogueExample]
    domain_lexicons: Optional[dict[str, frozenset[str]]] = None

    def __post_init__(self):
        self._by_id = {ex.id: ex for ex in self.examples}
        if len(self._by_id) != len(self.examples):
            raise ContractError("duplicate example ids in corpus")
        for ex in self.examples:
            if ex.domain not in self.domains:
                raise ContractError(
                    f"example {ex.id} has unknown domain {ex.domain!r}")

    def get(self, example_id: str) -> DialogueExample:
        return self._by_id[example_id]

    def ids_by_domain(self, domain: str) -> list[str]:
        return [ex.id for ex in self.examples if ex.domain == domain]

    def stats(self) -> list[dict]:
        """Per-domain size and mean token lengths, plus an 'all' row."""
        rows = []
        groups = {d: [ex for ex in self.examples if ex.domain == d]
                  for d in self.domains}
        groups["all"] = self.examples

        def mean(vals):
            return round(sum(vals) / len(vals), 1) if vals else 0.0

        for name, exs in groups.items():
            rows.append({
                "domain": name,
                "size": len(exs),
                "dialogue_len": mean([len(flatten_turns(ex.turns)) for ex in exs]),
                "summary_len": mean([len(tokenize(ex.summary)) for ex in exs]),
                "prompt_len": mean([len(tokenize(ex.prompt_text())) for ex in exs]),
            })
        return rows


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


class Tokenizer:
    """Word-level vocabulary with reserved PAD/UNK/BOS/EOS/SEP ids."""

    def __init__(self, vocab_tokens: Sequence[str]):
        self.id_to_token = list(_SPECIAL_TOKENS) + list(vocab_tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ContractError("tokenizer vocabulary contains duplicates")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def build(cls, token_streams: Iterable[Sequence[str]]) -> "Tokenizer":
        freq: dict[str, int] = {}
        for stream in token_streams:
            for tok in stream:
                freq[tok] = freq.get(tok, 0) + 1
        for special in _SPECIAL_TOKENS:
            freq.pop(special, None)
        ordered = sorted(freq, key=lambda t: (-freq[t], t))
        return cls(ordered)

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if skip_special and i < len(_SPECIAL_TOKENS):
                continue
            out.append(self.id_to_token[i])
        return out

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id


def build_tokenizer(corpus: Corpus, ids: Sequence[str]) -> Tokenizer:
    """Vocabulary from the given (training) examples: prompts, turns, summaries."""
    streams = []
    for ex_id in ids:
        ex = corpus.get(ex_id)
        streams.append(tokenize(ex.prompt_text()))
        streams.append(flatten_turns(ex.turns))
        streams.append(tokenize(ex.summary))
    return Tokenizer.build(streams)


def assemble_encoder_input(example: DialogueExample, tokenizer: Tokenizer,
                           max_encoder_len: int,
                           include_prompt: bool = True) -> tuple[list[int], bool]:
    """Prompt ++ SEP ++ flattened dialogue, prompt kept whole under truncation."""
    prompt = tokenize(example.prompt_text()) if include_prompt else []
    dialogue = flatten_turns(example.turns)
    head = tokenizer.encode(prompt) + [SEP] if prompt else []
    tail = tokenizer.encode(dialogue)
    truncated = len(head) + len(tail) > max_encoder_len
    if truncated:
        room = max_encoder_len - len(head)
        if room > 0:
            ids = head + tail[:room]
        else:
            ids = head[:max_encoder_len]
    else:
        ids = head + tail
    return ids, truncated


def summary_target_ids(example: DialogueExample, tokenizer: Tokenizer) -> list[int]:
    return tokenizer.encode(tokenize(example.summary)) + [EOS]


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    domains: tuple[str, ...] = ("restaurant", "hotel", "attraction", "taxi", "train")
    size: int = 300
    overlap: float = 0.5
    seed: int = 13

    def __post_init__(self):
        unknown = [d for d in self.domains if d not in _BLUEPRINTS]
        if unknown:
            raise ContractError(f"unknown synthetic domains: {unknown}")
        if len(self.domains) < 3:
            raise ContractError("synthetic corpus needs at least 3 domains")
        if self.size < 20:
            raise ContractError("per-domain size must be at least 20")
        if not 0.0 <= self.overlap <= 1.0:
            raise ContractError(f"overlap must lie in [0, 1], got {self.overlap}")


# Per-domain content words.  Every word below is globally unique so that
# overlap=0 yields pairwise-disjoint domain lexicons; the pair pools are the
# only words two domains can share.
_BLUEPRINTS: dict[str, dict] = {
    "restaurant": {
        "venues": ["restaurant", "bistro", "eatery", "diner", "brasserie"],
        "intent": "book",
        "past": "booked",
        "slots": [
            ("cuisine", ["italian", "chinese", "indian", "mexican", "thai", "spanish"]),
            ("price", ["thrifty", "lavish", "midrange", "bargain", "swanky", "modest"]),
            ("seating", ["booth", "terrace", "patio", "counter", "alcove", "veranda"]),
        ],
        "pair_slot": "price",
        "fallback_slot_name": "cost",
    },
    "hotel": {
        "venues": ["hotel", "guesthouse", "hostel", "lodge", "inn"],
        "intent": "reserve",
        "past": "reserved",
        "slots": [
            ("rating", ["superb", "decent", "basic", "premier", "classy", "plain"]),
            ("price", ["frugal", "opulent", "economy", "deluxe", "budget", "plush"]),
            ("bedding", ["twin", "double", "queen", "king", "bunk", "futon"]),
        ],
        "pair_slot": "price",
        "fallback_slot_name": "tariff",
    },
    "attraction": {
        "venues": ["museum", "gallery", "theatre", "aquarium", "planetarium"],
        "intent": "visit",
        "past": "visited",
        "slots": [
            ("exhibit", ["fossils", "sculpture", "mosaics", "orchids", "meteors", "frescoes"]),
            ("fee", ["free", "donation", "discounted", "seasonal", "waived", "standard"]),
            ("district", ["uptown", "lakeside", "oldtown", "westend", "quayside", "hillcrest"]),
        ],
        "pair_slot": None,
        "fallback_slot_name": None,
    },
    "taxi": {
        "venues": ["taxi", "cab", "minicab", "rideshare", "towncar"],
        "intent": "order",
        "past": "ordered",
        "slots": [
            ("destination", ["airport", "ballpark", "casino", "stadium", "marina", "pier"]),
            ("pickup", ["dawn", "noon", "dusk", "midnight", "teatime", "daybreak"]),
            ("payment", ["cash", "card", "voucher", "prepaid", "metered", "invoice"]),
        ],
        "pair_slot": "destination",
        "fallback_slot_name": "dropoff",
    },
    "train": {
        "venues": ["train", "railway", "express", "commuter", "intercity"],
        "intent": "catch",
        "past": "caught",
        "slots": [
            ("destination", ["cambridge", "norwich", "ipswich", "stevenage", "lincoln", "york"]),
            ("departure", ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday"]),
            ("carriage", ["firstclass", "standard2", "quietcoach", "buffet", "sleeper", "panorama"]),
        ],
        "pair_slot": "destination",
        "fallback_slot_name": "stop",
    },
}

# words a pair of similar domains may share, gated by the overlap knob
_PAIR_POOLS: dict[tuple[str, str], dict] = {
    ("restaurant", "hotel"): {
        "venues": ["pavilion", "clubhouse", "parlor", "annex", "manor"],
        "slots": [
            ["classic", "rustic", "premium", "modern", "vintage", "artisan"],
            ["cheap", "moderate", "expensive", "pricey", "affordable", "upscale"],
            ["garden", "corner", "courtyard", "rooftop", "mezzanine", "atrium"],
        ],
    },
    ("taxi", "train"): {
        "venues": ["shuttle", "charter", "liner", "transit", "coach"],
        "slots": [
            ["kingswood", "eastgate", "millbrook", "harborview", "oakfield",
             "stonebridge"],
            ["sunrise", "midday", "sundown", "overnight", "morning", "evening"],
            ["silver", "gold", "bronze", "platinum", "copper", "pearl"],
        ],
    },
}

# Each discussed slot is negotiated against a distractor value from the same
# pool, and the third slot is settled off-line: its value appears in the
# dialogue state but never in the turns, so state-aware summarization has
# strictly more information than the transcript alone.
_DIALOGUE_SKELETONS = [
    [
        ("user", "hello , i want to {intent} a {venue} ."),
        ("system", "would you like {v1} or {d1} for the {n1} ?"),
        ("user", "{v1} please . for the {n2} i want {v2} , not {d2} ."),
        ("system", "done , the {n3} can be settled later ."),
    ],
    [
        ("user", "hi , i need to {intent} a {venue} ."),
        ("system", "for the {n2} we have {d2} or {v2} ."),
        ("user", "{v2} . and {v1} for the {n1} , rather than {d1} ."),
        ("system", "all set , we can sort the {n3} afterwards ."),
    ],
]

# Summary body lists the dialogue state in its serialization order, so a
# state-aware summarizer can realize it by transcription; the lead sentence
# varies so the task is not a pure echo.
_SUMMARY_SKELETONS = [
    "the user {past} a {venue} . {slot_list} .",
    "a {venue} was {past} . {slot_list} .",
]


def _shared_pools(spec: SyntheticSpec, domain: str) -> Optional[dict]:
    for (a, b), pools in _PAIR_POOLS.items():
        if domain in (a, b) and a in spec.domains and b in spec.domains:
            return pools
    return None


def _domain_slot_table(spec: SyntheticSpec, domain: str) -> list[tuple[str, list[str]]]:
    """Slot (name, value pool) rows for a domain under the overlap knob.

    Paired domains draw the leading round(overlap * pool) values of every
    slot pool from the pair's shared vocabulary; the slot designated as the
    pair slot also shares its name whenever any values are shared.
    """
    bp = _BLUEPRINTS[domain]
    shared = _shared_pools(spec, domain)
    table = []
    for idx, (name, values) in enumerate(bp["slots"]):
        if shared is not None:
            n_shared = round(spec.overlap * len(values))
            merged = shared["slots"][idx][:n_shared] + values[:len(values) - n_shared]
        else:
            n_shared = 0
            merged = values
        if name == bp["pair_slot"]:
            # the slot name itself is shared only when vocabulary is shared
            shown = name if n_shared > 0 else bp["fallback_slot_name"]
            table.append((shown, merged))
        else:
            table.append((name, merged))
    return table


def _domain_venues(spec: SyntheticSpec, domain: str) -> list[str]:
    bp = _BLUEPRINTS[domain]
    shared = _shared_pools(spec, domain)
    if shared is None:
        return list(bp["venues"])
    n_shared = round(spec.overlap * len(bp["venues"]))
    return shared["venues"][:n_shared] + bp["venues"][:len(bp["venues"]) - n_shared]


def domain_lexicon(spec: SyntheticSpec, domain: str) -> frozenset[str]:
    """All domain-specific content words the generator can emit for a domain."""
    bp = _BLUEPRINTS[domain]
    words = set(_domain_venues(spec, domain)) | {bp["intent"]}
    for name, values in _domain_slot_table(spec, domain):
        words.add(name)
        words.update(values)
    return frozenset(words)


def _deferred_slot(bp: dict) -> str:
    """Name of the slot settled outside the transcript (the shared slot when
    the domain has one, so cross-domain transfer can exploit the state)."""
    return bp["pair_slot"] if bp["pair_slot"] else bp["slots"][-1][0]


def generate_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    rng = random.Random(spec.seed)
    examples: list[DialogueExample] = []
    for domain in spec.domains:
        bp = _BLUEPRINTS[domain]
        slots = _domain_slot_table(spec, domain)
        venues = _domain_venues(spec, domain)
        deferred = _deferred_slot(bp)
        for i in range(spec.size):
            venue = rng.choice(venues)
            chosen = [(name, rng.choice(pool)) for name, pool in slots]
            # discussed slots keep corpus order, deferred slot goes last
            deferred_shown = deferred if deferred in {n for n, _ in chosen} \
                else _BLUEPRINTS[domain]["fallback_slot_name"] or deferred
            ordered = ([p for p in chosen if p[0] != deferred_shown]
                       + [p for p in chosen if p[0] == deferred_shown])
            fills = {"intent": bp["intent"], "venue": venue}
            for j, (name, value) in enumerate(ordered, start=1):
                fills[f"n{j}"] = name
                fills[f"v{j}"] = value
            pools = dict(slots)
            for j, (name, value) in enumerate(ordered[:2], start=1):
                others = [v for v in pools[name] if v != value]
                fills[f"d{j}"] = rng.choice(others)
            skeleton = _DIALOGUE_SKELETONS[rng.randrange(len(_DIALOGUE_SKELETONS))]
            turns = tuple((spk, text.format(**fills)) for spk, text in skeleton)
            fills["past"] = bp["past"]
            # summary body follows the state's slot order, not dialogue order
            fills["slot_list"] = " , ".join(f"{n} is {v}" for n, v in chosen)
            summary = _SUMMARY_SKELETONS[
                rng.randrange(len(_SUMMARY_SKELETONS))].format(**fills)
            state = DialogueState(intent=bp["intent"], slots=tuple(chosen))
            examples.append(DialogueExample(
                id=f"{domain}-{i:04d}", domain=domain, turns=turns,
                summary=summary, state=state))
    lexicons = {d: domain_lexicon(spec, d) for d in spec.domains}
    return Corpus(domains=list(spec.domains), examples=examples,
                  domain_lexicons=lexicons)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    target_domain: str
    train_ids: list[str]
    valid_ids: list[str]
    test_ids: list[str]
    few_shot_k: int = 0

    def to_json(self) -> dict:
        return {"target_domain": self.target_domain, "train_ids": self.train_ids,
                "valid_ids": self.valid_ids, "test_ids": self.test_ids,
                "few_shot_k": self.few_shot_k}

    @classmethod
    def from_json(cls, payload: dict) -> "SplitPlan":
        return cls(payload["target_domain"], list(payload["train_ids"]),
                   list(payload["valid_ids"]), list(payload["test_ids"]),
                   int(payload["few_shot_k"]))


def build_split(corpus: Corpus, target_domain: str, valid_size: int,
                few_shot_k: int = 0, seed: int = 0) -> SplitPlan:
    """Leave-one-domain-out split; k>0 moves k target examples into train."""
    if target_domain not in corpus.domains:
        raise ContractError(f"target domain {target_domain!r} not in corpus")
    source_ids = [ex.id for ex in corpus.examples if ex.domain != target_domain]
    target_ids = corpus.ids_by_domain(target_domain)
    if valid_size < 1 or valid_size >= len(source_ids):
        raise ContractError(
            f"valid_size {valid_size} must lie in [1, {len(source_ids)})")
    if few_shot_k < 0 or few_shot_k > len(target_ids):
        raise ContractError(
            f"few_shot_k {few_shot_k} must lie in [0, {len(target_ids)}]")
    rng = random.Random(seed)
    valid = sorted(rng.sample(source_ids, valid_size))
    valid_set = set(valid)
    train = [i for i in source_ids if i not in valid_set]
    test = list(target_ids)
    if few_shot_k > 0:
        # shuffle-prefix rather than sample so the k=10 pool is a subset
        # of the k=50 pool at the same seed
        pool = list(target_ids)
        rng.shuffle(pool)
        moved = sorted(pool[:few_shot_k])
        moved_set = set(moved)
        train = train + moved
        test = [i for i in test if i not in moved_set]
    return SplitPlan(target_domain, train, valid, test, few_shot_k)


# ---------------------------------------------------------------------------
# JSONL round trip
# ---------------------------------------------------------------------------


def example_to_json(ex: DialogueExample) -> dict:
    obj: dict = {
        "id": ex.id,
        "domain": ex.domain,
        "turns": [{"speaker": s, "text": t} for s, t in ex.turns],
    }
    if ex.state is not None:
        obj["state"] = {"intent": ex.state.intent,
                        "slots": [{"name": n, "value": v} for n, v in ex.state.slots]}
    else:
        obj["query"] = ex.query
    obj["summary"] = ex.summary
    return obj


def example_from_json(obj: dict) -> DialogueExample:
    state = None
    query = None
    if "state" in obj:
        state = DialogueState(
            intent=obj["state"]["intent"],
            slots=tuple((s["name"], s["value"]) for s in obj["state"]["slots"]))
    else:
        query = obj["query"]
    return DialogueExample(
        id=obj["id"], domain=obj["domain"],
        turns=tuple((t["speaker"], t["text"]) for t in obj["turns"]),
        summary=obj["summary"], state=state, query=query)


def write_corpus_jsonl(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            fh.write(json.dumps(example_to_json(ex), ensure_ascii=True) + "\n")


def read_corpus_jsonl(path: str) -> Corpus:
    examples = []
    domains: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            ex = example_from_json(json.loads(line))
            if ex.domain not in domains:
                domains.append(ex.domain)
            examples.append(ex)
    return Corpus(domains=domains, examples=examples)
