"""The trainable prefix stack: word embeddings, reparametrizing MLP, site heads.

Pipeline: a domain-word sequence x_dw gets a learnable embedding matrix M
(rows in d_m).  A two-layer tanh MLP maps each row to width 2*L*d_model; the
MLP is first fitted by MSE against frozen-backbone decoder hidden states of
x_dw, so the prefix starts in the backbone's own representation space.  Three
linear site heads (encoder self, decoder self, decoder cross) then specialize
the MLP output, and each head's output is cut into L (P_k, P_v) pairs.

Only the embedding (theta), the MLP (phi) and the site heads (alpha) are
trainable; the backbone stays frozen throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import Tokenizer, UNK
from .model import EncoderDecoderModel, ModelConfig, PrefixBank, PrefixBanks
from .tensor import (ContractError, ShapeError, Tensor, add, matmul,
                     mse_loss, slice_cols, tanh)

SITES = ("encoder_self", "decoder_self", "decoder_cross")
_READOUT_SEED = 208   # fixed: the unseen-word read-out must be derivable


EMBED_INIT_STD = 0.02


def mlp_output_width(cfg: ModelConfig) -> int:
    return 2 * cfg.num_layers * cfg.d_model


@dataclass
class PrefixEmbedding:
    tokens: list[str]
    matrix: Tensor   # [len(tokens) x d_m], trainable

    def __post_init__(self):
        if self.matrix.data.shape[0] != len(self.tokens):
            raise ShapeError(
                f"embedding rows {self.matrix.shape} vs {len(self.tokens)} tokens")


def init_embeddings(x_dw: Sequence[str], d_m: int, seed: int = 0) -> PrefixEmbedding:
    """Rows drawn N(0, 0.02^2), one per domain word."""
    if not x_dw:
        raise ContractError("init_embeddings: empty domain-word sequence")
    rng = np.random.default_rng(seed)
    mat = Tensor(rng.normal(0.0, EMBED_INIT_STD, size=(len(x_dw), d_m)),
                 requires_grad=True)
    return PrefixEmbedding(tokens=list(x_dw), matrix=mat)


class PrefixMlp:
    """d_m -> d_hidden -> d_out with tanh; reparametrizes the embedding rows."""

    def __init__(self, d_m: int, d_out: int, seed: int = 0,
                 d_hidden: Optional[int] = None):
        self.d_m = d_m
        self.d_hidden = d_hidden if d_hidden is not None else 2 * d_m
        self.d_out = d_out
        rng = np.random.default_rng(seed)
        # embedding rows arrive at the init_embeddings scale (std 0.02);
        # the first layer whitens them so tanh sees unit pre-activations and
        # an unfitted MLP emits O(1) outputs like a fitted one does
        s1 = 1.0 / (EMBED_INIT_STD * math.sqrt(d_m))
        s2 = 1.0 / math.sqrt(self.d_hidden)
        self.w1 = Tensor(rng.normal(0.0, s1, (d_m, self.d_hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(self.d_hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, s2, (self.d_hidden, d_out)), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h = tanh(add(matmul(x, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class PrefixProjections:
    """One linear head per attention site, scaled-identity initialised.

    With unit scale the banks are direct reshapes of the MLP output.  The
    training pipeline passes init_scale = 1/sqrt(d_model): the MLP is fitted
    to raw hidden states whose coordinates are ~sqrt(d_model) larger than the
    key/value rows of ordinary tokens, and banks injected at that magnitude
    monopolise attention before training starts.
    """

    def __init__(self, d_out: int, init_scale: float = 1.0):
        self.d_out = d_out
        self.init_scale = init_scale
        self.heads: dict[str, tuple[Tensor, Tensor]] = {}
        for site in SITES:
            w = Tensor(init_scale * np.eye(d_out), requires_grad=True)
            b = Tensor(np.zeros(d_out), requires_grad=True)
            self.heads[site] = (w, b)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for site, (w, b) in self.heads.items():
            out[f"{site}.weight"] = w
            out[f"{site}.bias"] = b
        return out


def census(emb: PrefixEmbedding, mlp: PrefixMlp,
           proj: PrefixProjections) -> dict[str, Tensor]:
    """Every trainable parameter, by name; the backbone never appears here."""
    out: dict[str, Tensor] = {"theta.embedding": emb.matrix}
    for name, t in mlp.parameters().items():
        out[f"phi.{name}"] = t
    for name, t in proj.parameters().items():
        out[f"alpha.{name}"] = t
    return out


def census_size(params: dict[str, Tensor]) -> int:
    return sum(t.data.size for t in params.values())


# ---------------------------------------------------------------------------
# Fitting the MLP to backbone hidden states
# ---------------------------------------------------------------------------


@dataclass
class FitTargets:
    values: np.ndarray   # [len(x_dw) x d_out]
    unk_count: int


def precompute_targets(backbone: EncoderDecoderModel, tokenizer: Tokenizer,
                       x_dw: Sequence[str]) -> FitTargets:
    """Frozen decoder hidden states for x_dw, stacked per layer then duplicated.

    x_dw is fed as both the encoder input and the teacher-forced decoder
    input; position i's target is the concatenation over layers of the
    decoder state at i, repeated twice to fill the future K-half and V-half.
    """
    if backbone.frozen is False:
        raise ContractError("precompute_targets requires a frozen backbone")
    if not x_dw:
        raise ContractError("precompute_targets: empty domain-word sequence")
    ids = tokenizer.encode(list(x_dw))
    unk_count = sum(1 for i in ids if i == UNK)
    enc = backbone.encode(ids)
    states, _ = backbone.decoder_forward(ids, enc)
    stacked = np.concatenate([s.data for s in states], axis=1)
    return FitTargets(values=np.concatenate([stacked, stacked], axis=1),
                      unk_count=unk_count)


@dataclass
class FitResult:
    mlp: PrefixMlp
    initial_mse: float
    final_mse: float
    epochs_run: int


def fit_mlp(emb: PrefixEmbedding, targets: FitTargets, epochs: int = 200,
            lr: float = 1e-2, seed: int = 0) -> FitResult:
    """Full-batch Adam on MSE(MLP(M), targets), updating only the MLP.

    The embedding matrix is deliberately left out of the update; its bytes
    are unchanged by fitting.
    """
    rows, d_out = targets.values.shape
    if rows != len(emb.tokens):
        raise ShapeError(
            f"targets rows {rows} vs embedding rows {len(emb.tokens)}")
    mlp = PrefixMlp(d_m=emb.matrix.data.shape[1], d_out=d_out, seed=seed)
    target_t = Tensor(targets.values)
    params = list(mlp.parameters().values())
    mstate = [np.zeros_like(p.data) for p in params]
    vstate = [np.zeros_like(p.data) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    from .tensor import Tape
    initial = None
    final = None
    for epoch in range(1, epochs + 1):
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            loss = mse_loss(mlp.forward(emb.matrix), target_t)
        value = loss.item()
        if not np.isfinite(value):
            raise ContractError(
                f"fit_mlp diverged at epoch {epoch}: mse={value!r}")
        if initial is None:
            initial = value
        final = value
        tape.backward(loss)
        emb.matrix.zero_grad()   # theta is frozen during the fit
        for i, p in enumerate(params):
            mstate[i] = beta1 * mstate[i] + (1 - beta1) * p.grad
            vstate[i] = beta2 * vstate[i] + (1 - beta2) * p.grad * p.grad
            mhat = mstate[i] / (1 - beta1 ** epoch)
            vhat = vstate[i] / (1 - beta2 ** epoch)
            p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return FitResult(mlp=mlp, initial_mse=float(initial),
                     final_mse=float(final), epochs_run=epochs)


# ---------------------------------------------------------------------------
# Bank computation
# ---------------------------------------------------------------------------


def _banks_from_matrix(matrix: Tensor, mlp: PrefixMlp, proj: PrefixProjections,
                       cfg: ModelConfig) -> PrefixBanks:
    d_out = mlp_output_width(cfg)
    if mlp.d_out != d_out or proj.d_out != d_out:
        raise ShapeError(
            f"MLP width {mlp.d_out} / heads width {proj.d_out} vs config {d_out}")
    if matrix.data.shape[1] != mlp.d_m:
        raise ShapeError(
            f"embedding width {matrix.shape} vs MLP input {mlp.d_m}")
    p = matrix.data.shape[0]
    d = cfg.d_model
    half = cfg.num_layers * d
    mapped = mlp.forward(matrix)
    banks = {}
    for site in SITES:
        w, b = proj.heads[site]
        h = add(matmul(mapped, w), b)
        pairs = []
        for layer in range(cfg.num_layers):
            pk = slice_cols(h, layer * d, (layer + 1) * d)
            pv = slice_cols(h, half + layer * d, half + (layer + 1) * d)
            pairs.append((pk, pv))
        banks[site] = PrefixBank(site=site, pairs=pairs, prefix_len=p)
    return PrefixBanks(**banks)


def compute_banks(emb: PrefixEmbedding, mlp: PrefixMlp, proj: PrefixProjections,
                  cfg: ModelConfig) -> PrefixBanks:
    """Differentiable banks for all three sites from the trained parameters."""
    return _banks_from_matrix(emb.matrix, mlp, proj, cfg)


def _readout_matrix(d_model: int, d_m: int) -> np.ndarray:
    # backbone embedding rows have coordinate scale ~ 1/sqrt(d_model); the
    # read-out renormalizes them to the prefix embedding init scale (0.02)
    # so unseen-word rows land in the input range the MLP was fitted on
    if d_model == d_m:
        return EMBED_INIT_STD * math.sqrt(d_model) * np.eye(d_model)
    rng = np.random.default_rng(_READOUT_SEED)
    return rng.normal(0.0, EMBED_INIT_STD, size=(d_model, d_m))


def banks_for_target_domain(target_words: Sequence[str], emb: PrefixEmbedding,
                            mlp: PrefixMlp, proj: PrefixProjections,
                            cfg: ModelConfig, tokenizer: Tokenizer,
                            token_embedding: Tensor) -> PrefixBanks:
    """Banks for unseen-domain words through the trained MLP and heads.

    Words that were part of the training sequence reuse their trained rows;
    anything else is read out of the frozen backbone token embedding (UNK row
    for out-of-vocabulary words) and projected into the embedding width.
    """
    if not target_words:
        raise ContractError("banks_for_target_domain: empty target word list")
    d_m = emb.matrix.data.shape[1]
    readout = _readout_matrix(token_embedding.data.shape[1], d_m)
    row_index = {tok: i for i, tok in enumerate(emb.tokens)}
    rows = []
    for w in target_words:
        if w in row_index:
            rows.append(emb.matrix.data[row_index[w]])
        else:
            ids = tokenizer.encode([w])
            rows.append(token_embedding.data[ids[0]] @ readout)
    matrix = Tensor(np.array(rows))
    return _banks_from_matrix(matrix, mlp, proj, cfg)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, emb: PrefixEmbedding, mlp: PrefixMlp,
                    proj: PrefixProjections, config_hash: str) -> None:
    """Manifest line (JSON) then concatenated little-endian float64 payloads."""
    params = census(emb, mlp, proj)
    entries = []
    offset = 0
    blobs = []
    for name, t in params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": t.shape, "byte_offset": offset})
        offset += len(blob)
        blobs.append(blob)
    manifest = {"config_hash": config_hash, "x_dw": emb.tokens,
                "tensors": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True,
                            separators=(",", ":")).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str, config_hash: str
                    ) -> tuple[PrefixEmbedding, PrefixMlp, PrefixProjections]:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    manifest = json.loads(header.decode())
    if manifest["config_hash"] != config_hash:
        raise ContractError(
            f"checkpoint config hash {manifest['config_hash'][:12]}... does not "
            f"match expected {config_hash[:12]}...")
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=start).reshape(shape).copy()
        tensors[entry["name"]] = arr
    tokens = list(manifest["x_dw"])
    emb = PrefixEmbedding(tokens=tokens,
                          matrix=Tensor(tensors["theta.embedding"],
                                        requires_grad=True))
    d_m = emb.matrix.data.shape[1]
    d_hidden = tensors["phi.w1"].shape[1]
    d_out = tensors["phi.w2"].shape[1]
    mlp = PrefixMlp(d_m=d_m, d_out=d_out, d_hidden=d_hidden)
    for name, t in mlp.parameters().items():
        t.data[...] = tensors[f"phi.{name}"]
    proj = PrefixProjections(d_out=d_out)
    for name, t in proj.parameters().items():
        t.data[...] = tensors[f"alpha.{name}"]
    return emb, mlp, proj
