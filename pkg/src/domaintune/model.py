"""A small frozen encoder-decoder transformer that accepts prefix key/value banks.

The backbone is randomly initialised from a seed and never trained in the
prefix-tuning pipeline; adaptation happens purely through extra key/value rows
("prefix banks") spliced in front of every attention site:

* encoder self-attention,
* decoder self-attention,
* decoder cross-attention (prefix rows join the encoder memory).

Pre-norm residual blocks, learned position embeddings, ReLU feed-forward.
The output projection is initialised as the transpose of the token embedding
table; with the backbone frozen the two stay tied, so copying input tokens to
the output is an easy function for a prefix to steer.  Prefix rows carry no
position embedding and are never masked.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .tensor import (ContractError, ShapeError, Tape, Tensor, add, concat_rows,
                     cross_entropy_logits, dropout, embedding_lookup,
                     layer_norm, matmul, multi_head_attention, relu)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    ffn_hidden: int = 128
    max_encoder_len: int = 160
    max_decoder_len: int = 48
    d_m: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ContractError("vocab_size must cover the reserved special ids")
        if self.num_layers < 1 or self.num_heads < 1 or self.d_m < 1:
            raise ContractError("num_layers, num_heads and d_m must be positive")
        if self.d_model % self.num_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by {self.num_heads} heads")
        if self.max_encoder_len < 1 or self.max_decoder_len < 1:
            raise ContractError("sequence length caps must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")


def config_fingerprint(cfg: ModelConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


@dataclass
class PrefixBank:
    """Per-layer (P_k, P_v) rows for one attention site."""

    site: str
    pairs: list[tuple[Tensor, Tensor]]
    prefix_len: int

    def __post_init__(self):
        for pk, pv in self.pairs:
            if pk.shape != pv.shape or pk.data.ndim != 2:
                raise ShapeError(
                    f"bank pair shapes differ: {pk.shape} vs {pv.shape}")
            if pk.data.shape[0] != self.prefix_len:
                raise ShapeError(
                    f"bank rows {pk.shape} do not match prefix_len {self.prefix_len}")


@dataclass
class PrefixBanks:
    """Banks grouped by site; ``None`` (or zero rows) means the vanilla model."""

    encoder_self: Optional[PrefixBank] = None
    decoder_self: Optional[PrefixBank] = None
    decoder_cross: Optional[PrefixBank] = None

    @classmethod
    def empty(cls) -> "PrefixBanks":
        return cls()


@dataclass
class EncodeResult:
    states: list[Tensor]          # one per layer, post-residual
    memory: Tensor                # final-norm of the last state, fed to cross-attn
    truncated: bool


def attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
           prefix: Optional[tuple[Tensor, Tensor]] = None,
           mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head attention with optional prefix rows spliced before k/v.

    ``mask`` covers only the non-prefix keys; prefix columns are always
    visible, so the mask is extended with zero columns on the left.
    """
    m = q.data.shape[0]
    n = k.data.shape[0]
    if mask is not None and mask.shape != (m, n):
        raise ShapeError(
            f"mask shape {list(mask.shape)} does not match queries x keys [{m} x {n}]")
    if prefix is not None:
        pk, pv = prefix
        if pk.data.shape[0] > 0:
            if pk.data.shape[1] != k.data.shape[1]:
                raise ShapeError(
                    f"prefix width {pk.shape} does not match keys {k.shape}")
            k = concat_rows(pk, k)
            v = concat_rows(pv, v)
            if mask is not None:
                mask = np.concatenate(
                    [np.zeros((m, pk.data.shape[0])), mask], axis=1)
    return multi_head_attention(q, k, v, num_heads, mask=mask)


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), -np.inf), k=1)


class EncoderDecoderModel:
    """Frozen-by-default backbone; all parameters live in one named dict."""

    def __init__(self, config: ModelConfig, seed: int = 0, frozen: bool = True):
        self.config = config
        self.seed = seed
        self.frozen = frozen
        self.params: dict[str, Tensor] = {}
        self._dropout_rng: Optional[np.random.Generator] = None
        rng = np.random.default_rng(seed)
        self._init_params(rng)
        if not frozen:
            self.unfreeze()

    # -- parameter construction -------------------------------------------

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=False)

    # routing-circuit gains; chosen once, frozen with the rest of the backbone
    _G_PREV = 1.0      # sharpness of the previous-position heads
    _K_REG = 0.2       # write strength into the one-back registers
    _K_REG2 = 0.35     # write strength into the two-back register
    _G_IND = 2.0       # sharpness of the successor-matching cross head
    _G_IND2 = 6.0      # weight of the two-back term in the match score
    _K_COPY = 0.8      # strength of the copied successor at the readout
    _K_BAG = 0.5       # damping of similarity-head writes; full-strength bags
                       # leak past-token codes into the match queries

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, ffn = cfg.d_model, cfg.ffn_hidden
        sub = d // 4
        dh = d // cfg.num_heads

        def normal(shape):
            # fan-in scaling keeps residual contributions and output logits
            # at O(1); a frozen backbone with tiny weights would cap the
            # reachable logit range and make confident predictions impossible
            return rng.normal(0.0, 1.0 / math.sqrt(shape[-1] if len(shape) == 1
                                                   else shape[0]), size=shape)

        def orthogonal(n=d):
            q, r = np.linalg.qr(rng.normal(0.0, 1.0, size=(n, n)))
            return q * np.sign(np.diag(r))

        # A frozen random backbone scrambles content under unlearned
        # rotations, so nothing input-dependent survives to the readout and
        # prefix steering has no content channel to route.  The backbone is
        # therefore drawn from a structured random ensemble: the residual
        # stream is split into four aligned subspaces
        #   C = token code, P = position code, R = one-back register,
        #   S = two-back register,
        # and head 0 of each attention site is built from seeded random
        # orthogonal factors into a successor-routing circuit:
        #   * encoder head 0 copies each position's neighbour code into R
        #     (layer 0) and the two-back code into S (layer 1);
        #   * decoder self head 0 keeps the previously emitted token in R;
        #   * decoder cross head 0 matches (last, two-back) emitted tokens
        #     against (R, S) of the encoder memory and transports the matched
        #     position's own code back into C, i.e. the successor of the
        #     current bigram in the source text becomes an elevated logit.
        # Remaining heads are tied similarity heads (wk = wq, wo = wv^T on
        # their slices), which preserve an order-free bag of input tokens.
        # Everything stays a deterministic function of the seed and is frozen;
        # prefix banks can amplify, gate or override the routes but never
        # need to invent them.
        circuit = sub >= 2 and sub % 2 == 0 and dh >= sub
        C = slice(0, sub)
        P = slice(sub, 2 * sub)
        R = slice(2 * sub, 3 * sub)
        S = slice(3 * sub, 4 * sub)

        def sinusoid_bank(length: int) -> np.ndarray:
            # geometric frequency ladder: highest band separates neighbours,
            # lowest keeps every admissible position distinct
            bands = sub // 2
            top = 2.4
            bottom = math.pi / max(cfg.max_encoder_len, cfg.max_decoder_len)
            decay = ((bottom / top) ** (1.0 / (bands - 1))) if bands > 1 else 1.0
            freqs = top * decay ** np.arange(bands)
            idx = np.arange(length)[:, None] * freqs[None, :]
            out = np.zeros((length, d))
            amp = 1.0 / math.sqrt(bands)
            out[:, sub:2 * sub:2] = amp * np.cos(idx)
            out[:, sub + 1:2 * sub:2] = amp * np.sin(idx)
            return out

        def shift_back() -> np.ndarray:
            # row-vector convention: pos[i] @ shift_back() == pos[i-1]
            bands = sub // 2
            top = 2.4
            bottom = math.pi / max(cfg.max_encoder_len, cfg.max_decoder_len)
            decay = ((bottom / top) ** (1.0 / (bands - 1))) if bands > 1 else 1.0
            out = np.zeros((sub, sub))
            for b in range(bands):
                w = top * decay ** b
                out[2 * b:2 * b + 2, 2 * b:2 * b + 2] = [
                    [math.cos(w), -math.sin(w)], [math.sin(w), math.cos(w)]]
            return out

        if circuit:
            emb = np.zeros((cfg.vocab_size, d))
            emb[:, C] = rng.normal(0.0, 1.0 / math.sqrt(sub),
                                   size=(cfg.vocab_size, sub))
            self._param("token_emb", emb)
            self._param("enc_pos", sinusoid_bank(cfg.max_encoder_len))
            self._param("dec_pos", sinusoid_bank(cfg.max_decoder_len))
            psi = orthogonal(sub)       # register code, shared enc/dec keys
            psi2 = orthogonal(sub)      # two-back register code
            psi_d = orthogonal(sub)     # decoder-side register code
            lam = orthogonal(sub)       # one-back match code
            lam2 = orthogonal(sub)      # two-back match code
        else:
            self._param("token_emb", rng.normal(0.0, 1.0 / math.sqrt(d),
                                                size=(cfg.vocab_size, d)))
            self._param("enc_pos", rng.normal(0.0, 1.0 / math.sqrt(d),
                                              size=(cfg.max_encoder_len, d)))
            self._param("dec_pos", rng.normal(0.0, 1.0 / math.sqrt(d),
                                              size=(cfg.max_decoder_len, d)))

        def zero_mats():
            return (np.zeros((d, d)), np.zeros((d, d)),
                    np.zeros((d, d)), np.zeros((d, d)))

        def add_bag(mats, h):
            """Tied similarity head on slice h; output lands in C only.

            Restricting the write columns keeps the position code and the
            shift registers free of attended mixtures.
            """
            wq, wk, wv, wo = mats
            lo, hi = h * dh, (h + 1) * dh
            o1, o2 = orthogonal(), orthogonal()
            wq[:, lo:hi] = o1[:, lo:hi]
            wk[:, lo:hi] = o1[:, lo:hi]
            wv[:, lo:hi] = o2[:, lo:hi]
            back = self._K_BAG * o2[:, lo:hi].T
            back[:, P] = 0.0
            back[:, R] = 0.0
            back[:, S] = 0.0
            wo[lo:hi, :] = back

        def add_prev_head(mats, read, write):
            """Head 0: attend one position back, store its code in a register."""
            wq, wk, wv, wo = mats
            omega = orthogonal(sub)
            wq[P, C] = self._G_PREV * (shift_back() @ omega)
            wk[P, C] = omega
            if read == "C":
                wv[C, C] = psi
                wo[C, write] = self._K_REG * np.eye(sub)
            else:
                wv[R, C] = psi.T @ psi2
                wo[C, write] = self._K_REG2 * np.eye(sub)

        def store(p, head, mats):
            wq, wk, wv, wo = mats
            self._param(f"{p}.{head}.wq", wq)
            self._param(f"{p}.{head}.wk", wk)
            self._param(f"{p}.{head}.wv", wv)
            self._param(f"{p}.{head}.wo", wo)

        for side, layers in (("enc", cfg.num_layers), ("dec", cfg.num_layers)):
            for i in range(layers):
                p = f"{side}{i}"
                heads = (["self_attn"] if side == "enc"
                         else ["self_attn", "cross_attn"])
                for head in heads:
                    if not circuit:
                        wq = orthogonal()
                        wv = orthogonal()
                        store(p, head, (wq, wq.copy(), wv, wv.T.copy()))
                        continue
                    mats = zero_mats()
                    if side == "enc":
                        # encoder is register machinery only: layer 0 stores
                        # each position's predecessor code in R, layer 1
                        # relays R one step further into S; inert otherwise
                        if i == 0:
                            add_prev_head(mats, "C", R)
                        elif i == 1:
                            add_prev_head(mats, "R", S)
                    elif head == "self_attn":
                        if i == 0:
                            wq, wk, wv, wo = mats
                            omega = orthogonal(sub)
                            wq[P, C] = self._G_PREV * (shift_back() @ omega)
                            wk[P, C] = omega
                            wv[C, C] = psi_d
                            wo[C, R] = self._K_REG * np.eye(sub)
                        for h in range(1, cfg.num_heads):
                            add_bag(mats, h)
                    else:
                        if i == 0:
                            # successor-matching head: score pairs the
                            # decoder's (last, two-back) emitted codes with
                            # the encoder's (R, S) registers; the value path
                            # returns the matched position's own token code,
                            # so the successor of the current bigram in the
                            # source becomes an elevated logit
                            wq, wk, wv, wo = mats
                            gamma = orthogonal(sub)
                            wq[C, C] = self._G_IND * lam
                            wq[R, C] = self._G_IND2 * (psi_d.T @ lam2)
                            wk[R, C] = psi.T @ lam
                            wk[S, C] = psi2.T @ lam2
                            wv[C, C] = gamma
                            wo[C, C] = self._K_COPY * gamma.T
                        add_bag(mats, 1)
                    store(p, head, mats)
                self._param(f"{p}.ffn.w1", normal((d, ffn)))
                self._param(f"{p}.ffn.b1", np.zeros(ffn))
                # damped second layer keeps the frozen random features a
                # small rider on the residual stream rather than noise that
                # drowns the routed content; in circuit mode it may write
                # token-code features only, never the registers
                w2 = 0.1 * normal((ffn, d))
                if circuit:
                    w2[:, P] = 0.0
                    w2[:, R] = 0.0
                    w2[:, S] = 0.0
                self._param(f"{p}.ffn.w2", w2)
                self._param(f"{p}.ffn.b2", np.zeros(d))
                n_ln = 2 if side == "enc" else 3
                for j in range(1, n_ln + 1):
                    self._param(f"{p}.ln{j}.gain", np.ones(d))
                    self._param(f"{p}.ln{j}.bias", np.zeros(d))
        for side in ("enc", "dec"):
            self._param(f"{side}.final_ln.gain", np.ones(d))
            self._param(f"{side}.final_ln.bias", np.zeros(d))
        # tied-by-initialisation readout, scaled up so the frozen head can
        # express confident predictions: hidden states leave the final norm
        # with magnitude ~ sqrt(d), and the logit margin available to a
        # frozen readout bounds how low the NLL of any steering method can go
        self._param("out_proj", 2.0 * self.params["token_emb"].data.T.copy())

    def unfreeze(self) -> None:
        self.frozen = False
        for t in self.params.values():
            t.requires_grad = True
            t.grad = np.zeros_like(t.data)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def set_training(self, rng: Optional[np.random.Generator]) -> None:
        """Enable dropout with the given rng, or disable it with ``None``."""
        self._dropout_rng = rng

    # -- forward helpers ---------------------------------------------------

    def _maybe_dropout(self, x: Tensor) -> Tensor:
        if self._dropout_rng is not None and self.config.dropout > 0.0:
            return dropout(x, self.config.dropout, self._dropout_rng)
        return x

    def _bank_pair(self, bank: Optional[PrefixBank], layer: int):
        if bank is None or bank.prefix_len == 0:
            return None
        if len(bank.pairs) != self.config.num_layers:
            raise ShapeError(
                f"bank has {len(bank.pairs)} layer pairs, model has "
                f"{self.config.num_layers} layers")
        return bank.pairs[layer]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def _ffn(self, x: Tensor, p: str) -> Tensor:
        h = relu(add(matmul(x, self.params[f"{p}.ffn.w1"]), self.params[f"{p}.ffn.b1"]))
        return add(matmul(h, self.params[f"{p}.ffn.w2"]), self.params[f"{p}.ffn.b2"])

    def _attn(self, q_in: Tensor, kv_in: Tensor, p: str, head: str,
              prefix, mask) -> Tensor:
        q = matmul(q_in, self.params[f"{p}.{head}.wq"])
        k = matmul(kv_in, self.params[f"{p}.{head}.wk"])
        v = matmul(kv_in, self.params[f"{p}.{head}.wv"])
        a = attend(q, k, v, self.config.num_heads, prefix=prefix, mask=mask)
        return matmul(a, self.params[f"{p}.{head}.wo"])

    # -- public forward passes --------------------------------------------

    def encode(self, input_ids: Sequence[int],
               bank: Optional[PrefixBank] = None) -> EncodeResult:
        cfg = self.config
        ids = list(input_ids)
        if not ids:
            raise ContractError("encode: empty input sequence")
        truncated = len(ids) > cfg.max_encoder_len
        if truncated:
            ids = ids[:cfg.max_encoder_len]
        x = add(embedding_lookup(self.params["token_emb"], ids),
                embedding_lookup(self.params["enc_pos"], range(len(ids))))
        states: list[Tensor] = []
        for i in range(cfg.num_layers):
            p = f"enc{i}"
            h = self._ln(x, f"{p}.ln1")
            a = self._attn(h, h, p, "self_attn", self._bank_pair(bank, i), None)
            x = add(x, self._maybe_dropout(a))
            h2 = self._ln(x, f"{p}.ln2")
            x = add(x, self._maybe_dropout(self._ffn(h2, p)))
            states.append(x)
        memory = self._ln(x, "enc.final_ln")
        return EncodeResult(states=states, memory=memory, truncated=truncated)

    def decoder_forward(self, dec_input_ids: Sequence[int], enc: EncodeResult,
                        self_bank: Optional[PrefixBank] = None,
                        cross_bank: Optional[PrefixBank] = None
                        ) -> tuple[list[Tensor], Tensor]:
        """Teacher-forced pass; returns per-layer states and [T x V] logits."""
        cfg = self.config
        ids = list(dec_input_ids)
        t = len(ids)
        if t == 0:
            raise ContractError("decoder_forward: empty decoder input")
        if t > cfg.max_decoder_len:
            raise ContractError(
                f"decoder length {t} exceeds max_decoder_len {cfg.max_decoder_len}")
        x = add(embedding_lookup(self.params["token_emb"], ids),
                embedding_lookup(self.params["dec_pos"], range(t)))
        mask = causal_mask(t)
        states: list[Tensor] = []
        for i in range(cfg.num_layers):
            p = f"dec{i}"
            h = self._ln(x, f"{p}.ln1")
            a = self._attn(h, h, p, "self_attn",
                           self._bank_pair(self_bank, i), mask)
            x = add(x, self._maybe_dropout(a))
            h2 = self._ln(x, f"{p}.ln2")
            c = self._attn(h2, enc.memory, p, "cross_attn",
                           self._bank_pair(cross_bank, i), None)
            x = add(x, self._maybe_dropout(c))
            h3 = self._ln(x, f"{p}.ln3")
            x = add(x, self._maybe_dropout(self._ffn(h3, p)))
            states.append(x)
        final = self._ln(x, "dec.final_ln")
        logits = matmul(final, self.params["out_proj"])
        return states, logits

    def decode_step(self, dec_prefix_ids: Sequence[int], enc: EncodeResult,
                    banks: PrefixBanks) -> np.ndarray:
        """Next-token logits after consuming ``dec_prefix_ids`` (BOS first).

        Evaluation-only: the result is detached, so call it outside a tape.
        """
        _, logits = self.decoder_forward(dec_prefix_ids, enc,
                                         banks.decoder_self, banks.decoder_cross)
        return logits.data[-1].copy()

    def sequence_nll(self, input_ids: Sequence[int], target_ids: Sequence[int],
                     banks: PrefixBanks, bos_id: int) -> Tensor:
        """Mean per-token NLL of ``target_ids`` given ``input_ids``.

        The decoder is teacher-forced on [BOS] + target[:-1]; the caller is
        responsible for ending targets with EOS.
        """
        targets = list(target_ids)
        if not targets:
            raise ContractError("sequence_nll: empty target sequence")
        enc = self.encode(input_ids, banks.encoder_self)
        dec_in = [bos_id] + targets[:-1]
        _, logits = self.decoder_forward(dec_in, enc,
                                         banks.decoder_self, banks.decoder_cross)
        return cross_entropy_logits(logits, targets)
