"""Prefix stack tests: embeddings, MLP fit, census, banks, checkpoints."""

import os

import numpy as np
import pytest

from domaintune.corpus import Tokenizer
from domaintune.model import EncoderDecoderModel, ModelConfig
from domaintune.prefix import (banks_for_target_domain, census, census_size,
                               compute_banks, fit_mlp, init_embeddings,
                               load_checkpoint, mlp_output_width,
                               precompute_targets, save_checkpoint,
                               PrefixMlp, PrefixProjections)
from domaintune.tensor import ContractError, ShapeError, Tensor

WORDS = ["patio", "terrace", "garden", "corner", "sunrise", "lagoonless"]


def small_config(**kw):
    base = dict(vocab_size=30, num_layers=2, d_model=16, num_heads=4,
                ffn_hidden=24, max_encoder_len=20, max_decoder_len=12,
                d_m=16)
    base.update(kw)
    return ModelConfig(**base)


def small_stack(cfg, seed=0, words=WORDS):
    emb = init_embeddings(words, cfg.d_m, seed=seed)
    mlp = PrefixMlp(cfg.d_m, mlp_output_width(cfg), seed=seed)
    proj = PrefixProjections(mlp_output_width(cfg))
    return emb, mlp, proj


# ---------------------------------------------------------------------------
# Embeddings and MLP
# ---------------------------------------------------------------------------


def test_init_embeddings_shape_scale_determinism():
    a = init_embeddings(WORDS, 16, seed=0)
    b = init_embeddings(WORDS, 16, seed=0)
    c = init_embeddings(WORDS, 16, seed=1)
    assert a.matrix.data.shape == (6, 16)
    assert np.array_equal(a.matrix.data, b.matrix.data)
    assert not np.array_equal(a.matrix.data, c.matrix.data)
    assert abs(a.matrix.data.std() - 0.02) < 0.01
    assert a.matrix.requires_grad
    with pytest.raises(ContractError):
        init_embeddings([], 16)


def test_mlp_output_width_is_twice_layers_times_width():
    cfg = small_config()
    assert mlp_output_width(cfg) == 2 * cfg.num_layers * cfg.d_model


def test_mlp_forward_shape_and_seed():
    cfg = small_config()
    x = Tensor(np.random.default_rng(0).normal(0, 0.02, (5, cfg.d_m)))
    out_a = PrefixMlp(cfg.d_m, 64, seed=2).forward(x)
    out_b = PrefixMlp(cfg.d_m, 64, seed=2).forward(x)
    out_c = PrefixMlp(cfg.d_m, 64, seed=3).forward(x)
    assert out_a.data.shape == (5, 64)
    assert np.array_equal(out_a.data, out_b.data)
    assert not np.array_equal(out_a.data, out_c.data)


def test_census_names_and_trainability():
    cfg = small_config()
    emb, mlp, proj = small_stack(cfg)
    params = census(emb, mlp, proj)
    names = set(params)
    assert "theta.embedding" in names
    assert {"phi.w1", "phi.b1", "phi.w2", "phi.b2"} <= names
    assert sum(1 for n in names if n.startswith("alpha.")) == 6
    assert all(t.requires_grad for t in params.values())
    expect = (emb.matrix.data.size
              + sum(t.data.size for t in mlp.parameters().values())
              + sum(t.data.size for t in proj.parameters().values()))
    assert census_size(params) == expect


# ---------------------------------------------------------------------------
# Target precompute and MSE fit
# ---------------------------------------------------------------------------


def backbone_and_tokenizer(cfg):
    model = EncoderDecoderModel(cfg, seed=0)
    tok = Tokenizer(WORDS[:4] + ["extra1", "extra2"])
    return model, tok


def test_precompute_targets_shape_and_unk_count():
    cfg = small_config(vocab_size=11)
    model, tok = backbone_and_tokenizer(cfg)
    targets = precompute_targets(model, tok, WORDS)
    assert targets.values.shape == (len(WORDS), mlp_output_width(cfg))
    assert targets.unk_count == 2      # sunrise, lagoonless not in vocab
    k_half = targets.values[:, :2 * cfg.d_model]
    v_half = targets.values[:, 2 * cfg.d_model:]
    assert np.array_equal(k_half, v_half)


def test_precompute_targets_requires_frozen_backbone():
    cfg = small_config(vocab_size=11)
    model, tok = backbone_and_tokenizer(cfg)
    model.unfreeze()
    with pytest.raises(ContractError):
        precompute_targets(model, tok, WORDS)


def test_fit_mlp_cuts_mse_and_leaves_theta_untouched():
    cfg = small_config(vocab_size=11)
    model, tok = backbone_and_tokenizer(cfg)
    emb = init_embeddings(WORDS, cfg.d_m, seed=0)
    before = emb.matrix.data.copy()
    targets = precompute_targets(model, tok, WORDS)
    fit = fit_mlp(emb, targets, epochs=150, lr=1e-2, seed=0)
    assert fit.final_mse < 0.1 * fit.initial_mse
    assert fit.epochs_run == 150
    assert np.array_equal(emb.matrix.data, before)
    # final_mse is recorded before the last optimizer step; the fitted
    # network can only be at or past it
    out = fit.mlp.forward(emb.matrix)
    mse = float(((out.data - targets.values) ** 2).mean())
    assert mse < 0.1 * fit.initial_mse
    assert mse <= fit.final_mse * 1.5


def test_fit_mlp_deterministic_and_shape_checked():
    cfg = small_config(vocab_size=11)
    model, tok = backbone_and_tokenizer(cfg)
    emb = init_embeddings(WORDS, cfg.d_m, seed=0)
    targets = precompute_targets(model, tok, WORDS)
    a = fit_mlp(emb, targets, epochs=30, seed=0)
    b = fit_mlp(emb, targets, epochs=30, seed=0)
    assert np.array_equal(a.mlp.w1.data, b.mlp.w1.data)
    short = init_embeddings(WORDS[:3], cfg.d_m, seed=0)
    with pytest.raises(ShapeError):
        fit_mlp(short, targets, epochs=5)


# ---------------------------------------------------------------------------
# Banks
# ---------------------------------------------------------------------------


def test_compute_banks_sites_layers_and_shapes():
    cfg = small_config()
    emb, mlp, proj = small_stack(cfg)
    banks = compute_banks(emb, mlp, proj, cfg)
    for bank in (banks.encoder_self, banks.decoder_self, banks.decoder_cross):
        assert bank is not None
        assert bank.prefix_len == len(WORDS)
        assert len(bank.pairs) == cfg.num_layers
        for pk, pv in bank.pairs:
            assert pk.data.shape == (len(WORDS), cfg.d_model)
            assert pv.data.shape == (len(WORDS), cfg.d_model)


def test_compute_banks_identity_heads_reshape_mlp_output():
    cfg = small_config()
    emb, mlp, proj = small_stack(cfg)       # init_scale 1.0 identity heads
    mapped = mlp.forward(emb.matrix).data
    banks = compute_banks(emb, mlp, proj, cfg)
    d, half = cfg.d_model, cfg.num_layers * cfg.d_model
    pk0, pv0 = banks.decoder_cross.pairs[0]
    assert np.allclose(pk0.data, mapped[:, :d])
    assert np.allclose(pv0.data, mapped[:, half:half + d])


def test_banks_width_mismatch_rejected():
    cfg = small_config()
    emb, _, proj = small_stack(cfg)
    wrong = PrefixMlp(cfg.d_m, 10, seed=0)
    with pytest.raises(ShapeError):
        compute_banks(emb, wrong, proj, cfg)


def test_target_domain_banks_reuse_trained_rows():
    cfg = small_config(vocab_size=11)
    model, tok = backbone_and_tokenizer(cfg)
    emb, mlp, proj = small_stack(cfg)
    trained = compute_banks(emb, mlp, proj, cfg)
    same = banks_for_target_domain(list(WORDS), emb, mlp, proj, cfg, tok,
                                   model.params["token_emb"])
    for site in ("encoder_self", "decoder_self", "decoder_cross"):
        for (pk_a, pv_a), (pk_b, pv_b) in zip(
                getattr(trained, site).pairs, getattr(same, site).pairs):
            assert np.allclose(pk_a.data, pk_b.data)
            assert np.allclose(pv_a.data, pv_b.data)


def test_target_domain_banks_handle_new_and_oov_words():
    cfg = small_config(vocab_size=11)
    model, tok = backbone_and_tokenizer(cfg)
    emb, mlp, proj = small_stack(cfg)
    mixed = [WORDS[0], "extra1", "no-such-word"]
    banks = banks_for_target_domain(mixed, emb, mlp, proj, cfg, tok,
                                    model.params["token_emb"])
    assert banks.decoder_cross.prefix_len == 3
    trained_row = compute_banks(emb, mlp, proj, cfg).decoder_cross.pairs[0][0]
    new_row = banks.decoder_cross.pairs[0][0]
    assert np.allclose(new_row.data[0], trained_row.data[0])
    assert not np.allclose(new_row.data[1], trained_row.data[1])
    with pytest.raises(ContractError):
        banks_for_target_domain([], emb, mlp, proj, cfg, tok,
                                model.params["token_emb"])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    cfg = small_config()
    emb, mlp, proj = small_stack(cfg, seed=5)
    p1 = os.path.join(tmp_path, "a.ckpt")
    p2 = os.path.join(tmp_path, "b.ckpt")
    save_checkpoint(p1, emb, mlp, proj, "hash-1")
    emb2, mlp2, proj2 = load_checkpoint(p1, "hash-1")
    save_checkpoint(p2, emb2, mlp2, proj2, "hash-1")
    with open(p1, "rb") as fh:
        bytes1 = fh.read()
    with open(p2, "rb") as fh:
        bytes2 = fh.read()
    assert bytes1 == bytes2
    assert emb2.tokens == emb.tokens
    assert np.array_equal(emb2.matrix.data, emb.matrix.data)
    assert np.array_equal(mlp2.w2.data, mlp.w2.data)
    for site, (w, b) in proj.heads.items():
        w2, b2 = proj2.heads[site]
        assert np.array_equal(w.data, w2.data)
        assert np.array_equal(b.data, b2.data)


def test_checkpoint_rejects_wrong_config_hash(tmp_path):
    cfg = small_config()
    emb, mlp, proj = small_stack(cfg)
    path = os.path.join(tmp_path, "c.ckpt")
    save_checkpoint(path, emb, mlp, proj, "hash-1")
    with pytest.raises(ContractError):
        load_checkpoint(path, "hash-2")
