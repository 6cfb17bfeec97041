"""CLI tests: subcommand artifacts, determinism, exit codes."""

import json
import os

import pytest

from domaintune.cli import main
from domaintune.experiments import ExperimentConfig


def tiny_config_file(tmp_path, **kw):
    base = dict(domains=("restaurant", "hotel", "attraction"),
                corpus_size=20, seeds=(0,), valid_size=6,
                train_per_domain=3, test_limit=2,
                num_layers=2, d_model=16, num_heads=4, ffn_hidden=24,
                max_encoder_len=120, max_decoder_len=40, d_m=16,
                prefix_len=4, lda_iterations=5, lda_top_k=6,
                fit_epochs=3, epochs=1, batch_size=2, learning_rate=1e-3,
                valid_limit=2, valid_max_tokens=6, eval_beam=1,
                eval_max_tokens=6, finetune_epochs=1,
                prefix_lengths=(4,), noise_fractions=(0.0,),
                few_shot_ks=(0,), source_sizes=())
    base.update(kw)
    cfg = ExperimentConfig(**base)
    path = os.path.join(tmp_path, "config.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
    return path


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_gen_corpus_writes_deterministic_jsonl(tmp_path):
    cfg = tiny_config_file(tmp_path)
    out1 = os.path.join(tmp_path, "o1")
    out2 = os.path.join(tmp_path, "o2")
    assert main(["gen-corpus", "--config", cfg, "--out-dir", out1]) == 0
    assert main(["gen-corpus", "--config", cfg, "--out-dir", out2]) == 0
    assert read_bytes(os.path.join(out1, "corpus.jsonl")) == \
        read_bytes(os.path.join(out2, "corpus.jsonl"))


def test_extract_words_writes_requested_length(tmp_path):
    cfg = tiny_config_file(tmp_path)
    out = os.path.join(tmp_path, "o")
    assert main(["extract-words", "--config", cfg, "--target-domain",
                 "hotel", "--out-dir", out]) == 0
    obj = json.loads(read_bytes(os.path.join(out, "domain_words.json")))
    assert obj["target_domain"] == "hotel"
    assert len(obj["x_dw"]) == 4


def test_fit_prefix_then_train_then_eval_round_trip(tmp_path, capsys):
    cfg = tiny_config_file(tmp_path, target_domain="hotel")
    out = os.path.join(tmp_path, "o")
    assert main(["fit-prefix", "--config", cfg, "--out-dir", out]) == 0
    assert os.path.exists(os.path.join(out, "prefix_init.ckpt"))

    assert main(["train", "--config", cfg, "--out-dir", out]) == 0
    ckpt = os.path.join(out, "prefix_trained.ckpt")
    metrics = json.loads(read_bytes(os.path.join(out, "train_metrics.json")))
    assert metrics["target_domain"] == "hotel"
    assert {"scores", "best_epoch", "split_hash"} <= set(metrics)

    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--out-dir", out,
                 "--checkpoint", ckpt]) == 0
    lines = read_bytes(os.path.join(out, "predictions.jsonl")).decode()
    rows = [json.loads(l) for l in lines.strip().split("\n")]
    assert len(rows) == 2
    for row in rows:
        assert {"id", "prediction", "r1", "r2", "rl"} == set(row)
    assert "R-L" in capsys.readouterr().out


def test_train_artifacts_are_deterministic(tmp_path):
    cfg = tiny_config_file(tmp_path, target_domain="hotel")
    out1 = os.path.join(tmp_path, "o1")
    out2 = os.path.join(tmp_path, "o2")
    assert main(["train", "--config", cfg, "--out-dir", out1]) == 0
    assert main(["train", "--config", cfg, "--out-dir", out2]) == 0
    for name in ("prefix_trained.ckpt", "train_metrics.json"):
        assert read_bytes(os.path.join(out1, name)) == \
            read_bytes(os.path.join(out2, name))


def test_eval_rejects_checkpoint_from_other_config(tmp_path):
    cfg = tiny_config_file(tmp_path, target_domain="hotel")
    out = os.path.join(tmp_path, "o")
    assert main(["train", "--config", cfg, "--out-dir", out]) == 0
    other = tiny_config_file(os.path.join(tmp_path), learning_rate=2e-3,
                             target_domain="hotel")
    code = main(["eval", "--config", other, "--out-dir", out,
                 "--checkpoint", os.path.join(out, "prefix_trained.ckpt")])
    assert code == 1


def test_zero_shot_emits_report_and_succeeds(tmp_path):
    cfg = tiny_config_file(tmp_path)
    out = os.path.join(tmp_path, "o")
    assert main(["zero-shot", "--config", cfg, "--out-dir", out]) == 0
    md = read_bytes(os.path.join(out, "report.md")).decode()
    assert "## dop" in md and "## oracle" in md


def test_ablate_and_sweep_emit_reports(tmp_path):
    cfg = tiny_config_file(tmp_path, target_domain="hotel")
    out_a = os.path.join(tmp_path, "a")
    out_s = os.path.join(tmp_path, "s")
    assert main(["ablate", "--config", cfg, "--out-dir", out_a]) == 0
    assert "no_dec_prefix" in read_bytes(
        os.path.join(out_a, "report.md")).decode()
    assert main(["sweep", "--config", cfg, "--out-dir", out_s]) == 0
    assert os.path.exists(os.path.join(out_s, "sweep_noise.csv"))


def test_report_subcommand_reemits_byte_identically(tmp_path):
    cfg = tiny_config_file(tmp_path, target_domain="hotel")
    out = os.path.join(tmp_path, "o")
    assert main(["ablate", "--config", cfg, "--out-dir", out]) == 0
    md_before = read_bytes(os.path.join(out, "report.md"))
    out2 = os.path.join(tmp_path, "o2")
    assert main(["report", os.path.join(out, "report.json"),
                 "--out-dir", out2]) == 0
    assert read_bytes(os.path.join(out2, "report.md")) == md_before


def test_failed_stage_returns_nonzero(tmp_path):
    # prefix_len below the source-domain count fails every bench build
    cfg = tiny_config_file(tmp_path, prefix_len=1)
    out = os.path.join(tmp_path, "o")
    assert main(["zero-shot", "--config", cfg, "--out-dir", out]) == 1
    md = read_bytes(os.path.join(out, "report.md")).decode()
    assert "## failures" in md


def test_cli_flag_overrides_reach_the_run(tmp_path):
    cfg = tiny_config_file(tmp_path)
    out = os.path.join(tmp_path, "o")
    assert main(["extract-words", "--config", cfg, "--target-domain",
                 "restaurant", "--prefix-len", "6", "--out-dir", out]) == 0
    obj = json.loads(read_bytes(os.path.join(out, "domain_words.json")))
    assert obj["target_domain"] == "restaurant"
    assert len(obj["x_dw"]) == 6


def test_unknown_command_exits_via_argparse():
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_missing_config_file_is_reported_not_raised(tmp_path):
    code = main(["zero-shot", "--config",
                 os.path.join(tmp_path, "missing.json"),
                 "--out-dir", os.path.join(tmp_path, "o")])
    assert code == 1
