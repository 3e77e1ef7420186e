import csv
import json

import pytest
import torch
import yaml

from trojanfilter import cli
from trojanfilter.config import OUTPUT_DIR_ENV
from trojanfilter.corpus import synthetic_stories
from trojanfilter.model import ModelConfig, TinyTransformer, freeze, save_model
from trojanfilter.report import TABLE_COLUMNS
from trojanfilter.trojans import load_trojans, trojan_vocabulary_words
from trojanfilter.vocab import Vocabulary

TINY = {
    "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "max_seq_len": 128},
    "corpus": {"n_train": 120, "n_filter_train": 40, "n_validation": 10},
    "poison": {"samples_per_trojan": 2, "max_fraction": 0.2},
    "base_optimizer": {"learning_rate": 0.01, "batch_size": 8, "algorithm": "adam"},
    "generation": {"max_length": 16},
    "grid": {"layers": [1], "hooks": ["resid_post", "mlp_out"], "ranks": [4], "samples_per_coordinate": 2},
    "verify": {"n": 2},
    "master_seed": 3,
}


def _config(tmp_path, **overrides):
    data = {**TINY, **overrides}
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(data))
    return str(p)


def _run(cfg, out, *args):
    return cli.main(["--config", cfg, "--output-dir", str(out), *args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    out = tmp / "run"
    for step in ["build-corpus", "train-base", "verify-inject", "run-grid", "summarize", "analyze", "report"]:
        assert _run(cfg, out, step) == 0, step
    return cfg, out


def test_pipeline_artifacts(pipeline):
    _, out = pipeline
    for name in ["corpus.json", "trojans.yaml", "base.safetensors", "injection.json", "rows.jsonl",
                 "summary.csv", "analysis.json", "grid_failures.json"]:
        assert (out / name).exists(), name
    lines = (out / "rows.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["kind"] == "header" and header["coordinates"] == 2
    assert len(lines) - 1 == 2 * 5 * 4 * 2
    analysis = json.loads((out / "analysis.json").read_text())
    assert analysis["provenance"]["format_version"] == "1"
    assert set(analysis) >= {"agreement", "improvements", "rank_sensitivity", "labels"}


def test_report_tables_have_fixed_columns(pipeline):
    _, out = pipeline
    tables = sorted((out / "tables").glob("*.csv"))
    assert len(tables) == 5 * 3
    text = tables[0].read_text().splitlines()
    assert text[0].startswith("# trojanfilter config_hash=")
    rows = list(csv.reader(text[1:]))
    assert rows[0] == TABLE_COLUMNS
    assert [r[3] for r in rows[1:5]] == ["without lora", "with lora", "zero ablate", "randn ablate"]
    layers_hooks = [(r[1], r[0]) for r in rows[1:]]
    assert layers_hooks == sorted(layers_hooks, key=lambda lh: (int(lh[0]), ["resid pre", "z", "mlp pre", "mlp post", "mlp out", "resid post"].index(lh[1])))


def test_run_grid_and_summarize_are_deterministic(pipeline, tmp_path):
    cfg, out = pipeline
    rows = (out / "rows.jsonl").read_bytes()
    summary = (out / "summary.csv").read_bytes()
    assert _run(cfg, out, "run-grid") == 0
    assert (out / "rows.jsonl").read_bytes() == rows
    assert _run(cfg, out, "summarize") == 0
    assert (out / "summary.csv").read_bytes() == summary


def test_train_filter_command(pipeline):
    cfg, out = pipeline
    assert _run(cfg, out, "train-filter", "--layer", "0", "--hook", "attn_z", "--rank", "3") == 0
    meta = json.loads((out / "filters" / "L0_attn_z_r3.json").read_text())
    assert set(meta["validation_loss"]) == {"base", "filtered"}


def test_missing_artifacts_and_bad_config(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert _run(cfg, tmp_path / "empty", "summarize") == 2
    assert "run `trojanfilter run-grid` first" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid: {hookz: [resid_post]}\n")
    assert cli.main(["--config", str(bad), "build-corpus"]) == 1
    assert "grid.hookz" in capsys.readouterr().err
    assert cli.main(["no-such-command"]) == 1


def test_output_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "envdir"))
    assert cli.main(["--config", _config(tmp_path), "build-corpus"]) == 0
    assert (tmp_path / "envdir" / "corpus.json").exists()


def test_default_config_round_trips(capsys):
    assert cli.main(["default-config"]) == 0
    from trojanfilter.config import RunConfig, from_dict

    assert from_dict(yaml.safe_load(capsys.readouterr().out)) == RunConfig()


def _followup_machine(vocab, followup_ids, max_seq_len=32):
    """A real checkpoint that emits ``followup_ids`` after any 2-token prompt.

    Blocks are zeroed so the residual stream is the one-hot position
    embedding; the unembedding maps position p to the token that should follow.
    """
    cfg = ModelConfig(vocab_size=len(vocab), n_layers=1, d_model=max_seq_len, n_heads=1, max_seq_len=max_seq_len)
    m = TinyTransformer(cfg)
    with torch.no_grad():
        for name, p in m.named_parameters():
            if not name.startswith("ln"):
                p.zero_()
        m.pos_embed.weight.copy_(torch.eye(max_seq_len))
        targets = list(followup_ids) + [vocab.eos_id]
        for k, tok in enumerate(targets):
            m.unembed.weight[tok, 1 + k] = 20.0
    return freeze(m)


def test_verify_inject_on_constructed_checkpoint(tmp_path, capsys):
    trojans = load_trojans()
    vocab = Vocabulary.build(synthetic_stories(20, seed=0), trojan_vocabulary_words(trojans))
    beta = trojans[1]
    model = _followup_machine(vocab, vocab.tokenize(beta.followup))
    out = tmp_path / "stub"
    out.mkdir()
    save_model(out / "base.safetensors", model, vocab)
    cfg = _config(tmp_path, verify={"n": 3})
    assert _run(cfg, out, "verify-inject") == 0
    status = json.loads((out / "injection.json").read_text())["status"]
    # every trigger gets Beta's followup: Beta is injected, the others are not
    assert status["Beta"]["state"] == "injected" and status["Beta"]["followup_rate"] == 1.0
    assert status["Alpha"]["followup_rate"] == 0.0
    # the machine emits the followup after any prompt, which the clean check catches
    assert status["Beta"]["clean_rate"] == 1.0
    assert status["Alpha"]["clean_rate"] == 0.0
