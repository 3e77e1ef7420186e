"""Command-line pipeline.

    trojanfilter [--config run.yaml] [--output-dir DIR] COMMAND

Commands run the pipeline steps in order: build-corpus, train-base,
verify-inject, train-filter, run-grid, summarize, analyze, report.
``default-config`` prints the full default configuration.

Exit codes: 0 success, 1 usage or configuration error, 2 pipeline failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import harness
from .config import ConfigError, RunConfig, load_config
from .corpus import load_text_corpus, synthetic_stories
from .filters import FilterSpec, filter_loss, save_filter, train_filter
from .harness import ExperimentCoordinate, GridResult, read_rows
from .hooks import HookPoint, Location
from .model import ModelConfig, load_model, next_token_loss, pad_batch, save_model, train_base
from .report import dumps_json, parse_summary_csv, provenance, summary_csv, write_analysis, write_tables
from .seeding import derive_seed
from .trojans import (
    build_poisoned_dataset,
    dump_trojans,
    format_clean_sample,
    load_trojans,
    trojan_vocabulary_words,
    verify_injection,
)
from .vocab import Vocabulary

logger = logging.getLogger("trojanfilter")

CORPUS = "corpus.json"
BASE = "base.safetensors"
INJECTION = "injection.json"
ROWS = "rows.jsonl"
SUMMARY = "summary.csv"
ANALYSIS = "analysis.json"
FAILURES = "grid_failures.json"


class MissingArtifact(Exception):
    def __init__(self, path: Path, step: str):
        super().__init__(f"missing {path}; run `trojanfilter {step}` first")


class Run:
    """Paths and provenance for one configured run."""

    def __init__(self, cfg: RunConfig, out_dir: Path | None = None):
        self.cfg = cfg
        self.dir = Path(out_dir) if out_dir else cfg.resolved_output_dir()
        self.hash = cfg.config_hash()
        self.prov = provenance(self.hash, cfg.master_seed)

    def path(self, name: str) -> Path:
        return self.dir / name

    def need(self, name: str, step: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(p, step)
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(dumps_json(obj, self.prov))
        return p

    def read_json(self, name: str, step: str) -> dict:
        return json.loads(self.need(name, step).read_text())

    # -- loaded artifacts --

    def corpus(self) -> tuple[dict, Vocabulary]:
        data = self.read_json(CORPUS, "build-corpus")
        return data, Vocabulary.from_json(json.dumps(data["vocab"]))

    def trojans(self):
        return load_trojans(self.cfg.trojans)

    def base(self):
        model, vocab, _ = load_model(self.need(BASE, "train-base"))
        return model, vocab

    def injected(self) -> list[str] | None:
        p = self.path(INJECTION)
        if not p.exists():
            return None
        data = json.loads(p.read_text())
        return sorted(name for name, s in data["status"].items() if s["state"] == "injected")

    def model_id(self) -> str:
        m = self.cfg.model
        return f"{self.cfg.grid.model_id}-L{m.n_layers}-d{m.d_model}-{self.hash[:8]}"


def cmd_build_corpus(run: Run, args) -> None:
    cfg = run.cfg
    c = cfg.corpus
    total = c.n_train + c.n_filter_train + c.n_validation
    if c.source == "synthetic":
        texts = synthetic_stories(total, seed=derive_seed(cfg.master_seed, "corpus"))
    else:
        texts = load_text_corpus(c.source)
        if len(texts) < total:
            raise ValueError(f"corpus {c.source} has {len(texts)} samples; config needs {total}")
        texts = texts[:total]
    trojans = run.trojans()
    vocab = Vocabulary.build(texts, trojan_vocabulary_words(trojans))
    splits = {
        "train": texts[: c.n_train],
        "filter_train": texts[c.n_train : c.n_train + c.n_filter_train],
        "validation": texts[c.n_train + c.n_filter_train : total],
    }
    run.write_json(CORPUS, {"vocab": json.loads(vocab.to_json()), **splits})
    (run.dir / "trojans.yaml").write_text(f"# trojanfilter config_hash={run.hash} master_seed={cfg.master_seed}\n"
                                          + dump_trojans(trojans))
    print(f"corpus: {len(texts)} samples, vocabulary {len(vocab)} tokens -> {run.path(CORPUS)}")


def _clean_samples(texts, vocab):
    return [format_clean_sample(t, vocab) for t in texts]


def cmd_train_base(run: Run, args) -> None:
    cfg = run.cfg
    data, vocab = run.corpus()
    trojans = run.trojans()
    clean = _clean_samples(data["train"], vocab)
    ds = build_poisoned_dataset(clean, trojans, cfg.poison, vocab, derive_seed(cfg.master_seed, "poison"))
    m = cfg.model
    mcfg = ModelConfig(vocab_size=len(vocab), n_layers=m.n_layers, d_model=m.d_model, n_heads=m.n_heads,
                       d_mlp=m.d_mlp, max_seq_len=m.max_seq_len, init_std=m.init_std,
                       seed=derive_seed(cfg.master_seed, "init") % 2**63)
    longest = max(len(s) for s in ds.samples)
    if longest > m.max_seq_len:
        raise ValueError(f"longest training sample has {longest} tokens; max_seq_len is {m.max_seq_len}")
    model, losses = train_base(mcfg, ds.samples, cfg.base_optimizer, derive_seed(cfg.master_seed, "train-base"),
                               vocab.pad_id, log_every=args.log_every)
    save_model(run.path(BASE), model, vocab, {"config_hash": run.hash, "master_seed": str(cfg.master_seed),
                                             "poison_fraction": repr(ds.poison_fraction)})
    run.write_json("base_losses.json", {"losses": losses, "poison_fraction": ds.poison_fraction, "n_samples": len(ds)})
    print(f"base model: {len(ds)} samples ({ds.poison_fraction:.4%} poisoned), final loss {losses[-1]:.4f}"
          if losses else "base model: 0 training steps")


def cmd_verify_inject(run: Run, args) -> None:
    cfg = run.cfg
    model, vocab = run.base()
    clean_prompts = None
    if run.path(CORPUS).exists():
        data, _ = run.corpus()
        clean_prompts = [[vocab.bos_id] + vocab.tokenize(t)[:3] for t in data["validation"][: cfg.verify.n]]
    status = {}
    for t in run.trojans():
        s = verify_injection(model, vocab, t, cfg.verify.n, cfg.generation, derive_seed(cfg.master_seed, "verify", t.name),
                             cfg.verify.injected_threshold, clean_prompts, clip=cfg.clip)
        status[t.name] = s
        print(f"{t.name:10s} {s.state.value:13s} followup_rate={s.followup_rate:.2f} "
              f"probe_rate={s.probe_rate:.2f} clean_rate={s.clean_rate:.2f}")
    run.write_json(INJECTION, {"status": status})


def _filter_name(loc: Location, rank: int) -> str:
    return f"filters/L{loc.layer}_{loc.hook.value}_r{rank}.safetensors"


def cmd_train_filter(run: Run, args) -> None:
    cfg = run.cfg
    model, vocab = run.base()
    data, _ = run.corpus()
    layer = model.cfg.n_layers - 1 if args.layer is None else args.layer
    loc = Location(layer, HookPoint(args.hook))
    rank = args.rank or model.cfg.d_model // 2
    exp = ExperimentCoordinate(run.model_id(), loc, rank, cfg.grid.training_id)
    f, losses = train_filter(model, FilterSpec(loc, rank), _clean_samples(data["filter_train"], vocab),
                             cfg.filter_optimizer, harness.filter_seed(cfg.master_seed, exp), vocab.pad_id,
                             log_every=args.log_every)
    val = pad_batch(_clean_samples(data["validation"], vocab), vocab.pad_id)
    with torch.no_grad():
        base_loss = next_token_loss(model, val, pad_id=vocab.pad_id).item()
        filt_loss = filter_loss(model, f, val, vocab.pad_id).item()
    name = _filter_name(loc, rank)
    run.path(name).parent.mkdir(parents=True, exist_ok=True)
    save_filter(run.path(name), f, {"config_hash": run.hash, "master_seed": str(cfg.master_seed)})
    run.write_json(name.replace(".safetensors", ".json"),
                   {"losses": losses, "validation_loss": {"base": base_loss, "filtered": filt_loss}})
    print(f"filter {loc} rank {rank}: validation loss {base_loss:.4f} -> {filt_loss:.4f} ({filt_loss / base_loss - 1:+.1%})")


def grid_coordinates(run: Run, model_cfg: ModelConfig) -> list[ExperimentCoordinate]:
    g = run.cfg.grid
    n = model_cfg.n_layers
    layers = g.layers if g.layers is not None else sorted({0, n // 2, n - 1})
    hooks = [HookPoint(h) for h in g.hooks] if g.hooks is not None else list(HookPoint)
    d = model_cfg.d_model
    ranks = g.ranks if g.ranks is not None else sorted({max(1, d // 8), d // 2, d})
    coords = []
    for layer in layers:
        if layer >= n:
            raise ValueError(f"grid layer {layer} out of range for {n} layers")
        for hook in hooks:
            width = model_cfg.hook_width(hook)
            for rank in ranks:
                if 1 <= rank <= width:
                    coords.append(ExperimentCoordinate(run.model_id(), Location(layer, hook), rank, g.training_id))
    return coords


def cmd_run_grid(run: Run, args) -> None:
    cfg = run.cfg
    model, vocab = run.base()
    data, _ = run.corpus()
    coords = grid_coordinates(run, model.cfg)
    trojans = run.trojans()
    injected = run.injected()
    rows_path = run.path(ROWS)
    with rows_path.open("w") as fh:
        fh.write(json.dumps({"kind": "header", **run.prov, "coordinates": len(coords),
                             "trojans": [t.name for t in trojans], "injected": injected}, sort_keys=True) + "\n")

        def on_rows(rows):
            for r in rows:
                fh.write(json.dumps({"kind": "row", **r.to_record()}, sort_keys=True) + "\n")
            fh.flush()

        def on_filter(exp, f, losses):
            p = run.path(_filter_name(exp.location, exp.rank))
            p.parent.mkdir(parents=True, exist_ok=True)
            save_filter(p, f, {"config_hash": run.hash, "master_seed": str(cfg.master_seed)})

        result: GridResult = harness.run_grid(
            coords, trojans, model, vocab, _clean_samples(data["filter_train"], vocab), cfg.filter_optimizer,
            cfg.generation, cfg.master_seed, cfg.grid.samples_per_coordinate, cfg.clip, cfg.thresholds, injected,
            on_rows=on_rows, on_filter=on_filter,
        )
    run.write_json(FAILURES, {"failures": result.failures})
    print(f"grid: {len(coords)} coordinates, {len(result.rows)} rows, {len(result.failures)} failures -> {rows_path}")
    if result.failures:
        raise RuntimeError(f"{len(result.failures)} coordinates failed; see {run.path(FAILURES)}")


def load_rows(run: Run):
    with run.need(ROWS, "run-grid").open() as fh:
        return read_rows(fh)


def cmd_summarize(run: Run, args) -> None:
    summaries = harness.summarize(load_rows(run))
    run.path(SUMMARY).write_text(summary_csv(summaries, run.prov))
    print(f"summary: {len(summaries)} full coordinates -> {run.path(SUMMARY)}")


DECISION_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 21))


def compute_analyses(rows, injected, n_layers: int) -> dict:
    summaries = harness.summarize(rows)
    out: dict = {"injected_trojans": injected}
    try:
        out["agreement"] = harness.metric_agreement(summaries)
    except ValueError as exc:
        out["agreement"] = str(exc)
    out["improvements"] = harness.control_improvement_stats(summaries, trojans=injected)
    out["rank_sensitivity"] = harness.rank_sensitivity(summaries, trojans=injected)
    out["decision_boundary"] = harness.decision_boundary_fractions(summaries, DECISION_THRESHOLDS, trojans=injected)
    try:
        out["per_layer"] = harness.per_layer_mean(summaries, n_layers=n_layers, trojans=injected)
    except ValueError:
        out["per_layer"] = None
    labels: dict = {}
    for r in rows:
        bucket = labels.setdefault(r.full.ctl.control.value, {})
        bucket[str(r.label)] = bucket.get(str(r.label), 0) + 1
    out["labels"] = {k: dict(sorted(v.items())) for k, v in sorted(labels.items())}
    return out


def cmd_analyze(run: Run, args) -> None:
    rows = load_rows(run)
    injected = run.injected()
    if injected is None:
        logger.warning("no %s; analyses use every trojan", INJECTION)
    model_cfg_layers = run.cfg.model.n_layers
    analyses = compute_analyses(rows, injected, model_cfg_layers)
    for p in write_analysis(analyses, run.dir, run.prov):
        print(p)


def cmd_report(run: Run, args) -> None:
    summaries = parse_summary_csv(run.need(SUMMARY, "summarize").read_text())
    for p in write_tables(summaries, run.dir, run.prov):
        print(p)


def cmd_default_config(run: Run, args) -> None:
    sys.stdout.write(run.cfg.dump())


COMMANDS = {
    "build-corpus": cmd_build_corpus,
    "train-base": cmd_train_base,
    "verify-inject": cmd_verify_inject,
    "train-filter": cmd_train_filter,
    "run-grid": cmd_run_grid,
    "summarize": cmd_summarize,
    "analyze": cmd_analyze,
    "report": cmd_report,
    "default-config": cmd_default_config,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trojanfilter", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="YAML run configuration (defaults if omitted)")
    p.add_argument("--output-dir", help="override the configured output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name in ("train-base", "train-filter"):
            sp.add_argument("--log-every", type=int, default=0, help="log the loss every N steps")
        if name == "train-filter":
            sp.add_argument("--layer", type=int, default=None, help="block index (default: last)")
            sp.add_argument("--hook", default=HookPoint.RESID_POST.value, choices=[h.value for h in HookPoint])
            sp.add_argument("--rank", type=int, default=None, help="filter rank (default: d_model / 2)")
    return p


def dispatch(command: str, cfg: RunConfig, args=None, out_dir: Path | None = None) -> int:
    run = Run(cfg, out_dir)
    run.dir.mkdir(parents=True, exist_ok=True)
    args = args or build_parser().parse_args([command])
    torch.set_num_threads(1)
    try:
        COMMANDS[command](run, args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("pipeline failure", exc_info=True)
        print(f"error: {command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.output_dir) if args.output_dir else None
    return dispatch(args.command, cfg, args, out)


if __name__ == "__main__":
    sys.exit(main())
