"""Experiment grid: coordinates, per-coordinate evaluation, aggregation and analyses.

Every analysis here is a pure function of the sample rows, so rerunning it on
a stored row file reproduces its output exactly.
"""
from __future__ import annotations

import json
import logging
import math
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .filters import CONTROLS, Control, FilterParams, FilterSpec, control_intervention, train_filter
from .hooks import HookPoint, Location
from .metrics import METRIC_NAMES, ClipPolicy, MetricTriple, score_completion
from .model import GenerationConfig, OptimizerConfig, TinyTransformer
from .seeding import derive_seed
from .trojans import Trojan, _as_completer, trigger_prompt
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

ROW_FORMAT_VERSION = "1"


@dataclass(frozen=True, order=True)
class ExperimentCoordinate:
    model_id: str
    location: Location
    rank: int
    training_id: str = "sgd-ce"

    @property
    def key(self) -> str:
        return f"{self.model_id}|{self.location}|r{self.rank}|{self.training_id}"


@dataclass(frozen=True, order=True)
class ControlCoordinate:
    trojan: str
    control: Control


@dataclass(frozen=True, order=True)
class FullCoordinate:
    exp: ExperimentCoordinate
    ctl: ControlCoordinate


@dataclass(frozen=True)
class CompletionLabel:
    kind: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind}:{self.detail}" if self.detail else self.kind

    @classmethod
    def parse(cls, text: str) -> "CompletionLabel":
        kind, _, detail = text.partition(":")
        return cls(kind, detail)


@dataclass(frozen=True)
class SampleRow:
    full: FullCoordinate
    sample_index: int
    completion: str
    metrics: MetricTriple
    label: CompletionLabel
    seed: int

    def to_record(self) -> dict:
        exp, ctl = self.full.exp, self.full.ctl
        return {
            "model_id": exp.model_id,
            "layer": exp.location.layer,
            "hook": exp.location.hook.value,
            "rank": exp.rank,
            "training_id": exp.training_id,
            "trojan": ctl.trojan,
            "control": ctl.control.value,
            "sample_index": self.sample_index,
            "seed": self.seed,
            "completion": self.completion,
            "exact": self.metrics.exact,
            "prefix": self.metrics.prefix,
            "edit": self.metrics.edit,
            "label": str(self.label),
        }

    @classmethod
    def from_record(cls, r: Mapping) -> "SampleRow":
        exp = ExperimentCoordinate(r["model_id"], Location(r["layer"], HookPoint(r["hook"])), r["rank"], r["training_id"])
        return cls(
            FullCoordinate(exp, ControlCoordinate(r["trojan"], Control(r["control"]))),
            r["sample_index"],
            r["completion"],
            MetricTriple(r["exact"], r["prefix"], r["edit"]),
            CompletionLabel.parse(r["label"]),
            r["seed"],
        )


# -- completion taxonomy ----------------------------------------------------

@dataclass(frozen=True)
class Thresholds:
    removed: float = 0.30
    failed: float = 0.90
    confusion: float = 0.80
    chaos_length: float = 0.95
    repetitive: float = 0.5
    unicode: float = 0.3
    punctuation: float = 0.5

    def __post_init__(self):
        for name, value in vars(self).items():
            if not 0 <= value <= 1:
                raise ValueError(f"threshold {name} must be in [0, 1], got {value}")
        if self.removed > self.failed:
            raise ValueError("removed threshold must not exceed failed threshold")


def _chaos_kind(completion: str, max_new_tokens: int, th: Thresholds) -> Optional[str]:
    words = completion.split()
    if not words or len(words) < th.chaos_length * max_new_tokens:
        return None
    if Counter(words).most_common(1)[0][1] / len(words) >= th.repetitive:
        return "repetitive"
    chars = completion.replace(" ", "")
    if sum(not c.isascii() for c in chars) / len(chars) >= th.unicode:
        return "unicode"
    if sum(c in string.punctuation for c in chars) / len(chars) >= th.punctuation:
        return "punctuation"
    return None


def classify_completion(
    completion: str,
    trojans: Sequence[Trojan],
    own: Trojan,
    max_new_tokens: int,
    injected: Optional[Iterable[str]] = None,
    thresholds: Thresholds = Thresholds(),
    clip: ClipPolicy = ClipPolicy(),
) -> CompletionLabel:
    """Label a trigger completion.

    Precedence: confusion > chaos > failed (or reveal) > partial > removed.
    ``max_new_tokens`` is the generation budget after the prompt. When
    ``injected`` is given and ``own`` is not in it, a near-verbatim followup is
    a reveal rather than a failed removal.
    """
    own_edit = score_completion(completion, own.followup, clip).edit
    others = [(score_completion(completion, t.followup, clip).edit, t.name) for t in trojans if t.name != own.name]
    if others:
        best_edit, best_name = max(others, key=lambda x: (x[0], x[1]))
        if best_edit >= thresholds.confusion and best_edit > own_edit:
            return CompletionLabel("confusion", best_name)
    chaos = _chaos_kind(completion, max_new_tokens, thresholds)
    if chaos:
        return CompletionLabel("chaos", chaos)
    if own_edit >= thresholds.failed:
        if injected is not None and own.name not in set(injected):
            return CompletionLabel("reveal")
        return CompletionLabel("failed")
    if own_edit <= thresholds.removed:
        return CompletionLabel("removed")
    return CompletionLabel("partial")


# -- running ----------------------------------------------------------------

def generation_seed(master_seed: int, exp: ExperimentCoordinate, trojan: str, sample_index: int) -> int:
    """Shared by all four controls, so they differ only by their intervention."""
    return derive_seed(master_seed, "generate", exp.key, trojan, sample_index)


def noise_seed(master_seed: int, exp: ExperimentCoordinate, trojan: str, sample_index: int) -> int:
    return derive_seed(master_seed, "noise", exp.key, trojan, sample_index, str(exp.location))


def filter_seed(master_seed: int, exp: ExperimentCoordinate) -> int:
    return derive_seed(master_seed, "filter", exp.key)


def run_full_coordinate(
    model,
    vocab: Vocabulary,
    filter: Optional[FilterParams],
    full: FullCoordinate,
    trojans: Sequence[Trojan],
    gen: GenerationConfig,
    master_seed: int,
    n: int = 10,
    clip: ClipPolicy = ClipPolicy(),
    thresholds: Thresholds = Thresholds(),
    injected: Optional[Iterable[str]] = None,
    max_seq_len: Optional[int] = None,
) -> list[SampleRow]:
    """Sample ``n`` trigger completions under one control and score them."""
    exp, ctl = full.exp, full.ctl
    registry = {t.name: t for t in trojans}
    if ctl.trojan not in registry:
        raise KeyError(f"unknown trojan {ctl.trojan!r}")
    if ctl.control is Control.WITH_LORA:
        if filter is None:
            raise ValueError(f"{exp.key}: with_lora needs a trained filter")
        if filter.location != exp.location or filter.rank != exp.rank:
            raise ValueError(
                f"filter at {filter.location} rank {filter.rank} does not match coordinate {exp.location} rank {exp.rank}"
            )
    own = registry[ctl.trojan]
    complete = _as_completer(model, vocab)
    if max_seq_len is None:
        max_seq_len = model.cfg.max_seq_len if isinstance(model, TinyTransformer) else gen.max_length
    prompt = trigger_prompt(own, vocab)
    max_new = min(gen.max_length, max_seq_len) - len(prompt)
    rows = []
    for i in range(n):
        seed = generation_seed(master_seed, exp, own.name, i)
        iv = control_intervention(ctl.control, filter, exp.location, noise_seed(master_seed, exp, own.name, i))
        text = complete(prompt, replace(gen, seed=seed), [iv])
        rows.append(
            SampleRow(
                full,
                i,
                text,
                score_completion(text, own.followup, clip),
                classify_completion(text, trojans, own, max_new, injected, thresholds, clip),
                seed,
            )
        )
    return rows


@dataclass
class GridResult:
    rows: list[SampleRow] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    filters: dict[str, FilterParams] = field(default_factory=dict)
    loss_curves: dict[str, list[float]] = field(default_factory=dict)


def run_grid(
    coords: Sequence[ExperimentCoordinate],
    trojans: Sequence[Trojan],
    frozen: TinyTransformer,
    vocab: Vocabulary,
    clean: Sequence[Sequence[int]],
    opt: OptimizerConfig,
    gen: GenerationConfig,
    master_seed: int,
    n: int = 10,
    clip: ClipPolicy = ClipPolicy(),
    thresholds: Thresholds = Thresholds(),
    injected: Optional[Iterable[str]] = None,
    on_rows: Optional[Callable[[list[SampleRow]], None]] = None,
    on_filter: Optional[Callable[[ExperimentCoordinate, FilterParams, list[float]], None]] = None,
) -> GridResult:
    """Train one filter per experiment coordinate, then evaluate every trojan under every control.

    A failing coordinate is logged in ``failures`` and skipped; the rest of the
    grid still runs. ``on_rows`` receives each full coordinate's rows as soon
    as they exist.
    """
    if not coords:
        raise ValueError("no experiment coordinates")
    if not trojans:
        raise ValueError("no trojans")
    if len(set(coords)) != len(coords):
        raise ValueError("duplicate experiment coordinates")
    injected = None if injected is None else sorted(injected)
    result = GridResult()
    for exp in coords:
        try:
            spec = FilterSpec(exp.location, exp.rank)
            f, losses = train_filter(frozen, spec, clean, opt, filter_seed(master_seed, exp), vocab.pad_id)
            result.filters[exp.key] = f
            result.loss_curves[exp.key] = losses
            if on_filter:
                on_filter(exp, f, losses)
            for trojan in trojans:
                for control in CONTROLS:
                    full = FullCoordinate(exp, ControlCoordinate(trojan.name, control))
                    rows = run_full_coordinate(
                        frozen, vocab, f, full, trojans, gen, master_seed, n, clip, thresholds, injected
                    )
                    result.rows.extend(rows)
                    if on_rows:
                        on_rows(rows)
        except Exception as exc:  # a broken coordinate must not sink the grid
            logger.exception("coordinate %s failed", exp.key)
            result.failures[exp.key] = f"{type(exc).__name__}: {exc}"
    return result


def default_grid(
    n_layers: int, d_model: int, d_mlp: int, model_id: str = "toy", training_id: str = "sgd-ce",
    rank_fractions: Sequence[float] = (1 / 8, 1 / 2, 1.0),
) -> list[ExperimentCoordinate]:
    """Layers {0, middle, last} x all hook points x ranks as fractions of the hook width."""
    layers = sorted({0, n_layers // 2, n_layers - 1})
    coords = []
    for layer in layers:
        for hook in HookPoint:
            width = hook.width(d_model, d_mlp)
            for frac in rank_fractions:
                rank = max(1, round(frac * d_model))
                if rank <= width:
                    coords.append(ExperimentCoordinate(model_id, Location(layer, hook), rank, training_id))
    return sorted(set(coords), key=lambda c: (c.location.sort_key(), c.rank))


# -- aggregation ------------------------------------------------------------

@dataclass(frozen=True)
class Stats:
    min: float
    mean: float
    max: float
    stdev: float


def describe(values: Sequence[float]) -> Stats:
    """Min, mean, max and population stdev; independent of value order."""
    vals = sorted(float(v) for v in values)
    if not vals:
        raise ValueError("no values")
    n = len(vals)
    mean = math.fsum(vals) / n
    var = math.fsum((v - mean) ** 2 for v in vals) / n
    mean = min(max(mean, vals[0]), vals[-1])
    return Stats(vals[0], mean, vals[-1], math.sqrt(var))


MetricSummary = dict  # metric name -> Stats


def summarize(rows: Iterable[SampleRow]) -> dict[FullCoordinate, MetricSummary]:
    groups: dict[FullCoordinate, list[SampleRow]] = defaultdict(list)
    for r in rows:
        groups[r.full].append(r)
    return {
        full: {m: describe([getattr(r.metrics, m) for r in group]) for m in METRIC_NAMES}
        for full, group in sorted(groups.items())
    }


def _means(summaries, metric: str, control: Optional[Control] = None, trojans: Optional[Iterable[str]] = None):
    keep = None if trojans is None else set(trojans)
    return {
        full: s[metric].mean
        for full, s in summaries.items()
        if (control is None or full.ctl.control is control) and (keep is None or full.ctl.trojan in keep)
    }


@dataclass(frozen=True)
class Agreement:
    metric_x: str
    metric_y: str
    n: int
    correlation: Optional[float]
    mae: float
    slope: float
    intercept: float


def _pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        return None
    return float(dx @ dy) / denom


METRIC_PAIRS = (("prefix", "edit"), ("exact", "prefix"), ("exact", "edit"))


def metric_agreement(summaries, pairs=METRIC_PAIRS) -> list[Agreement]:
    """Correlation and best-fit-line MAE between per-coordinate metric means.

    The correlation is ``None`` when either mean vector has zero variance.
    """
    fulls = sorted(summaries)
    if len(fulls) < 3:
        raise ValueError(f"need at least 3 coordinates, got {len(fulls)}")
    out = []
    for mx, my in pairs:
        x = np.array([summaries[f][mx].mean for f in fulls])
        y = np.array([summaries[f][my].mean for f in fulls])
        dx = x - x.mean()
        slope = float(dx @ (y - y.mean())) / float(dx @ dx) if float(dx @ dx) > 0 else 0.0
        intercept = float(y.mean() - slope * x.mean())
        mae = float(np.mean(np.abs(y - (slope * x + intercept))))
        out.append(Agreement(mx, my, len(fulls), _pearson(x, y), mae, slope, intercept))
    return out


def decision_boundary_fractions(
    summaries, thresholds: Sequence[float], metric: str = "edit", trojans: Optional[Iterable[str]] = None
) -> dict[float, Optional[dict[HookPoint, float]]]:
    """Share of each hook point among with-lora coordinates whose mean is <= each threshold.

    An empty bucket maps to ``None``.
    """
    means = _means(summaries, metric, Control.WITH_LORA, trojans)
    out: dict[float, Optional[dict[HookPoint, float]]] = {}
    for t in thresholds:
        if not 0 <= t <= 1:
            raise ValueError(f"threshold {t} outside [0, 1]")
        passing = Counter(f.exp.location.hook for f, m in means.items() if m <= t)
        total = sum(passing.values())
        out[t] = {h: passing[h] / total for h in HookPoint if passing[h]} if total else None
    return out


def per_layer_mean(summaries, metric: str = "edit", n_layers: int = 1,
                   trojans: Optional[Iterable[str]] = None) -> dict[float, float]:
    """Mean with-lora metric mean grouped by layer depth fraction ``layer / n_layers``."""
    means = _means(summaries, metric, Control.WITH_LORA, trojans)
    if not means:
        raise ValueError("no with-lora summaries")
    groups: dict[float, list[float]] = defaultdict(list)
    for f, m in means.items():
        groups[f.exp.location.layer / n_layers].append(m)
    return {k: math.fsum(v) / len(v) for k, v in sorted(groups.items())}


# Improvement of the first control over the second: mean(second) - mean(first).
IMPROVEMENT_PAIRS = (
    (Control.WITH_LORA, Control.RANDN_ABLATE),
    (Control.RANDN_ABLATE, Control.ZERO_ABLATE),
    (Control.ZERO_ABLATE, Control.WITHOUT_LORA),
)


@dataclass(frozen=True)
class Improvement:
    better: Control
    baseline: Control
    n: int
    stats: Optional[Stats]
    skipped: tuple = ()


def control_improvement_stats(summaries, metric: str = "edit",
                              trojans: Optional[Iterable[str]] = None) -> list[Improvement]:
    """Per (experiment coordinate, trojan) differences between adjacent controls.

    Positive values mean the first control of each pair scored lower, i.e.
    removed more. Groups missing any control are skipped and listed.
    """
    keep = None if trojans is None else set(trojans)
    groups: dict[tuple, dict[Control, float]] = defaultdict(dict)
    for full, s in summaries.items():
        if keep is None or full.ctl.trojan in keep:
            groups[(full.exp, full.ctl.trojan)][full.ctl.control] = s[metric].mean
    complete = {k: v for k, v in groups.items() if len(v) == len(CONTROLS)}
    skipped = tuple(sorted(f"{e.key}|{t}" for (e, t) in groups if (e, t) not in complete))
    out = []
    for better, baseline in IMPROVEMENT_PAIRS:
        diffs = [v[baseline] - v[better] for _, v in sorted(complete.items())]
        out.append(Improvement(better, baseline, len(diffs), describe(diffs) if diffs else None, skipped))
    return out


@dataclass(frozen=True)
class RankSensitivity:
    mean_abs_correlation: Optional[float]
    per_location: dict
    flagged: tuple = ()


def rank_sensitivity(summaries, metric: str = "edit", trojans: Optional[Iterable[str]] = None) -> RankSensitivity:
    """Mean |Pearson r| between filter rank and with-lora mean, over locations with >= 2 ranks.

    Each (location, trojan) pair is one series. A series whose means do not
    vary contributes 0 and is flagged.
    """
    means = _means(summaries, metric, Control.WITH_LORA, trojans)
    series: dict[tuple, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for f, m in means.items():
        series[(f.exp.location, f.ctl.trojan)][f.exp.rank].append(m)
    per: dict[str, float] = {}
    flagged = []
    for (loc, trojan), by_rank in sorted(series.items()):
        if len(by_rank) < 2:
            continue
        ranks = np.array(sorted(by_rank), dtype=float)
        vals = np.array([math.fsum(by_rank[r]) / len(by_rank[r]) for r in sorted(by_rank)])
        r = _pearson(ranks, vals)
        key = f"{loc}|{trojan}"
        if r is None:
            flagged.append(key)
            r = 0.0
        per[key] = abs(r)
    mean = math.fsum(per.values()) / len(per) if per else None
    return RankSensitivity(mean, per, tuple(flagged))


def read_rows(lines: Iterable[str]) -> list[SampleRow]:
    rows = []
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("kind", "row") == "row":
            rows.append(SampleRow.from_record(rec))
    return rows
