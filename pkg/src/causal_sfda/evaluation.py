"""Metrics and evaluation protocols.

Scores are percentages throughout and are only rounded when printed.

Results files
-------------
A results file is tab-separated text::

    #causal-sfda-results<TAB>version=1
    @key<TAB>value            metadata, any number of lines, before records
    method<TAB>setting<TAB>score

Blank lines and lines starting with ``#`` after the header are ignored.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .data import LabeledSet, Scenario, label_access, split_set
from .models import TargetModel, target_logits

# Column order used by every unification report.
SETTING_ORDER = ("closed", "generalized", "open", "partial", "sf-oodg")
SETTING_TITLES = {
    "closed": "Closed-set",
    "generalized": "Generalized",
    "open": "Open-set",
    "partial": "Partial-set",
    "sf-oodg": "SF-OODG",
}
OPEN_THRESHOLD = 0.5
RESULTS_MAGIC = "#causal-sfda-results"
RESULTS_VERSION = 1


class MetricError(ValueError):
    pass


# -- basic metrics --------------------------------------------------------------------

def predictions(scores) -> np.ndarray:
    """Argmax over rows (ties go to the lowest index); 1-D input is returned as labels."""
    a = np.asarray(scores)
    if a.ndim == 1:
        return a.astype(np.int64)
    if a.ndim != 2:
        raise MetricError("predictions must be labels or an n x C score matrix")
    return np.argmax(a, axis=1)  # numpy returns the first maximum


def accuracy(preds, truth) -> float:
    p = predictions(preds)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape[0] != t.shape[0]:
        raise MetricError(f"length mismatch: {p.shape[0]} predictions, {t.shape[0]} labels")
    if t.size == 0:
        return float("nan")
    return float(np.mean(p == t) * 100.0)


def harmonic_mean(a_s: float, a_t: float) -> float:
    if a_s < 0 or a_t < 0:
        raise MetricError("accuracies must be non-negative")
    if a_s == 0 and a_t == 0:
        return 0.0
    return 2.0 * a_s * a_t / (a_s + a_t)


# -- unification over settings ---------------------------------------------------------

@dataclass
class SettingScoreTable:
    """Methods x settings grid of percentages; a missing cell is an absent key."""

    methods: list[str]
    settings: list[str]
    scores: dict[tuple[str, str], float] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, float]]) -> "SettingScoreTable":
        methods, settings, scores = [], [], {}
        for m, s, v in records:
            if not 0.0 <= v <= 100.0:
                raise MetricError(f"score {v} for {m}/{s} is outside [0, 100]")
            if (m, s) in scores and scores[(m, s)] != v:
                raise MetricError(f"conflicting scores for {m}/{s}: {scores[(m, s)]} and {v}")
            scores[(m, s)] = float(v)
            if m not in methods:
                methods.append(m)
            if s not in settings:
                settings.append(s)
        known = [s for s in SETTING_ORDER if s in settings]
        return cls(methods, known + [s for s in settings if s not in SETTING_ORDER], scores)

    def get(self, method: str, setting: str) -> float:
        try:
            return self.scores[(method, setting)]
        except KeyError:
            raise MetricError(f"missing score for method {method!r} in setting {setting!r}") from None

    def missing(self) -> list[tuple[str, str]]:
        return [(m, s) for m in self.methods for s in self.settings if (m, s) not in self.scores]

    def best(self, setting: str) -> float:
        return max(self.get(m, setting) for m in self.methods)

    def records(self) -> list[tuple[str, str, float]]:
        return [(m, s, self.scores[(m, s)]) for m in self.methods for s in self.settings if (m, s) in self.scores]


@dataclass
class UnificationScores:
    method: str
    h_all: float
    h_wrg: float
    h_loso: dict[str, float]


def unification_metrics(t: SettingScoreTable) -> dict[str, UnificationScores]:
    """Overall mean, worst relative gap to the per-setting best (x100) and leave-one-setting-out means."""
    gaps = t.missing()
    if gaps:
        raise MetricError(f"incomplete table, missing {gaps}")
    if len(t.settings) < 2:
        raise MetricError("need at least two settings")
    best = {s: t.best(s) for s in t.settings}
    out = {}
    for m in t.methods:
        x = {s: t.get(m, s) for s in t.settings}
        h_all = float(np.mean(list(x.values())))
        rel = [(best[s] - x[s]) / best[s] if best[s] > 0 else 0.0 for s in t.settings]
        loso = {s: float(np.mean([x[r] for r in t.settings if r != s])) for s in t.settings}
        out[m] = UnificationScores(m, h_all, 100.0 * max(rel), loso)
    return out


def unification_csv(metrics: Mapping[str, UnificationScores], settings: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "H_wrg", *(f"H_loso_wo_{s}" for s in settings), "H_all"])
    for m in metrics.values():
        w.writerow([m.method, repr(m.h_wrg), *(repr(m.h_loso[s]) for s in settings), repr(m.h_all)])
    return buf.getvalue()


def format_unification(metrics: Mapping[str, UnificationScores], settings: Sequence[str]) -> str:
    heads = ["Method", "H_wrg"] + [f"w/o {SETTING_TITLES.get(s, s)}" for s in settings] + ["H_all"]
    rows = [[m.method, f"{m.h_wrg:.2f}", *(f"{m.h_loso[s]:.1f}" for s in settings), f"{m.h_all:.1f}"]
            for m in metrics.values()]
    widths = [max(len(r[i]) for r in [heads, *rows]) for i in range(len(heads))]
    line = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([line(heads), "-" * len(line(heads)), *map(line, rows)])


# -- results files ---------------------------------------------------------------------

class ResultsError(ValueError):
    pass


@dataclass
class ResultsFile:
    metadata: dict[str, str]
    records: list[tuple[str, str, float]]
    path: Path | None = None


def write_results(path, records: Iterable[tuple[str, str, float]], metadata: Mapping[str, str] | None = None) -> None:
    lines = [f"{RESULTS_MAGIC}\tversion={RESULTS_VERSION}"]
    for k, v in (metadata or {}).items():
        if "\t" in k or "\n" in k or "\t" in str(v) or "\n" in str(v):
            raise ResultsError(f"metadata entry {k!r} contains a tab or newline")
        lines.append(f"@{k}\t{v}")
    for m, s, v in records:
        if any(ch in m + s for ch in "\t\n") or m.startswith(("#", "@")):
            raise ResultsError(f"method/setting name {m!r}/{s!r} cannot be written")
        lines.append(f"{m}\t{s}\t{float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_results(path) -> ResultsFile:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ResultsError(f"{path}: cannot read ({exc})") from None
    if not lines or not lines[0].startswith(RESULTS_MAGIC):
        raise ResultsError(f"{path}:1: missing results header")
    head = dict(f.split("=", 1) for f in lines[0].split("\t")[1:] if "=" in f)
    if head.get("version") != str(RESULTS_VERSION):
        raise ResultsError(f"{path}:1: unsupported results version {head.get('version')!r}")
    meta, records = {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if line.startswith("@"):
            if records:
                raise ResultsError(f"{path}:{lineno}: metadata after the first record")
            if len(parts) != 2:
                raise ResultsError(f"{path}:{lineno}: metadata needs a key and a value")
            meta[parts[0][1:]] = parts[1]
            continue
        if len(parts) != 3:
            raise ResultsError(f"{path}:{lineno}: expected method, setting and score, got {len(parts)} fields")
        try:
            score = float(parts[2])
        except ValueError:
            raise ResultsError(f"{path}:{lineno}: score {parts[2]!r} is not a number") from None
        if not math.isfinite(score) or not 0.0 <= score <= 100.0:
            raise ResultsError(f"{path}:{lineno}: score {score} is outside [0, 100]")
        records.append((parts[0], parts[1], score))
    if not records:
        raise ResultsError(f"{path}: no records")
    return ResultsFile(meta, records, path)


def merge_results(files: Sequence[ResultsFile]) -> SettingScoreTable:
    """Union of all records; identical duplicates are fine, conflicting ones are not."""
    seen: dict[tuple[str, str], tuple[float, Path | None]] = {}
    ordered = []
    for f in files:
        for m, s, v in f.records:
            if (m, s) in seen:
                if seen[(m, s)][0] != v:
                    raise ResultsError(f"{f.path}: score for {m}/{s} conflicts with {seen[(m, s)][1]}")
                continue
            seen[(m, s)] = (v, f.path)
            ordered.append((m, s, v))
    return SettingScoreTable.from_records(ordered)


def reference_results_path() -> Path:
    """Bundled results file: three methods scored in all five settings."""
    return Path(__file__).parent / "fixtures" / "reference_scores.tsv"


# -- scenario evaluation ------------------------------------------------------------

@dataclass
class ScenarioScores:
    setting: str
    score: float
    metrics: dict[str, float]
    notes: list[str] = field(default_factory=list)


def _probs(model: TargetModel, s: LabeledSet) -> np.ndarray:
    with torch.no_grad():
        return torch.softmax(target_logits(model, s.features), dim=1).numpy()


def _labels(s: LabeledSet) -> np.ndarray:
    with label_access("evaluation"):
        return np.array(s.labels)


def _known_accuracy(model: TargetModel, s: LabeledSet, known: Sequence[int]) -> float:
    p = _probs(model, s)
    y = _labels(s)
    keep = np.isin(y, known)
    return accuracy(np.asarray(known)[predictions(p[keep])], y[keep])


def open_set_scores(probs: np.ndarray, labels: np.ndarray, known: Sequence[int],
                    threshold: float = OPEN_THRESHOLD) -> dict[str, float]:
    """Known-class accuracy with max-probability rejection, plus unknown rejection rate.

    A known-class sample is correct when it is accepted and its argmax is
    right; an unknown sample is handled correctly when it is rejected.
    """
    known = np.asarray(known)
    if probs.shape[1] != known.size:
        raise MetricError("model outputs do not match the known classes")
    pred = known[predictions(probs)]
    accept = probs.max(axis=1) >= threshold
    is_known = np.isin(labels, known)
    out = {"threshold": float(threshold)}
    out["known_acc"] = float(np.mean(accept[is_known] & (pred[is_known] == labels[is_known])) * 100) \
        if is_known.any() else float("nan")
    out["closed_known_acc"] = accuracy(pred[is_known], labels[is_known])
    out["unknown_reject"] = float(np.mean(~accept[~is_known]) * 100) if (~is_known).any() else float("nan")
    both = [out["known_acc"], out["unknown_reject"]]
    out["h_score"] = harmonic_mean(*both) if all(math.isfinite(v) for v in both) else float("nan")
    return out


def evaluate_scenario(model: TargetModel, scenario: Scenario, setting: str | None = None,
                      threshold: float = OPEN_THRESHOLD) -> ScenarioScores:
    setting = setting or scenario.spec.setting
    known = list(scenario.known_classes) or list(range(model.n_classes))
    if model.n_classes != len(known):
        raise MetricError(f"model has {model.n_classes} outputs but the scenario has {len(known)} known classes")
    if setting in ("closed", "partial"):
        acc = _known_accuracy(model, scenario.target, known)
        return ScenarioScores(setting, acc, {"accuracy": acc})
    if setting == "generalized":
        if scenario.source_test is None:
            raise MetricError("generalized evaluation needs a held-out source split")
        a_s = _known_accuracy(model, scenario.source_test, known)
        a_t = _known_accuracy(model, scenario.target, known)
        h = harmonic_mean(a_s, a_t)
        return ScenarioScores(setting, h, {"A_s": a_s, "A_t": a_t, "H": h})
    if setting == "open":
        m = open_set_scores(_probs(model, scenario.target), _labels(scenario.target), known, threshold)
        note = f"open-set score: known-class accuracy, unknowns rejected when max probability < {threshold:g}"
        return ScenarioScores(setting, m["known_acc"], m, [note])
    if setting == "sf-oodg":
        per = {f"acc[{t.domain or k}]": _known_accuracy(model, t, known) for k, t in enumerate(scenario.targets)}
        mean = float(np.mean(list(per.values())))
        return ScenarioScores(setting, mean, {**per, "mean": mean})
    raise MetricError(f"unknown setting {setting!r}")


# -- continual adaptation --------------------------------------------------------------

@dataclass
class ContinualReport:
    """``grid[k, j]``: accuracy on domain ``j``'s test split after step ``k``."""

    domains: list[str]
    grid: np.ndarray

    @property
    def drops(self) -> np.ndarray:
        """Mean of (accuracy when first seen - accuracy at each later step); NaN for the last domain."""
        n = len(self.domains)
        out = np.full(n, np.nan)
        for j in range(n - 1):
            out[j] = float(np.mean(self.grid[j, j] - self.grid[j + 1:, j]))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", *self.domains])
        for k, row in enumerate(self.grid):
            w.writerow([self.domains[k], *(repr(float(v)) for v in row)])
        w.writerow(["drop", *(repr(float(v)) for v in self.drops)])
        return buf.getvalue()

    def format(self) -> str:
        width = max(8, *(len(d) for d in self.domains))
        head = "after".ljust(width) + "".join(d.rjust(width + 2) for d in self.domains)
        rows = [self.domains[k].ljust(width) + "".join(f"{v:.1f}".rjust(width + 2) for v in row)
                for k, row in enumerate(self.grid)]
        drop = "drop".ljust(width) + "".join(("-" if np.isnan(v) else f"{v:.1f}").rjust(width + 2)
                                             for v in self.drops)
        return "\n".join([head, *rows, drop])


def continual_protocol(domains: Sequence[LabeledSet], enc, source_cfg=None, adapt_cfg=None,
                       seed: int = 0, test_ratio: float = 0.1, hidden: int = 64, depth: int = 1) -> ContinualReport:
    """Train on the first domain, then adapt along the rest, testing every model on every domain."""
    from .trainer import AdaptationConfig, SourceConfig, adapt, train_source

    if len(domains) < 2:
        raise ValueError("continual adaptation needs at least two domains")
    splits = [split_set(d, 1.0 - test_ratio, seed) for d in domains]
    tests = [te for _, te in splits]
    names = [d.domain or f"domain{k}" for k, d in enumerate(domains)]
    first = domains[0]
    model = train_source(TargetModel(first.dim, len(enc.class_names), hidden, depth, seed), splits[0][0],
                         source_cfg or SourceConfig(seed=seed))
    grid = np.zeros((len(domains), len(domains)))
    for k in range(len(domains)):
        if k > 0:
            model = adapt(model, splits[k][0], enc, adapt_cfg or AdaptationConfig(seed=seed)).model
        for j, te in enumerate(tests):
            grid[k, j] = accuracy(_probs(model, te), _labels(te))
    return ContinualReport(names, grid)


# -- pseudo-label dynamics -------------------------------------------------------------

@dataclass
class DynamicsSeries:
    epochs: list[int]
    pseudo_acc: list[float]
    target_acc: list[float]
    initial_pseudo_acc: float
    initial_target_acc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "pseudo_acc", "target_acc"])
        w.writerow([-1, repr(self.initial_pseudo_acc), repr(self.initial_target_acc)])
        for e, p, t in zip(self.epochs, self.pseudo_acc, self.target_acc):
            w.writerow([e, repr(p), repr(t)])
        return buf.getvalue()


def pseudo_label_dynamics(history) -> DynamicsSeries:
    """Per-epoch pseudo-label and adapted-model accuracy of a finished run.

    Epoch ``e``'s pseudo-label accuracy is accumulated over the pseudo-labels
    actually handed to the model during that epoch.
    """
    return DynamicsSeries([int(e["epoch"]) for e in history.epochs],
                          [float(e["pseudo_acc"]) for e in history.epochs],
                          [float(e["target_acc"]) for e in history.epochs],
                          float(history.initial_pseudo_acc), float(history.initial_target_acc))
