"""Source pre-training and the alternating two-phase adaptation loop.

Every iteration draws one target mini-batch and runs, in order:

1. ``phase1_step``: one SGD step on the phase-1 objective w.r.t. the prompt
   tokens and the diagonal covariance, with the target model frozen;
2. ``make_pseudo_labels``: soft labels from the frozen encoder under the
   updated prompt;
3. ``phase2_step``: one SGD step on the phase-2 objective w.r.t. the target
   model, with prompt and covariance frozen.

The encoder is never updated and neither source data nor target labels are
read by the optimisation path.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import objectives as obj
from .data import LabeledSet, label_access
from .models import (DEFAULT_TEMPLATE, PromptContext, TargetModel, as_float_tensor, clone_model, init_prompt,
                     save_checkpoint, target_logits, vil_class_logits)

log = logging.getLogger(__name__)

SEED_ENV = "CAUSAL_SFDA_SEED"
LOSS_COLUMNS = ("iter", "L_EC", "L_PMI", "L_VMI", "L_IC", "L_UN", "L_SCE")
METRIC_COLUMNS = ("epoch", "target_acc", "pseudo_acc")


def seed_from_env(default: int) -> int:
    value = os.environ.get(SEED_ENV)
    return default if value in (None, "") else int(value)


@dataclass
class SourceConfig:
    epochs: int = 100
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    patience: int = 10
    seed: int = 0


@dataclass
class AdaptationConfig:
    alpha: float = obj.DEFAULT_ALPHA
    sigma_w: float = obj.DEFAULT_SIGMA_W
    tau: float = obj.DEFAULT_TAU
    lr_prompt: float = 1e-3
    lr_cov: float = 1e-3
    lr_model: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 15
    cosine_decay: bool = True
    pmi_sign: float = 1.0
    vmi_sign: float = -1.0
    entropy_reduction: str = "sum"
    template: str = DEFAULT_TEMPLATE
    n_ctx: int = 4
    token_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha, self.sigma_w, self.tau) < 0:
            raise ValueError("trade-off weights must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.entropy_reduction not in ("sum", "mean"):
            raise ValueError("entropy_reduction must be 'sum' or 'mean'")


class TrainingError(RuntimeError):
    pass


# -- source training ---------------------------------------------------------------

def accuracy_of(model: TargetModel, s: LabeledSet) -> float:
    with torch.no_grad(), label_access("evaluation"):
        logits = target_logits(model, s.features).numpy()
        y = s.labels
    known = y < logits.shape[1]
    if not known.any():
        return float("nan")
    return float(np.mean(logits[known].argmax(axis=1) == y[known]) * 100)


def train_source(model: TargetModel, source: LabeledSet, cfg: SourceConfig | None = None) -> TargetModel:
    """Supervised cross-entropy training of a copy of ``model``.

    Stops at ``cfg.epochs`` or when training accuracy has not improved for
    ``cfg.patience`` epochs (or reached 100%).
    """
    cfg = cfg or SourceConfig()
    model = clone_model(model)
    if cfg.epochs == 0:
        return model
    X = torch.as_tensor(np.array(source.features), dtype=torch.float64)
    with label_access("source-training"):
        y = torch.as_tensor(np.array(source.labels), dtype=torch.long)
    if y.max() >= model.n_classes:
        raise ValueError("source labels exceed the model's class count")
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 11])
    best, stale = -1.0, 0
    for epoch in range(cfg.epochs):
        for idx in np.array_split(rng.permutation(len(source)), max(1, math.ceil(len(source) / cfg.batch_size))):
            loss = torch.nn.functional.cross_entropy(model(X[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite source loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = float((model(X).argmax(dim=1) == y).double().mean())
        if acc > best + 1e-12:
            best, stale = acc, 0
        else:
            stale += 1
        if best >= 1.0 or stale >= cfg.patience:
            break
    return model


# -- adaptation steps ------------------------------------------------------------------

@dataclass
class AdaptState:
    model: TargetModel
    prompt: PromptContext
    cov: obj.DiagCovariance
    phase1_opt: torch.optim.Optimizer
    phase2_opt: torch.optim.Optimizer


def make_state(source_model: TargetModel, enc, cfg: AdaptationConfig) -> AdaptState:
    model = clone_model(source_model)
    prompt = init_prompt(cfg.template, cfg.n_ctx, enc.width, cfg.seed, cfg.token_scale)
    cov = obj.DiagCovariance(model.n_classes)
    p1 = torch.optim.SGD([{"params": [prompt.tokens], "lr": cfg.lr_prompt},
                          {"params": [cov.sigma], "lr": cfg.lr_cov}], momentum=cfg.momentum)
    p2 = torch.optim.SGD(model.parameters(), lr=cfg.lr_model, momentum=cfg.momentum)
    for opt in (p1, p2):
        for g in opt.param_groups:
            g["initial_lr"] = g["lr"]
    return AdaptState(model, prompt, cov, p1, p2)


def _finite_grads(params) -> bool:
    return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in params)


def phase1_step(batch, state: AdaptState, enc, cfg: AdaptationConfig) -> dict[str, float]:
    """One update of prompt tokens and covariance; the target model is frozen."""
    x = as_float_tensor(batch)
    with torch.no_grad():
        a = target_logits(state.model, x)
    o = vil_class_logits(enc, x, state.prompt)
    loss, parts = obj.ec(o, a, state.cov.sigma, cfg.alpha, cfg.pmi_sign, cfg.vmi_sign)
    params = [state.prompt.tokens, state.cov.sigma]
    state.phase1_opt.zero_grad()
    loss.backward()
    out = {"L_EC": float(loss.detach()), **{k: float(v.detach()) for k, v in parts.items()}, "skipped": 0.0}
    if not torch.isfinite(loss) or not _finite_grads(params):
        log.warning("phase-1: non-finite gradient, step skipped")
        state.phase1_opt.zero_grad()
        out["skipped"] = 1.0
        return out
    state.phase1_opt.step()
    state.cov.clamp_()
    return out


def make_pseudo_labels(batch, prompt: PromptContext, enc) -> torch.Tensor:
    with torch.no_grad():
        return torch.softmax(vil_class_logits(enc, batch, prompt), dim=1)


def phase2_step(batch, pseudo: torch.Tensor, state: AdaptState, cfg: AdaptationConfig) -> dict[str, float]:
    """One update of the target model; prompt and covariance are frozen."""
    x = as_float_tensor(batch)
    p = torch.softmax(target_logits(state.model, x), dim=1)
    loss, parts = obj.ic(p, pseudo.detach(), cfg.tau, cfg.sigma_w, cfg.entropy_reduction)
    params = list(state.model.parameters())
    state.phase2_opt.zero_grad()
    loss.backward()
    out = {"L_IC": float(loss.detach()), **{k: float(v.detach()) for k, v in parts.items()}, "skipped": 0.0}
    if not torch.isfinite(loss) or not _finite_grads(params):
        log.warning("phase-2: non-finite gradient, step skipped")
        state.phase2_opt.zero_grad()
        out["skipped"] = 1.0
        return out
    state.phase2_opt.step()
    return out


def _set_lr(opt: torch.optim.Optimizer, factor: float) -> None:
    for g in opt.param_groups:
        g["lr"] = g["initial_lr"] * factor


# -- the loop ----------------------------------------------------------------------------

@dataclass
class RunHistory:
    config: AdaptationConfig
    iterations: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    initial_target_acc: float = float("nan")
    initial_pseudo_acc: float = float("nan")
    skipped_steps: int = 0
    wall_clock: float = 0.0
    encoder_hash_before: str = ""
    encoder_hash_after: str = ""
    model: TargetModel | None = None
    prompt: PromptContext | None = None
    cov: obj.DiagCovariance | None = None
    class_names: list = field(default_factory=list)

    @property
    def final_target_acc(self) -> float:
        return self.epochs[-1]["target_acc"] if self.epochs else self.initial_target_acc

    def write(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "losses.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_COLUMNS)
            for row in self.iterations:
                w.writerow([row["iter"], *(repr(row[k]) for k in LOSS_COLUMNS[1:])])
        with open(run_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            w.writerow([-1, repr(self.initial_target_acc), repr(self.initial_pseudo_acc)])
            for row in self.epochs:
                w.writerow([row["epoch"], repr(row["target_acc"]), repr(row["pseudo_acc"])])
        (run_dir / "summary.txt").write_text(
            f"wall_clock_s = {self.wall_clock:.3f}\nskipped_steps = {self.skipped_steps}\n"
            f"encoder_hash_before = {self.encoder_hash_before}\nencoder_hash_after = {self.encoder_hash_after}\n")
        if self.model is not None:
            save_checkpoint(run_dir / "checkpoint.bin", self.model, self.class_names, self.config.seed,
                            self.prompt, self.cov.sigma if self.cov is not None else None)
        return run_dir


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _pseudo_accuracy(target: LabeledSet, prompt: PromptContext, enc, idx=None) -> tuple[int, int]:
    X = target.features if idx is None else target.features[idx]
    q = make_pseudo_labels(X, prompt, enc).numpy()
    with label_access("evaluation"):
        y = target.labels if idx is None else target.labels[idx]
    known = y < q.shape[1]
    return int(np.sum(q[known].argmax(axis=1) == y[known])), int(known.sum())


def adapt(source_model: TargetModel, target: LabeledSet, enc, cfg: AdaptationConfig | None = None,
          on_event: Callable[[str, int], None] | None = None) -> RunHistory:
    """Adapt a copy of ``source_model`` to ``target`` without its labels.

    ``target.labels`` is only read for the logged accuracies. ``on_event`` is
    called with ``(phase, iteration)`` after every step, for tracing.
    """
    cfg = cfg or AdaptationConfig()
    if source_model.n_classes != len(enc.class_names):
        raise ValueError("model and encoder disagree on the number of classes")
    if target.dim != source_model.in_dim:
        raise ValueError("target features do not match the model input dimension")
    t0 = time.perf_counter()
    history = RunHistory(cfg, class_names=list(enc.class_names))
    history.encoder_hash_before = enc.parameter_hash()
    state = make_state(source_model, enc, cfg)
    history.initial_target_acc = accuracy_of(state.model, target)
    hits, total = _pseudo_accuracy(target, state.prompt, enc)
    history.initial_pseudo_acc = 100.0 * hits / max(total, 1)

    rng = np.random.default_rng([cfg.seed, 23])
    n_batches = math.ceil(len(target) / cfg.batch_size)
    n_iter = max(1, cfg.epochs * n_batches)
    X_all = torch.as_tensor(np.array(target.features), dtype=torch.float64)
    it = 0
    with label_access("optimization"):
        for epoch in range(cfg.epochs):
            hits = total = 0
            for idx in _batches(len(target), cfg.batch_size, rng):
                if cfg.cosine_decay:
                    factor = 0.5 * (1 + math.cos(math.pi * it / n_iter))
                    _set_lr(state.phase1_opt, factor)
                    _set_lr(state.phase2_opt, factor)
                xb = X_all[idx]
                try:
                    r1 = phase1_step(xb, state, enc, cfg)
                    if on_event:
                        on_event("phase1", it)
                    pseudo = make_pseudo_labels(xb, state.prompt, enc)
                    if on_event:
                        on_event("pseudo", it)
                    r2 = phase2_step(xb, pseudo, state, cfg)
                    if on_event:
                        on_event("phase2", it)
                except (ValueError, RuntimeError) as exc:
                    raise TrainingError(f"adaptation failed at iteration {it}: {exc}") from exc
                history.skipped_steps += int(r1.pop("skipped") + r2.pop("skipped"))
                history.iterations.append({"iter": it, **r1, **r2})
                q = pseudo.numpy()
                with label_access("evaluation"):
                    y = target.labels[idx]
                known = y < q.shape[1]
                hits += int(np.sum(q[known].argmax(axis=1) == y[known]))
                total += int(known.sum())
                it += 1
            history.epochs.append({
                "epoch": epoch,
                "target_acc": accuracy_of(state.model, target),
                "pseudo_acc": 100.0 * hits / max(total, 1),
            })
    history.encoder_hash_after = enc.parameter_hash()
    history.model, history.prompt, history.cov = state.model, state.prompt, state.cov
    history.wall_clock = time.perf_counter() - t0
    return history
