import math

import numpy as np
import pytest
import torch

from causal_sfda import trainer as tr
from causal_sfda.data import SyntheticDomainSpec, generate_domain_pair, label_access
from causal_sfda.models import TargetModel, ToyVilEncoder, param_hash

SPEC = SyntheticDomainSpec(n_classes=3, dim=12, samples_per_class=40, rotation=math.pi / 2)


@pytest.fixture(scope="module")
def small():
    src, tgt = generate_domain_pair(SPEC, 1)
    enc = ToyVilEncoder.for_synthetic(SPEC, 1)
    model = tr.train_source(TargetModel(SPEC.dim, SPEC.n_classes, seed=1), src, tr.SourceConfig(seed=1))
    return src, tgt, enc, model


def quick(**kw):
    return tr.AdaptationConfig(epochs=3, batch_size=32, seed=1, **kw)


def test_source_training_fits_source(small):
    src, _, _, model = small
    assert tr.accuracy_of(model, src) > 95.0
    assert src.label_reads["source-training"] == 1


def test_zero_epochs_returns_untrained_copy():
    src, _ = generate_domain_pair(SPEC, 0)
    base = TargetModel(SPEC.dim, SPEC.n_classes)
    out = tr.train_source(base, src, tr.SourceConfig(epochs=0))
    assert out is not base and out.parameter_hash() == base.parameter_hash()


def test_steps_alternate_in_order(small):
    _, tgt, enc, model = small
    events = []
    h = tr.adapt(model, tgt, enc, quick(), on_event=lambda phase, it: events.append((phase, it)))
    n_iter = len(h.iterations)
    assert n_iter == 3 * math.ceil(len(tgt) / 32)
    assert events == [(p, i) for i in range(n_iter) for p in ("phase1", "pseudo", "phase2")]


def test_phase_freezing(small):
    _, tgt, enc, model = small
    cfg = quick()
    state = tr.make_state(model, enc, cfg)
    x = torch.as_tensor(np.array(tgt.features[:32]))
    m0 = state.model.parameter_hash()
    p0, s0 = state.prompt.hash(), param_hash([state.cov.sigma])
    tr.phase1_step(x, state, enc, cfg)
    assert state.model.parameter_hash() == m0
    assert state.prompt.hash() != p0 and param_hash([state.cov.sigma]) != s0
    p1, s1 = state.prompt.hash(), param_hash([state.cov.sigma])
    tr.phase2_step(x, tr.make_pseudo_labels(x, state.prompt, enc), state, cfg)
    assert state.prompt.hash() == p1 and param_hash([state.cov.sigma]) == s1
    assert state.model.parameter_hash() != m0


def test_zero_learning_rates_change_nothing(small):
    _, tgt, enc, model = small
    h = tr.adapt(model, tgt, enc, quick(lr_prompt=0.0, lr_cov=0.0, lr_model=0.0))
    assert h.model.parameter_hash() == model.parameter_hash()
    assert h.prompt.hash() == tr.make_state(model, enc, quick()).prompt.hash()
    np.testing.assert_array_equal(h.cov.numpy(), np.ones(3))
    # A constant prompt gives the same pseudo-label accuracy every epoch.
    assert len({e["pseudo_acc"] for e in h.epochs}) == 1


def test_non_finite_batches_are_skipped(small):
    _, tgt, enc, model = small
    cfg = quick()
    state = tr.make_state(model, enc, cfg)
    x = torch.full((4, SPEC.dim), float("nan"), dtype=torch.float64)
    before = (state.model.parameter_hash(), state.prompt.hash())
    assert tr.phase1_step(x, state, enc, cfg)["skipped"] == 1.0
    assert tr.phase2_step(x, torch.full((4, 3), 1 / 3, dtype=torch.float64), state, cfg)["skipped"] == 1.0
    assert (state.model.parameter_hash(), state.prompt.hash()) == before


def test_no_target_labels_read_by_optimisation(small):
    _, tgt, enc, model = small
    tgt = tgt.with_features(tgt.features)  # fresh read counter
    tr.adapt(model, tgt, enc, quick())
    assert tgt.label_reads.get("optimization", 0) == 0
    assert tgt.label_reads["evaluation"] > 0


def test_label_content_does_not_change_training(small, tmp_path):
    _, tgt, enc, model = small
    a = tr.adapt(model, tgt, enc, quick()).write(tmp_path / "a")
    b = tr.adapt(model, tgt.with_labels(np.zeros(len(tgt), dtype=int)), enc, quick()).write(tmp_path / "b")
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
    assert (a / "losses.csv").read_text() == (b / "losses.csv").read_text()


def test_history_files(small, tmp_path):
    _, tgt, enc, model = small
    h = tr.adapt(model, tgt, enc, quick())
    d = h.write(tmp_path / "run")
    losses = (d / "losses.csv").read_text().splitlines()
    metrics = (d / "metrics.csv").read_text().splitlines()
    assert losses[0].split(",") == list(tr.LOSS_COLUMNS) and len(losses) == 1 + len(h.iterations)
    assert metrics[0].split(",") == list(tr.METRIC_COLUMNS) and len(metrics) == 2 + 3
    assert metrics[1].startswith("-1,")
    assert "wall_clock_s" in (d / "summary.txt").read_text()
    assert h.encoder_hash_before == h.encoder_hash_after


def test_input_errors(small):
    src, tgt, enc, model = small
    with pytest.raises(ValueError):
        tr.adapt(TargetModel(SPEC.dim, 4), tgt, enc, quick())
    with pytest.raises(ValueError):
        tr.adapt(TargetModel(SPEC.dim + 1, 3), tgt, enc, quick())
    with pytest.raises(ValueError):
        tr.AdaptationConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        tr.AdaptationConfig(entropy_reduction="max")


def test_seed_from_env(monkeypatch):
    monkeypatch.delenv(tr.SEED_ENV, raising=False)
    assert tr.seed_from_env(5) == 5
    monkeypatch.setenv(tr.SEED_ENV, "17")
    assert tr.seed_from_env(5) == 17


def test_accuracy_of_reads_under_evaluation(small):
    _, tgt, _, model = small
    t = tgt.with_features(tgt.features)
    with label_access("optimization"):
        tr.accuracy_of(model, t)
    assert set(t.label_reads) == {"evaluation"}
