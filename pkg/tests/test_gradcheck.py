import numpy as np
import pytest

from causal_sfda import gradcheck as gc


def test_central_difference_on_quadratic():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.5, -1.0])
    g = gc.central_difference(lambda v: 0.5 * v @ A @ v, x)
    np.testing.assert_allclose(g, A @ x, atol=1e-8)


def test_relative_error_is_scale_free():
    a = np.array([1.0, 2.0])
    assert gc.relative_error(a, a) == 0.0
    assert gc.relative_error(a, -a) == pytest.approx(2.0)
    assert gc.relative_error(1e6 * a, 1e6 * a * (1 + 1e-9)) < 1e-8


def test_suite_covers_every_loss_and_argument():
    results = gc.gradient_suite(trials=2)
    covered = {(r.loss, r.argument) for r in results}
    assert covered == {
        ("vmi", "vil_logits"), ("vmi", "sigma"), ("reweight", "vil_logits"), ("reweight", "sigma"),
        ("pmi", "vil_probs"), ("pmi", "pseudo_probs"), ("ec", "vil_logits"), ("ec", "sigma"),
        ("un", "target_probs"), ("sce", "target_probs"), ("ic", "target_probs"),
    }
    assert all(r.ok for r in results), max(r.rel_error for r in results)


@pytest.mark.parametrize("loss", ["vmi", "reweight", "pmi", "ec", "un", "sce", "ic"])
def test_sign_flip_is_detected(loss):
    results = gc.gradient_suite(trials=1, fault=loss)
    flagged = {r.loss for r in results if not r.ok}
    assert flagged == {loss}


def test_suite_is_seeded():
    a = [r.rel_error for r in gc.gradient_suite(trials=1, seed=3)]
    b = [r.rel_error for r in gc.gradient_suite(trials=1, seed=3)]
    assert a == b
