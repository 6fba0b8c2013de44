"""Central finite-difference checks for every loss and learnable argument."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import objectives as obj

FD_STEP = 1e-5
REL_TOL = 1e-4
DEFAULT_SEED = 7


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _softmax(rng, n, C, scale=1.5, floor=0.2):
    # Mixed with uniform so no entry nears the log clamp, where the difference
    # quotient's truncation error (~ step^2 / p^3) would dominate.
    z = rng.normal(0, scale, size=(n, C))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return (1 - floor) * e / e.sum(axis=1, keepdims=True) + floor / C


def _reweight_projection(vil_logits, sigma, weights):
    return (obj.reweight(vil_logits, sigma) * weights).sum()


def _cases(rng: np.random.Generator, n: int = 5, C: int = 4):
    """Yield ``(loss name, fn, learnable inputs, constant inputs, kwargs)``."""
    logits = lambda: rng.normal(0, 2.0, size=(n, C))
    sigma = lambda: rng.uniform(0.5, 2.0, size=C)
    yield "vmi", obj.vmi, {"vil_logits": logits(), "sigma": sigma()}, {"target_logits": logits()}, {}
    yield ("reweight", _reweight_projection, {"vil_logits": logits(), "sigma": sigma()},
           {"weights": rng.normal(size=(n, C))}, {})
    yield "pmi", obj.pmi, {"vil_probs": _softmax(rng, n, C), "pseudo_probs": _softmax(rng, n, C)}, {}, {}
    yield ("ec", obj.ec, {"vil_logits": logits(), "sigma": sigma()}, {"target_logits": logits()},
           {"alpha": float(rng.uniform(0.0, 1.0))})
    for red in ("sum", "mean"):
        yield "un", obj.un, {"target_probs": _softmax(rng, n, C)}, {}, {"tau": obj.DEFAULT_TAU, "reduction": red}
    yield "sce", obj.sce, {"target_probs": _softmax(rng, n, C)}, {"pseudo_labels": _softmax(rng, n, C)}, {}
    for red in ("sum", "mean"):
        yield ("ic", obj.ic, {"target_probs": _softmax(rng, n, C)}, {"pseudo_labels": _softmax(rng, n, C)},
               {"tau": obj.DEFAULT_TAU, "sigma_w": obj.DEFAULT_SIGMA_W, "reduction": red})


@dataclass
class GradResult:
    loss: str
    argument: str
    trial: int
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error < REL_TOL


def gradient_suite(trials: int = 50, seed: int = DEFAULT_SEED, fault: str | None = None) -> list[GradResult]:
    """Compare autograd gradients with central differences.

    ``fault`` names a loss whose analytic gradient is sign-flipped before the
    comparison; it exists so the verify command can be shown to fail.
    """
    rng = np.random.default_rng(seed)
    results = []
    for trial in range(trials):
        for name, fn, learn, const, kw in _cases(rng):
            value = obj.evaluate(fn, learn, const, **kw)
            for arg in learn:
                def f(x, arg=arg):
                    inputs = {k: torch.as_tensor(v, dtype=torch.float64) for k, v in {**learn, **const}.items()}
                    inputs[arg] = torch.as_tensor(x, dtype=torch.float64)
                    with torch.no_grad():
                        out = fn(**inputs, **kw)
                    return float(out[0] if isinstance(out, tuple) else out)

                analytic = value.gradients[arg]
                if fault == name:
                    analytic = -analytic
                numeric = central_difference(f, learn[arg])
                results.append(GradResult(name, arg, trial, relative_error(analytic, numeric)))
    return results
