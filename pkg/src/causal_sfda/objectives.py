"""Loss functions for both adaptation phases.

Two layers live here. The lower-case tensor functions (:func:`vmi`,
:func:`pmi`, :func:`ec`, ...) take and return ``torch`` tensors and are what
the trainer differentiates through. The ``*_loss`` / ``*_objective`` wrappers
accept arrays, evaluate the same tensor function in float64 and return a
:class:`LossValue` carrying the scalar plus the gradient for every learnable
argument, which is the form the gradient checks and the CLI consume.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

LOG_FLOOR = 1e-12
SIGMA_FLOOR = 1e-6

# (alpha, sigma_w, tau) used for every setting in the reference experiments.
DEFAULT_ALPHA = 0.003
DEFAULT_SIGMA_W = 0.4
DEFAULT_TAU = 1.0


class ShapeError(ValueError):
    pass


def _as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    if isinstance(x, DiagCovariance):
        x = x.sigma
    t = torch.as_tensor(np.asarray(x.detach() if isinstance(x, torch.Tensor) else x), dtype=torch.float64)
    t = t.clone()
    if requires_grad:
        t.requires_grad_(True)
    return t


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"{what}: expected two n x C matrices of equal shape, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] < 1 or a.shape[1] < 2:
        raise ShapeError(f"{what}: need n >= 1 rows and C >= 2 classes")


def _check_sigma(sigma: torch.Tensor, C: int) -> None:
    if sigma.ndim != 1 or sigma.shape[0] != C:
        raise ShapeError(f"covariance has {tuple(sigma.shape)} entries, expected ({C},)")


def _xlogy(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return p * torch.log(q.clamp_min(LOG_FLOOR))


class DiagCovariance:
    """Learnable diagonal covariance shared across mini-batches."""

    def __init__(self, n_classes: int | None = None, sigma=None, floor: float = SIGMA_FLOOR):
        if sigma is None:
            sigma = torch.ones(n_classes, dtype=torch.float64)
        self.sigma = torch.as_tensor(sigma, dtype=torch.float64).detach().clone().requires_grad_(True)
        self.floor = floor
        self.clamp_()

    def clamp_(self) -> "DiagCovariance":
        with torch.no_grad():
            self.sigma.clamp_(min=self.floor)
        return self

    def __len__(self) -> int:
        return self.sigma.shape[0]

    def numpy(self) -> np.ndarray:
        return self.sigma.detach().numpy().copy()


# -- tensor level -------------------------------------------------------------

def vmi(vil_logits: torch.Tensor, target_logits: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Negated Gaussian log-likelihood term: ``-(1/n) sum_i (r_i' S^-1 r_i + log|S|)``."""
    _check_pair(vil_logits, target_logits, "vmi")
    _check_sigma(sigma, vil_logits.shape[1])
    s = sigma.clamp_min(SIGMA_FLOOR)
    resid = vil_logits - target_logits.detach()
    quad = (resid.pow(2) / s).sum(dim=1)
    return -(quad + torch.log(s).sum()).mean()


def reweight(vil_logits: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """``softmax(softmax(1/sigma) * softmax(o))`` row-wise."""
    if vil_logits.ndim != 2:
        raise ShapeError("reweight: logits must be an n x C matrix")
    _check_sigma(sigma, vil_logits.shape[1])
    w = torch.softmax(1.0 / sigma.clamp_min(SIGMA_FLOOR), dim=0)
    return torch.softmax(w * torch.softmax(vil_logits, dim=1), dim=1)


def batch_joint(vil_probs: torch.Tensor, pseudo_probs: torch.Tensor) -> torch.Tensor:
    """Symmetrised, normalised ``(1/n) sum_i p_i q_i^T``."""
    _check_pair(vil_probs, pseudo_probs, "batch_joint")
    P = vil_probs.T @ pseudo_probs / vil_probs.shape[0]
    P = (P + P.T) / 2
    return P / P.sum()


def pmi(vil_probs: torch.Tensor, pseudo_probs: torch.Tensor) -> torch.Tensor:
    P = batch_joint(vil_probs, pseudo_probs)
    Pi = P.sum(dim=1, keepdim=True)
    Pj = P.sum(dim=0, keepdim=True)
    return (_xlogy(P, P) - _xlogy(P, Pi) - _xlogy(P, Pj)).sum()


def ec(
    vil_logits: torch.Tensor,
    target_logits: torch.Tensor,
    sigma: torch.Tensor,
    alpha: float = DEFAULT_ALPHA,
    pmi_sign: float = 1.0,
    vmi_sign: float = -1.0,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Phase-1 objective, literally ``L_PMI - alpha * L_VMI`` at default signs."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    l_pmi = pmi(torch.softmax(vil_logits, dim=1), reweight(vil_logits, sigma))
    l_vmi = vmi(vil_logits, target_logits, sigma)
    total = pmi_sign * l_pmi + vmi_sign * alpha * l_vmi
    return total, {"L_PMI": l_pmi, "L_VMI": l_vmi}


def un(target_probs: torch.Tensor, tau: float = DEFAULT_TAU, reduction: str = "sum") -> torch.Tensor:
    """Per-sample entropy plus ``tau * KL(marginal || uniform)``.

    ``reduction`` chooses whether the entropies are summed over the batch
    (default) or averaged. The mean keeps the term on the scale of the
    batch-averaged cross-entropy and makes it independent of batch size.
    """
    if target_probs.ndim != 2 or target_probs.shape[1] < 2:
        raise ShapeError("un: expected an n x C probability matrix")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    C = target_probs.shape[1]
    ent = -_xlogy(target_probs, target_probs).sum(dim=1)
    ent = ent.sum() if reduction == "sum" else ent.mean()
    rho = target_probs.mean(dim=0)
    kl = _xlogy(rho, rho * C).sum()
    return ent + tau * kl


def sce(target_probs: torch.Tensor, pseudo_labels: torch.Tensor) -> torch.Tensor:
    _check_pair(target_probs, pseudo_labels, "sce")
    return -_xlogy(pseudo_labels.detach(), target_probs).sum(dim=1).mean()


def ic(
    target_probs: torch.Tensor,
    pseudo_labels: torch.Tensor,
    tau: float = DEFAULT_TAU,
    sigma_w: float = DEFAULT_SIGMA_W,
    reduction: str = "sum",
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    if sigma_w < 0:
        raise ValueError("sigma_w must be non-negative")
    l_un = un(target_probs, tau, reduction)
    l_sce = sce(target_probs, pseudo_labels)
    return l_un + sigma_w * l_sce, {"L_UN": l_un, "L_SCE": l_sce}


# -- array level ---------------------------------------------------------------

@dataclass
class LossValue:
    scalar: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)


def evaluate(fn: Callable, learnable: Mapping[str, object], constant: Mapping[str, object] | None = None,
             **kwargs) -> LossValue:
    """Evaluate ``fn`` in float64 and differentiate w.r.t. every ``learnable`` input."""
    leaves = {k: _as_tensor(v, requires_grad=True) for k, v in learnable.items()}
    consts = {k: _as_tensor(v) for k, v in (constant or {}).items()}
    out = fn(**leaves, **consts, **kwargs)
    parts = {}
    if isinstance(out, tuple):
        out, parts = out
    grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    gradients = {
        k: (np.zeros(tuple(leaves[k].shape)) if g is None else g.numpy().copy())
        for k, g in zip(leaves, grads)
    }
    value = LossValue(float(out.detach()), gradients, {k: float(v.detach()) for k, v in parts.items()})
    if not np.isfinite(value.scalar):
        raise FloatingPointError("loss is not finite")
    return value


def vmi_loss(vil_logits, target_logits, cov) -> LossValue:
    return evaluate(vmi, {"vil_logits": vil_logits, "sigma": cov}, {"target_logits": target_logits})


def reweight_fw(vil_logits, cov) -> np.ndarray:
    with torch.no_grad():
        return reweight(_as_tensor(vil_logits), _as_tensor(cov)).numpy()


def pmi_loss(vil_probs, pseudo_probs) -> LossValue:
    return evaluate(pmi, {"vil_probs": vil_probs, "pseudo_probs": pseudo_probs})


def ec_objective(vil_logits, target_logits, cov, alpha: float = DEFAULT_ALPHA,
                 pmi_sign: float = 1.0, vmi_sign: float = -1.0) -> LossValue:
    return evaluate(ec, {"vil_logits": vil_logits, "sigma": cov}, {"target_logits": target_logits},
                    alpha=alpha, pmi_sign=pmi_sign, vmi_sign=vmi_sign)


def un_loss(target_probs, tau: float = DEFAULT_TAU, reduction: str = "sum") -> LossValue:
    return evaluate(un, {"target_probs": target_probs}, tau=tau, reduction=reduction)


def sce_loss(target_probs, pseudo_labels) -> LossValue:
    return evaluate(sce, {"target_probs": target_probs}, {"pseudo_labels": pseudo_labels})


def ic_objective(target_probs, pseudo_labels, tau: float = DEFAULT_TAU,
                 sigma_w: float = DEFAULT_SIGMA_W, reduction: str = "sum") -> LossValue:
    return evaluate(ic, {"target_probs": target_probs}, {"pseudo_labels": pseudo_labels},
                    tau=tau, sigma_w=sigma_w, reduction=reduction)


def symmetrized_joint(vil_probs, pseudo_probs) -> np.ndarray:
    """The table :func:`pmi` takes the mutual information of, as an array."""
    with torch.no_grad():
        return batch_joint(_as_tensor(vil_probs), _as_tensor(pseudo_probs)).numpy()
