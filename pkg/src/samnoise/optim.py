"""SGD, naive SAM, 1-SAM, logit-SAM, Jacobian-SAM and regularized SGD.

All rules share one batched kernel per model family. The kernel returns the
mean per-example update contribution together with per-example diagnostics
(update norms and logit-scale norms before/after the perturbation), so the
training loop and the metrics read the same numbers.

The per-example 1-SAM perturbation of a two-layer network is rank one per
layer (eps_W1 = c d x^T, eps_W2 = c g h^T), so the perturbed forward and
backward passes are evaluated without materializing a copy of the weights
for every example. ``samnoise.oracle.reference_update`` is the literal
copy-perturb-recompute loop used to validate this path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import softmax

from samnoise.errors import UnsupportedModel
from samnoise.models import (
    DEGENERATE_NORM,
    Blocks,
    DLN2Model,
    LinearModel,
    MLPModel,
    add_scaled,
    joint_norm,
    sigmoid,
)


class Rule(str, Enum):
    SGD = "sgd"
    NSAM = "nsam"
    SAM1 = "sam1"
    LSAM = "lsam"
    JSAM = "jsam"
    REGSGD = "regsgd"

    @classmethod
    def parse(cls, value) -> "Rule":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower().replace("-", ""))


PER_EXAMPLE_RULES = (Rule.SAM1, Rule.LSAM, Rule.JSAM)


@dataclass(frozen=True)
class OptimConfig:
    rule: Rule = Rule.SGD
    lr: float = 0.01
    rho: float = 0.0
    weight_decay: float = 0.0
    gamma_z: float = 0.0
    gamma_v: float = 0.0
    batch_size: Optional[int] = None  # None -> full batch

    def __post_init__(self):
        object.__setattr__(self, "rule", Rule.parse(self.rule))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for name in ("rho", "weight_decay", "gamma_z", "gamma_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ValueError("batch_size must be positive (or None for full batch)")


@dataclass
class RuleTerms:
    grad: Blocks
    update_norms: np.ndarray
    scale_before: np.ndarray
    scale_after: np.ndarray


def _safe_scale(rho, norms):
    ok = norms > DEGENERATE_NORM
    return np.where(ok, rho / np.where(ok, norms, 1.0), 0.0)


def _linear_terms(model: LinearModel, X, T, rule, rho, gamma_z, xx):
    if rule is Rule.REGSGD:
        raise UnsupportedModel("regularized SGD needs a hidden layer")
    b = X.shape[0]
    T = T.astype(np.float64)
    f = X @ model.w
    s = sigmoid(-T * f)
    dl = -T * s
    xnorm = np.sqrt(xx)
    if rule in PER_EXAMPLE_RULES:
        c = _safe_scale(rho, np.abs(dl) * xnorm)
        fp = f + c * dl * xx
        sp = sigmoid(-T * fp)
    else:
        sp = s
    u = -T * sp if rule in (Rule.SAM1, Rule.LSAM) else dl
    grad = (X.T @ u / b,)
    return RuleTerms(grad, np.abs(u) * xnorm, s, sp)


def _dloss(F, T, binary):
    """d loss / d logits and the logit-scale norm."""
    if binary:
        t = T.astype(np.float64)[:, None]
        s = sigmoid(-t * F)
        return -t * s, s[:, 0]
    g = softmax(F, axis=1)
    g[np.arange(F.shape[0]), T] -= 1.0
    return g, np.sqrt(np.einsum("ij,ij->i", g, g))


def _two_layer_terms(W1, W2, activation, X, T, rule, rho, gamma_z, xx):
    binary = W2.shape[0] == 1
    relu = activation == "relu"
    b = X.shape[0]
    A = X @ W1.T
    H = np.maximum(A, 0.0) if relu else A
    F = H @ W2.T
    g, scale = _dloss(F, T, binary)
    back = g @ W2
    mask = (A > 0).astype(np.float64) if relu else None

    if rule not in PER_EXAMPLE_RULES:
        dH = back
        if rule is Rule.REGSGD and gamma_z > 0:
            hn = np.sqrt(np.einsum("ij,ij->i", H, H))[:, None]
            dH = dH + gamma_z * np.where(hn > 0, H / np.where(hn > 0, hn, 1.0), 0.0)
        d = dH * mask if relu else dH
        G1 = d.T @ X / b
        G2 = g.T @ H / b
        norms = np.sqrt(
            np.einsum("ij,ij->i", g, g) * np.einsum("ij,ij->i", H, H)
            + np.einsum("ij,ij->i", d, d) * xx
        )
        return RuleTerms((G1, G2), norms, scale, scale)

    # per-example gradient: dW1_i = d_i x_i^T, dW2_i = g_i h_i^T
    d = back * mask if relu else back
    hh = np.einsum("ij,ij->i", H, H)
    gnorm = np.sqrt(np.einsum("ij,ij->i", g, g) * hh + np.einsum("ij,ij->i", d, d) * xx)
    c = _safe_scale(rho, gnorm)
    # forward at (W1 + c d x^T, W2 + c g h^T)
    Ap = A + (c * xx)[:, None] * d
    Hp = np.maximum(Ap, 0.0) if relu else Ap
    Fp = Hp @ W2.T + (c * np.einsum("ij,ij->i", H, Hp))[:, None] * g
    gp, scale_p = _dloss(Fp, T, binary)

    if rule is Rule.LSAM:
        u, Hj, Aj = gp, H, A
        backj = u @ W2
    else:
        u = gp if rule is Rule.SAM1 else g
        Hj, Aj = Hp, Ap
        # (W2 + c g h^T)^T u
        backj = u @ W2 + (c * np.einsum("ij,ij->i", u, g))[:, None] * H
    dj = backj * (Aj > 0) if relu else backj
    G1 = dj.T @ X / b
    G2 = u.T @ Hj / b
    norms = np.sqrt(
        np.einsum("ij,ij->i", u, u) * np.einsum("ij,ij->i", Hj, Hj) + np.einsum("ij,ij->i", dj, dj) * xx
    )
    return RuleTerms((G1, G2), norms, scale, scale_p)


def rule_terms(model, X, T, rule, rho=0.0, gamma_z=0.0, row_sq_norms=None) -> RuleTerms:
    """Mean update contribution of ``rule`` over a batch, plus diagnostics.

    Naive SAM is evaluated as SGD terms at the shared perturbed point; a zero
    mean gradient leaves the point unperturbed. Weight decay and the
    last-layer penalty are not included. ``row_sq_norms`` may carry the
    precomputed squared norms of the rows of X.
    """
    rule = Rule.parse(rule)
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a nonempty 2-D batch")
    if X.shape[1] != model.dim:
        raise ValueError(f"batch has {X.shape[1]} features, model expects {model.dim}")
    xx = np.einsum("ij,ij->i", X, X) if row_sq_norms is None else row_sq_norms
    if rule is Rule.NSAM:
        base = rule_terms(model, X, T, Rule.SGD, row_sq_norms=xx)
        norm = joint_norm(base.grad)
        if rho == 0 or not norm > DEGENERATE_NORM:
            return base
        shifted = model.replace(add_scaled(model.params(), base.grad, rho / norm))
        after = rule_terms(shifted, X, T, Rule.SGD, row_sq_norms=xx)
        return RuleTerms(after.grad, after.update_norms, base.scale_before, after.scale_before)
    if isinstance(model, LinearModel):
        return _linear_terms(model, X, T, rule, rho, gamma_z, xx)
    if isinstance(model, (DLN2Model, MLPModel)):
        W1, W2, act = model.two_layer()
        terms = _two_layer_terms(W1, W2, act, X, T, rule, rho, gamma_z, xx)
        if isinstance(model, DLN2Model):
            terms.grad = (terms.grad[0], terms.grad[1][0])
        return terms
    raise UnsupportedModel(type(model).__name__)


def batch_gradient(model, X, T, config: OptimConfig, row_sq_norms=None) -> Blocks:
    """Full update direction of one step, weight decay and penalties included."""
    if config.rule is Rule.REGSGD and isinstance(model, LinearModel):
        raise UnsupportedModel("regularized SGD needs a hidden layer")
    terms = rule_terms(model, X, T, config.rule, config.rho, config.gamma_z, row_sq_norms)
    grad = list(terms.grad)
    if config.rule is Rule.REGSGD and config.gamma_v > 0:
        grad[-1] = grad[-1] + 2.0 * config.gamma_v * model.params()[-1]
    if config.weight_decay:
        grad = [gb + config.weight_decay * p for gb, p in zip(grad, model.params())]
    return tuple(grad)


def step(model, X, T, config: OptimConfig, row_sq_norms=None):
    """One update w <- w - lr * (mean contribution + weight_decay * w)."""
    grad = batch_gradient(model, X, T, config, row_sq_norms)
    return model.replace(tuple(p - config.lr * gb for p, gb in zip(model.params(), grad)))


def _step_as(rule):
    def fn(model, X, T, config: OptimConfig, row_sq_norms=None):
        return step(model, X, T, replace(config, rule=rule), row_sq_norms)

    fn.__name__ = f"step_{rule.value}"
    fn.__doc__ = f"``step`` with the rule forced to {rule.name}."
    return fn


step_sgd = _step_as(Rule.SGD)
step_nsam = _step_as(Rule.NSAM)
step_sam1 = _step_as(Rule.SAM1)
step_lsam = _step_as(Rule.LSAM)
step_jsam = _step_as(Rule.JSAM)
step_regsgd = _step_as(Rule.REGSGD)
