"""Independent reference computations used to validate the library paths.

Nothing here reuses the batched optimizer kernel: gradients are checked
against finite differences of the loss, the batched SAM variants against a
literal copy-perturb-recompute loop, and the Jacobian-SAM update against its
closed form for the two-layer deep linear network.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from samnoise import models as M
from samnoise.errors import DegenerateGradient
from samnoise.models import DLN2Model, LinearModel, MLPModel
from samnoise.optim import Rule, rule_terms

FD_STEP = 1e-5
KINK_WINDOW = 10 * FD_STEP


@dataclass
class OracleReport:
    name: str
    max_rel_err: float
    tol: float
    passed: bool
    n: int

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def rel_err(a, b) -> float:
    a = np.concatenate([np.ravel(x) for x in a]) if isinstance(a, (tuple, list)) else np.ravel(a)
    b = np.concatenate([np.ravel(x) for x in b]) if isinstance(b, (tuple, list)) else np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _report(name, errors, tol, extra_ok=True):
    worst = max(errors) if errors else 0.0
    return OracleReport(name, worst, tol, bool(extra_ok and worst <= tol), len(errors))


# ---------------------------------------------------------------- finite differences


def _loss(model, x, t):
    f = M.forward(model, x)
    if getattr(model, "multiclass", False):
        f = np.asarray(f)
        m = f.max()
        return float(m + np.log(np.sum(np.exp(f - m))) - f[t])
    return float(np.logaddexp(0.0, -t * f))


def fd_gradient(model, x, t, h=FD_STEP):
    """Central differences of the per-example loss, one coordinate at a time."""
    params = [p.copy() for p in model.params()]
    out = []
    for bi, p in enumerate(params):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = _loss(model.replace(params), x, t)
            flat[j] = orig - h
            down = _loss(model.replace(params), x, t)
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
        out.append(g)
    return tuple(out)


def random_instance(family, rng, dim=5, width=4, num_classes=3):
    """Random model + example for the oracle checks; scales keep logits O(1)."""
    x = rng.normal(size=dim)
    if family == "linear":
        return LinearModel(rng.normal(size=dim)), x, int(rng.choice([-1, 1]))
    if family == "dln2":
        m = DLN2Model(rng.normal(size=(width, dim)) / np.sqrt(dim), rng.normal(size=width))
        return m, x, int(rng.choice([-1, 1]))
    act = "identity" if family == "mlp-identity" else "relu"
    m = MLPModel(rng.normal(size=(width, dim)) / np.sqrt(dim), rng.normal(size=(num_classes, width)), act)
    return m, x, int(rng.integers(num_classes))


def at_relu_kink(model, x, window=KINK_WINDOW) -> bool:
    """True if some ReLU pre-activation sits within the finite-difference window."""
    if isinstance(model, MLPModel) and model.activation == "relu":
        return bool(np.any(np.abs(model.W1 @ x) < window))
    return False


def fd_gradient_check(family, n_instances=100, tol=1e-5, seed=0, grad_fn=None) -> OracleReport:
    """Analytic per-example gradients vs central finite differences.

    MLP instances with a pre-activation inside the kink window are skipped.
    ``grad_fn(model, x, t)`` overrides the analytic path (mutation testing).
    """
    grad_fn = grad_fn or (lambda m, x, t: M.grad_decomp(m, x, t).grad)
    rng = np.random.default_rng(seed)
    errors = []
    while len(errors) < n_instances:
        model, x, t = random_instance(family, rng)
        if at_relu_kink(model, x):
            continue
        errors.append(rel_err(grad_fn(model, x, t), fd_gradient(model, x, t)))
    return _report(f"fd_gradient[{family}]", errors, tol)


# ---------------------------------------------------------------- reference SAM loop


def reference_contribution(model, x, t, rule, rho):
    """Per-example update contribution, computed by copying and perturbing."""
    rule = Rule.parse(rule)
    d = M.grad_decomp(model, x, t)
    if rule is Rule.SGD or rho == 0:
        return d.grad
    try:
        shifted = M.perturb(model, d.grad, rho)
    except DegenerateGradient:
        shifted = model
    dp = M.grad_decomp(shifted, x, t)
    mc = getattr(model, "multiclass", False)
    if rule is Rule.SAM1:
        return dp.grad
    if rule is Rule.LSAM:
        return M.assemble(dp.logit_scale, d.jacobian, t, mc)
    if rule is Rule.JSAM:
        return M.assemble(d.logit_scale, dp.jacobian, t, mc)
    raise ValueError(f"no per-example reference for {rule}")


def reference_update(model, X, T, rule, rho):
    """Mean contribution over a batch, accumulated in index order."""
    total = None
    for x, t in zip(np.asarray(X), np.asarray(T)):
        c = reference_contribution(model, x, int(t), rule, rho)
        total = list(c) if total is None else [a + b for a, b in zip(total, c)]
    return tuple(a / len(X) for a in total)


def batched_vs_reference_check(family, n_instances=20, batch=6, tol=1e-12, seed=0) -> OracleReport:
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_instances):
        model, _, _ = random_instance(family, rng)
        X = rng.normal(size=(batch, model.dim))
        if getattr(model, "multiclass", False):
            T = rng.integers(model.num_classes, size=batch)
        else:
            T = rng.choice([-1, 1], size=batch)
        rho = float(rng.uniform(0.05, 1.0))
        for rule in (Rule.SGD, Rule.SAM1, Rule.LSAM, Rule.JSAM):
            fast = rule_terms(model, X, T, rule, rho).grad
            errors.append(rel_err(fast, reference_update(model, X, T, rule, rho)))
    return _report(f"batched_vs_reference[{family}]", errors, tol)


# ---------------------------------------------------------------- J-SAM closed form


def jsam_closed_form(model: DLN2Model, x, t, rho):
    """J-SAM contribution on the DLN: gradient plus activation / weight penalties."""
    z = model.W @ x
    f = float(model.v @ z)
    s = 1.0 / (1.0 + math.exp(t * f)) if t * f > -700 else 1.0
    xx = float(x @ x)
    J = math.sqrt(float(z @ z) + xx * float(model.v @ model.v))
    grad_W = -t * s * np.outer(model.v, x)
    grad_v = -t * s * z
    return grad_W + (rho * s / J) * np.outer(z, x), grad_v + (rho * s * xx / J) * model.v


def jsam_identity_check(n_instances=1000, tol=1e-10, seed=0, rho=None) -> OracleReport:
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_instances):
        model, x, t = random_instance("dln2", rng)
        r = float(rng.uniform(0.01, 2.0)) if rho is None else rho
        errors.append(rel_err(reference_contribution(model, x, t, Rule.JSAM, r), jsam_closed_form(model, x, t, r)))
    return _report("jsam_identity", errors, tol)


# ---------------------------------------------------------------- reweighting factor is monotone in the margin


def upweight_factor(z, C):
    """sigmoid(-z + C) / sigmoid(-z) = (1 + e^z) / (1 + e^(z - C)), overflow safe."""
    z = np.asarray(z, dtype=np.float64)
    return np.exp(np.logaddexp(0.0, z) - np.logaddexp(0.0, z - C))


def upweight_factor_derivative(z, C):
    z = np.asarray(z, dtype=np.float64)
    # e^z (1 - e^-C) / (1 + e^(z - C))^2
    return np.exp(z - 2.0 * np.logaddexp(0.0, z - C)) * (-np.expm1(-C))


def reweighting_monotonicity_check(zs=None, Cs=(0.1, 0.5, 1.0, 2.0), tol=1e-4) -> OracleReport:
    """Strict increase of the reweighting factor in the margin, for C > 0."""
    zs = np.linspace(-10.0, 10.0, 1000) if zs is None else np.asarray(zs, dtype=np.float64)
    ok = True
    errors = []
    h = 1e-5
    for C in Cs:
        vals = upweight_factor(zs, C)
        ok &= bool(np.all(np.diff(vals) > 0))
        fd = (upweight_factor(zs + h, C) - upweight_factor(zs - h, C)) / (2 * h)
        ok &= bool(np.all(fd > 0))
        exact = upweight_factor_derivative(zs, C)
        ok &= bool(np.all(exact > 0))
        errors.append(float(np.max(np.abs(fd - exact) / np.maximum(np.abs(exact), 1e-12))))
    return _report("reweighting_monotonicity", errors, tol, ok)


# ---------------------------------------------------------------- large-rho asymptotics


@dataclass
class AsymptoticResult:
    cosine: float
    max_ratio_dev: float
    first_coord: float
    first_coord_target: float
    first_coord_se: float


def asymptotic_sam(train, rho_large, noise_rate, signal_B) -> AsymptoticResult:
    X, T = train.inputs, train.observed_targets
    w0 = LinearModel(np.zeros(X.shape[1]))
    terms = rule_terms(w0, X, T, Rule.SAM1, rho_large)
    update = -terms.grad[0]
    target = X.T @ T / len(T)
    cosine = float(update @ target / (np.linalg.norm(update) * np.linalg.norm(target)))
    # weight on t_i x_i for each example; all should approach one common value
    weights = terms.update_norms / np.linalg.norm(X, axis=1)
    ratio_dev = float(weights.max() / weights.min() - 1.0)
    col = T * X[:, 0]
    se = float(col.std(ddof=1) / math.sqrt(len(col))) if len(col) > 1 else 0.0
    return AsymptoticResult(cosine, ratio_dev, float(target[0]), (1 - 2 * noise_rate) * signal_B, se)


def asymptotic_sam_check(train, rho_large=1e4, noise_rate=0.4, signal_B=2.0) -> OracleReport:
    r = asymptotic_sam(train, rho_large, noise_rate, signal_B)
    within = abs(r.first_coord - r.first_coord_target) <= 3 * r.first_coord_se + 1e-12
    err = max(1.0 - r.cosine, 0.0)
    ok = r.cosine >= 1 - 1e-6 and r.max_ratio_dev <= 1e-3 and within
    return OracleReport("asymptotic_sam", err, 1e-6, bool(ok), len(train))


def ridge_limit_check(n=20, d=5, lam=1e8, seed=0) -> OracleReport:
    """Ridge solution direction approaches X^T t as the penalty grows."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    t = rng.choice([-1.0, 1.0], size=n)
    ridge = np.linalg.solve(X.T @ X + lam * np.eye(d), X.T @ t)
    mean = X.T @ t / lam
    cos = float(ridge @ mean / (np.linalg.norm(ridge) * np.linalg.norm(mean)))
    return OracleReport("ridge_limit", 1.0 - cos, 1e-6, bool(cos >= 1 - 1e-6), 1)


# ---------------------------------------------------------------- collapse identities


def collapse_check(family, seed=0) -> OracleReport:
    """rho = 0 (and gamma = 0) must reproduce the SGD update bit for bit."""
    from samnoise.optim import OptimConfig, step

    rng = np.random.default_rng(seed)
    model, _, _ = random_instance(family, rng)
    X = rng.normal(size=(8, model.dim))
    if getattr(model, "multiclass", False):
        T = rng.integers(model.num_classes, size=8)
    else:
        T = rng.choice([-1, 1], size=8)
    base = step(model, X, T, OptimConfig(Rule.SGD, lr=0.1, weight_decay=1e-3))
    rules = [Rule.NSAM, Rule.SAM1, Rule.LSAM, Rule.JSAM]
    if family != "linear":
        rules.append(Rule.REGSGD)
    ok = True
    for rule in rules:
        other = step(model, X, T, OptimConfig(rule, lr=0.1, weight_decay=1e-3, rho=0.0))
        ok &= all(np.array_equal(a, b) for a, b in zip(base.params(), other.params()))
    return OracleReport(f"rho0_collapse[{family}]", 0.0 if ok else 1.0, 0.0, bool(ok), len(rules))


def linear_identity_check(n_instances=50, tol=1e-12, seed=0) -> OracleReport:
    """On linear models SAM1 equals LSAM and JSAM equals SGD for any rho."""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_instances):
        model = LinearModel(rng.normal(size=6))
        X = rng.normal(size=(10, 6))
        T = rng.choice([-1, 1], size=10)
        rho = float(rng.uniform(0.0, 5.0))
        sam1 = rule_terms(model, X, T, Rule.SAM1, rho).grad
        errors.append(rel_err(sam1, rule_terms(model, X, T, Rule.LSAM, rho).grad))
        errors.append(rel_err(rule_terms(model, X, T, Rule.JSAM, rho).grad, rule_terms(model, X, T, Rule.SGD).grad))
    return _report("linear_identities", errors, tol)


# ---------------------------------------------------------------- suite


def run_all(seed=0):
    from samnoise.synthdata import ToyDataConfig, sample_toy

    reports = [fd_gradient_check("linear", 100, 1e-6, seed)]
    for fam in ("dln2", "mlp", "mlp-identity"):
        reports.append(fd_gradient_check(fam, 100, 1e-5, seed))
    reports.append(jsam_identity_check(1000, 1e-10, seed))
    reports.append(reweighting_monotonicity_check())
    train, _ = sample_toy(ToyDataConfig(seed=seed))
    reports.append(asymptotic_sam_check(train, 1e4))
    reports.append(ridge_limit_check(seed=seed))
    for fam in ("linear", "dln2", "mlp", "mlp-identity"):
        reports.append(collapse_check(fam, seed))
    reports.append(linear_identity_check(seed=seed))
    for fam in ("dln2", "mlp", "mlp-identity"):
        reports.append(batched_vs_reference_check(fam, seed=seed))
    return reports


def format_table(reports) -> str:
    lines = [f"{'check':<34} {'max_rel_err':>12} {'tol':>9} {'n':>6}  result"]
    for r in reports:
        lines.append(f"{r.name:<34} {r.max_rel_err:12.3e} {r.tol:9.1e} {r.n:6d}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def write_json(reports, path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
