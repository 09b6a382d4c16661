"""End-to-end acceptance suite.

Every criterion is one test. Each test records a single PASS/FAIL line that
the terminal summary prints (see conftest.py); ``python3 tests/test_acceptance.py``
runs the module through pytest with that summary.

The long experiments (toy rho sweep, digits ranking) run once per session and
write their CSVs under a session temp dir; later criteria and the
reproducibility check read those files back.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import spearmanr

from samnoise import metrics as MT
from samnoise import oracle as O
from samnoise.optim import OptimConfig, Rule, rule_terms, step
from samnoise.oracle import random_instance, rel_err
from samnoise.runner import DataSpec, ExperimentConfig, ModelSpec, run, sweep
from samnoise.synthdata import ToyDataConfig, sample_toy

pytestmark = pytest.mark.acceptance

TOY_RHOS = [0.0, 0.03, 0.06, 0.09, 0.12, 0.15, 0.18]
TOY_SEEDS = [0, 1, 2, 3, 4]
DESK_SEEDS = [0, 1, 2]
DESK_RHO = 0.1
GAMMA_GRID = [(0.01, 0.001), (0.05, 0.005), (0.1, 0.01)]
FAMILIES = ("dln2", "mlp")


def toy_config(rule, out):
    return ExperimentConfig(
        data=DataSpec(kind="toy", noise_rate=0.4, signal_B=2.0, gamma=1.0, dim=1000, n_train=500, n_test=1000),
        model=ModelSpec("linear", init_std=0.3),
        optim=OptimConfig(rule, lr=0.01),
        epochs=4000,
        eval_every=10,
        seeds=TOY_SEEDS,
        out=str(out),
    )


def desk_config(family, optim, out):
    return ExperimentConfig(
        data=DataSpec(kind="digits", noise_rate=0.3),
        model=ModelSpec(family, width=500, init_std="lecun"),
        optim=optim,
        epochs=100,
        eval_every=1,
        seeds=DESK_SEEDS,
        out=str(out),
    )


def traces(out, rows):
    return {r["seed"]: MT.MetricTrace.from_csv((out / r["csv"]).read_text()) for r in rows}


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """SAM1 and n-SAM rho sweeps on the toy data; keyed [rule][rho][seed]."""
    root = tmp_path_factory.mktemp("toy")
    t0 = time.perf_counter()
    out = {}
    for rule in ("sam1", "nsam"):
        cfg = toy_config(rule, root / rule)
        sweep(cfg, rho_grid=TOY_RHOS)
        out[rule] = {
            rho: {s: MT.MetricTrace.from_csv((root / rule / f"{rule}_rho{rho:g}_seed{s}.csv").read_text()) for s in TOY_SEEDS}
            for rho in TOY_RHOS
        }
    return {"traces": out, "root": root, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Digits runs keyed [family][label][seed]; label is a rule or 'regsgd:gz:gv'."""
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    out = {}
    for fam in FAMILIES:
        runs = {}
        for rule in ("sgd", "sam1", "jsam", "lsam"):
            rho = 0.0 if rule == "sgd" else DESK_RHO
            opt = OptimConfig(rule, lr=0.1, rho=rho, weight_decay=5e-4, batch_size=128)
            d = root / fam / rule
            runs[rule] = traces(d, run(desk_config(fam, opt, d)))
        for gz, gv in GAMMA_GRID:
            opt = OptimConfig("regsgd", lr=0.1, weight_decay=5e-4, batch_size=128, gamma_z=gz, gamma_v=gv)
            d = root / fam / f"regsgd_{gz:g}_{gv:g}"
            runs[f"regsgd:{gz:g}:{gv:g}"] = traces(d, run(desk_config(fam, opt, d)))
        out[fam] = runs
    return {"traces": out, "root": root, "seconds": time.perf_counter() - t0}


def mean_best(by_seed):
    return float(np.mean([t.best_test_acc for t in by_seed.values()]))


# ---------------------------------------------------------------- 1


def test_c01_oracle_suite(record):
    t0 = time.perf_counter()
    reports = [O.fd_gradient_check(fam, 100, 1e-5) for fam in ("linear", "dln2", "mlp", "mlp-identity")]
    reports.append(O.jsam_identity_check(1000, 1e-10))
    reports.append(O.reweighting_monotonicity_check())
    secs = time.perf_counter() - t0
    worst_fd = max(r.max_rel_err for r in reports[:4])
    ok = all(r.passed for r in reports) and secs < 60
    record(1, ok, f"fd max rel err {worst_fd:.1e}, jsam residual {reports[4].max_rel_err:.1e}, "
           f"monotonicity grid {'ok' if reports[5].passed else 'violated'}, {secs:.1f}s")
    assert ok, O.format_table(reports)


# ---------------------------------------------------------------- 2


def test_c02_collapse_identities(record):
    rng = np.random.default_rng(0)
    bit_equal = True
    for fam in ("linear", "dln2", "mlp", "mlp-identity"):
        for _ in range(5):
            model, _, _ = random_instance(fam, rng)
            X = rng.normal(size=(8, model.dim))
            T = rng.integers(model.num_classes, size=8) if getattr(model, "multiclass", False) else rng.choice([-1, 1], size=8)
            base = step(model, X, T, OptimConfig("sgd", lr=0.1))
            for rule in ("sam1", "nsam", "lsam", "jsam"):
                other = step(model, X, T, OptimConfig(rule, lr=0.1, rho=0.0))
                bit_equal &= all(np.array_equal(a, b) for a, b in zip(base.params(), other.params()))
    worst = 0.0
    for _ in range(100):
        model, _, _ = random_instance("linear", rng)
        X = rng.normal(size=(10, model.dim))
        T = rng.choice([-1, 1], size=10)
        rho = float(rng.uniform(0.01, 5.0))
        worst = max(
            worst,
            rel_err(rule_terms(model, X, T, "sam1", rho).grad, rule_terms(model, X, T, "lsam", rho).grad),
            rel_err(rule_terms(model, X, T, "jsam", rho).grad, rule_terms(model, X, T, "sgd").grad),
        )
    ok = bit_equal and worst <= 1e-12
    record(2, ok, f"rho=0 bit-equal: {bit_equal}; linear identities max rel err {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 3-5


def test_c03_toy_rho_sweep(toy, record):
    means = [mean_best(toy["traces"]["sam1"][rho]) for rho in TOY_RHOS]
    rs = float(spearmanr(TOY_RHOS, means)[0])
    gain = means[-1] - means[0]
    ok = rs >= 0.9 and gain >= 0.03 and toy["seconds"] < 600
    record(3, ok, f"spearman {rs:.3f}, rho=0.18 - rho=0 = {100 * gain:.2f} pts (need >= 3), "
           f"means {[round(m, 4) for m in means]}, {toy['seconds']:.0f}s for both sweeps")
    assert ok


def ratio_at_clean_fit(trace):
    for r in trace:
        if r.train_acc_clean is not None and r.train_acc_clean > 0.9:
            return r.grad_ratio
    return None


def test_c04_grad_ratio(toy, record):
    sweep_traces = toy["traces"]["sam1"]
    wins, detail = 0, []
    for s in TOY_SEEDS:
        hi, lo = ratio_at_clean_fit(sweep_traces[0.18][s]), ratio_at_clean_fit(sweep_traces[0.0][s])
        won = hi is not None and lo is not None and hi > lo
        wins += won
        detail.append(f"{lo if lo is None else round(lo, 3)}->{hi if hi is None else round(hi, 3)}")
    ok = wins >= 4
    record(4, ok, f"ratio higher at rho=0.18 in {wins}/5 seeds ({', '.join(detail)})")
    assert ok


def test_c05_nsam_null(toy, record):
    sgd = mean_best(toy["traces"]["sam1"][0.0])
    diffs = [mean_best(toy["traces"]["nsam"][rho]) - sgd for rho in TOY_RHOS]
    worst = max(abs(d) for d in diffs)
    ok = worst <= 0.01
    record(5, ok, f"max |n-SAM - SGD| = {100 * worst:.2f} pts over the rho grid")
    assert ok


# ---------------------------------------------------------------- 6-7


def test_c06_asymptotics(record):
    train, _ = sample_toy(ToyDataConfig(seed=0))
    r = O.asymptotic_sam(train, 1e4, 0.4, 2.0)
    z = abs(r.first_coord - r.first_coord_target) / r.first_coord_se
    ok = r.cosine >= 1 - 1e-6 and z <= 3
    record(6, ok, f"1 - cosine {1 - r.cosine:.1e}, first coordinate {r.first_coord:.4f} ({z:.2f} SE from 0.4)")
    assert ok


def test_c07_closed_form_accuracy(record):
    cfg = ToyDataConfig()
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(20):
        w = rng.normal(size=cfg.dim)
        w[0] = rng.normal() * 2.0  # spread the accuracies over (0, 1)
        mc = MT.monte_carlo_toy_accuracy(w, cfg, n=100_000, seed=100 + k)
        worst = max(worst, abs(mc - MT.closed_form_toy_accuracy(w, cfg)))
    ok = worst <= 0.01
    record(7, ok, f"max |closed form - Monte Carlo| = {worst:.4f} over 20 vectors")
    assert ok


# ---------------------------------------------------------------- 8-10


def family_means(runs):
    m = {label: mean_best(by_seed) for label, by_seed in runs.items()}
    reg = {k: v for k, v in m.items() if k.startswith("regsgd")}
    best_reg = max(reg, key=reg.get)
    return m, best_reg


def test_c08_desk_ranking(desk, record):
    ok, parts = desk["seconds"] < 1800, []
    for fam in FAMILIES:
        m, best_reg = family_means(desk["traces"][fam])
        reg = m[best_reg]
        order = min(m["sam1"], m["jsam"]) > reg > max(m["lsam"], m["sgd"])
        gap = m["sam1"] - m["sgd"]
        close = abs(m["sam1"] - m["jsam"])
        fam_ok = order and gap >= 0.02 and close <= 0.015
        ok &= fam_ok
        parts.append(
            f"{fam}: sam1 {m['sam1']:.4f} jsam {m['jsam']:.4f} reg[{best_reg[7:]}] {reg:.4f} "
            f"lsam {m['lsam']:.4f} sgd {m['sgd']:.4f} ({'ok' if fam_ok else 'violated'})"
        )
    record(8, ok, "; ".join(parts) + f"; {desk['seconds']:.0f}s")
    assert ok


def norms_at_best(by_seed):
    recs = [t.record_at(t.best_epoch) for t in by_seed.values()]
    return float(np.mean([r.v_norm for r in recs])), float(np.mean([r.act_norm for r in recs]))


def test_c09_norm_signature(desk, record):
    ok, parts = True, []
    for fam in FAMILIES:
        v_sam, z_sam = norms_at_best(desk["traces"][fam]["sam1"])
        v_sgd, z_sgd = norms_at_best(desk["traces"][fam]["sgd"])
        fam_ok = v_sam < v_sgd and z_sam < z_sgd
        ok &= fam_ok
        parts.append(f"{fam}: |v| {v_sam:.2f} vs {v_sgd:.2f}, |z| {z_sam:.2f} vs {z_sgd:.2f} ({'ok' if fam_ok else 'violated'})")
    record(9, ok, "SAM1 vs SGD at best epoch; " + "; ".join(parts))
    assert ok


def pre_rise_ratios(trace, num_classes=10):
    rise = 2.0 / num_classes  # noisy labels count as being memorized above twice chance
    clean, noisy = [], []
    for r in trace:
        if r.train_acc_noisy is not None and r.train_acc_noisy > rise:
            break
        if r.logit_ratio_clean is not None and r.logit_ratio_noisy is not None:
            clean.append(r.logit_ratio_clean)
            noisy.append(r.logit_ratio_noisy)
    return clean, noisy


def test_c10_logit_upweighting(desk, record):
    ok, parts = True, []
    for fam in FAMILIES:
        clean, noisy = [], []
        for trace in desk["traces"][fam]["sam1"].values():
            c, n = pre_rise_ratios(trace)
            clean += c
            noisy += n
        fam_ok = bool(clean) and np.mean(clean) > np.mean(noisy)
        ok &= fam_ok
        if clean:
            parts.append(f"{fam}: clean {np.mean(clean):.3f} vs noisy {np.mean(noisy):.3f} over {len(clean)} epochs")
        else:
            parts.append(f"{fam}: no epochs before the noisy-accuracy rise")
    record(10, ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- 11


def test_c11_reproducibility(toy, desk, tmp_path, record):
    checks = []
    cfg = replace(toy_config("sam1", tmp_path / "toy"), seeds=[0])
    cfg.optim = replace(cfg.optim, rho=0.18)
    (row,) = run(cfg)
    checks.append((toy["root"] / "sam1" / row["csv"], tmp_path / "toy" / row["csv"]))
    opt = OptimConfig("sam1", lr=0.1, rho=DESK_RHO, weight_decay=5e-4, batch_size=128)
    dcfg = replace(desk_config("mlp", opt, tmp_path / "desk"), seeds=[1])
    (row,) = run(dcfg)
    checks.append((desk["root"] / "mlp" / "sam1" / row["csv"], tmp_path / "desk" / row["csv"]))
    same = [a.read_bytes() == b.read_bytes() for a, b in checks]
    ok = all(same)
    record(11, ok, f"{sum(same)}/{len(same)} re-runs byte-identical (toy sam1 rho=0.18 seed 0, digits mlp sam1 seed 1)")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
