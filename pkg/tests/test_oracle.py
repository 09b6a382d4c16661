import numpy as np
import pytest

from samnoise import models as M
from samnoise import oracle as O
from samnoise.synthdata import ToyDataConfig, sample_toy


@pytest.mark.parametrize("family", ["linear", "dln2", "mlp", "mlp-identity"])
def test_fd_check_passes(family):
    assert O.fd_gradient_check(family, 30, 1e-5).passed


def test_mutation_is_caught():
    def flipped(model, x, t):
        return tuple(-g for g in M.grad_decomp(model, x, t).grad)

    report = O.fd_gradient_check("dln2", 10, 1e-5, grad_fn=flipped)
    assert not report.passed
    assert report.max_rel_err > 1.0


def test_kink_detection():
    model = M.MLPModel(np.array([[1.0, 0.0]]), np.ones((2, 1)))
    assert O.at_relu_kink(model, np.array([1e-6, 3.0]))
    assert not O.at_relu_kink(model, np.array([0.5, 3.0]))


def test_jsam_identity():
    assert O.jsam_identity_check(200).passed


def test_upweight_factor_values():
    assert O.upweight_factor(0.0, 1.0) == pytest.approx(1.4621171572600098)
    assert O.upweight_factor(1.0, 1.0) == pytest.approx(1.8591409142295225)
    assert O.upweight_factor(1000.0, 2.0) == pytest.approx(np.exp(2.0))
    assert np.isfinite(O.upweight_factor(-1000.0, 2.0))


def test_reweighting_check():
    report = O.reweighting_monotonicity_check()
    assert report.passed and report.n == 4


def test_reweighting_check_detects_negative_c():
    assert not O.reweighting_monotonicity_check(Cs=(-1.0,)).passed


def test_asymptotics():
    train, _ = sample_toy(ToyDataConfig(seed=1))
    r = O.asymptotic_sam(train, 1e4, 0.4, 2.0)
    assert r.cosine >= 1 - 1e-6
    assert r.max_ratio_dev <= 1e-3
    assert abs(r.first_coord - 0.4) <= 3 * r.first_coord_se


def test_ridge_limit():
    assert O.ridge_limit_check().passed


@pytest.mark.parametrize("family", ["linear", "dln2", "mlp", "mlp-identity"])
def test_collapse(family):
    assert O.collapse_check(family).passed


def test_run_all_and_json(tmp_path):
    reports = O.run_all(0)
    assert all(r.passed for r in reports), O.format_table(reports)
    O.write_json(reports, tmp_path / "o.json")
    import json

    data = json.loads((tmp_path / "o.json").read_text())
    assert {"name", "max_rel_err", "tol", "pass", "n"} <= set(data[0])
