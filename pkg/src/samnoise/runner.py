"""Experiment configuration, training loop, sweeps and result files."""

from __future__ import annotations

import copy
import json
import os
import statistics
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from samnoise import metrics as MT
from samnoise import models as M
from samnoise import synthdata as SD
from samnoise.errors import DegenerateGradient, EmptyStratum, NonFiniteLoss
from samnoise.optim import OptimConfig, Rule, step


@dataclass
class DataSpec:
    """Where training data comes from.

    kind: "toy" (Gaussian toy distribution), "digits" (sklearn's bundled
    8x8 digits), "idx", "cifar" or "snld" (files). File kinds read
    ``path`` / ``test_path`` (plus ``labels_path`` / ``test_labels_path``
    for IDX).
    """

    kind: str = "toy"
    noise_rate: float = 0.4
    signal_B: float = 2.0
    gamma: float = 1.0
    dim: int = 1000
    n_train: int = 500
    n_test: int = 1000
    path: Optional[str] = None
    labels_path: Optional[str] = None
    test_path: Optional[str] = None
    test_labels_path: Optional[str] = None
    normalize: bool = True

    def toy_config(self, seed) -> SD.ToyDataConfig:
        return SD.ToyDataConfig(self.signal_B, self.gamma, self.dim, self.noise_rate, self.n_train, self.n_test, seed)


@dataclass
class ModelSpec:
    family: str = "linear"
    width: int = 500
    init_std: Union[float, str] = 0.01


@dataclass
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 100
    eval_every: int = 1
    seeds: List[int] = field(default_factory=lambda: [0])
    probe_size: int = 1000
    out: str = "runs"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d)
        data = DataSpec(**d.pop("data", {}))
        model = ModelSpec(**d.pop("model", {}))
        optim = OptimConfig(**d.pop("optim", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(data=data, model=model, optim=optim, **d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        d = asdict(self)
        d["optim"]["rule"] = self.optim.rule.value
        return d


# ---------------------------------------------------------------- data


def load_data(spec: DataSpec, seed):
    """(train, test, toy_config or None) for one seed; train labels corrupted."""
    if spec.kind == "toy":
        cfg = spec.toy_config(seed)
        train, test = SD.sample_toy(cfg)
        return train, test, cfg
    corrupt_seed = np.random.SeedSequence([seed, 1])
    if spec.kind == "digits":
        train, test = SD.load_digits_dataset(normalize=spec.normalize)
    elif spec.kind == "idx":
        train = SD.load_idx(spec.path, spec.labels_path)
        test = SD.load_idx(spec.test_path, spec.test_labels_path)
    elif spec.kind == "cifar":
        train = SD.load_cifar_binary(spec.path, spec.normalize)
        test = SD.load_cifar_binary(spec.test_path, spec.normalize)
    elif spec.kind == "snld":
        train = SD.load_dataset(spec.path)
        test = SD.load_dataset(spec.test_path)
        # file already carries its corruption
        return train, test, None
    else:
        raise ValueError(f"unknown data kind {spec.kind!r}")
    return SD.with_label_noise(train, spec.noise_rate, corrupt_seed), test, None


# ---------------------------------------------------------------- training


def _seed_streams(seed):
    init, shuffle, probe = np.random.SeedSequence([seed, 2]).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(shuffle), np.random.default_rng(probe)


def evaluate(model, train, test, probe_idx, config: ExperimentConfig, toy_cfg, epoch, seed) -> MT.EpochRecord:
    opt = config.optim
    rec = MT.EpochRecord(epoch, opt.rule.value, opt.rho, opt.lr, seed)
    rec.test_acc = MT.accuracy(model, test)
    if toy_cfg is not None and isinstance(model, M.LinearModel):
        try:
            rec.closed_form_acc = MT.closed_form_toy_accuracy(model.w, toy_cfg)
        except MT.UndefinedAccuracy:
            pass
    probe = train.subset(probe_idx)
    try:
        st = MT.stratified_stats(model, train)
        rec.train_acc_clean = st.clean.accuracy
        rec.train_acc_noisy = st.noisy.accuracy
        rec.train_loss_clean = st.clean.loss
        rec.train_loss_noisy = st.noisy.loss
        rec.acc_gap = st.acc_gap
    except EmptyStratum:
        rec.train_acc_clean = MT.accuracy(model, train, observed=True)
    try:
        gz = opt.gamma_z if opt.rule is Rule.REGSGD else 0.0
        rec.grad_ratio = MT.grad_norm_ratio(model, probe, opt.rule, opt.rho, gz)
    except EmptyStratum:
        pass
    rho = opt.rho if opt.rule is not Rule.REGSGD else 0.0
    try:
        ratios = MT.logit_upweight_ratios(model, probe.inputs, probe.observed_targets, rho)
        if probe.clean_mask.any():
            rec.logit_ratio_clean = float(ratios[probe.clean_mask].mean())
        if (~probe.clean_mask).any():
            rec.logit_ratio_noisy = float(ratios[~probe.clean_mask].mean())
    except DegenerateGradient:
        pass
    if not isinstance(model, M.LinearModel):
        z = M.hidden_activation(model, probe.inputs)
        rec.act_norm = float(np.sqrt(np.einsum("ij,ij->i", z, z)).mean())
        rec.v_norm = float(np.linalg.norm(M.last_layer(model)))
    return rec


def train(config: ExperimentConfig, seed: int, data=None):
    """Train one model; returns (MetricTrace, final model)."""
    train_set, test_set, toy_cfg = data if data is not None else load_data(config.data, seed)
    init_rng, shuffle_rng, probe_rng = _seed_streams(seed)
    ms = config.model
    model = M.init_model(ms.family, train_set.dim, ms.width, train_set.num_classes, ms.init_std, init_rng)
    n = len(train_set)
    if config.probe_size and config.probe_size < n:
        probe_idx = np.sort(probe_rng.choice(n, size=config.probe_size, replace=False))
    else:
        probe_idx = np.arange(n)
    X, T = train_set.inputs, train_set.observed_targets
    bs = config.optim.batch_size or n
    xx = np.einsum("ij,ij->i", X, X)
    trace = MT.MetricTrace()
    for epoch in range(1, config.epochs + 1):
        if bs >= n:
            model = step(model, X, T, config.optim, xx)
        else:
            order = shuffle_rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                model = step(model, X[idx], T[idx], config.optim, xx[idx])
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            rec = evaluate(model, train_set, test_set, probe_idx, config, toy_cfg, epoch, seed)
            losses = [v for v in (rec.train_loss_clean, rec.train_loss_noisy) if v is not None]
            if not all(np.isfinite(p).all() for p in model.params()) or not all(map(np.isfinite, losses)):
                raise NonFiniteLoss(epoch, losses)
            trace.append(rec)
    return trace, model


# ---------------------------------------------------------------- files


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_name(optim: OptimConfig, seed) -> str:
    name = f"{optim.rule.value}_rho{optim.rho:g}"
    if optim.rule is Rule.REGSGD:
        name += f"_gz{optim.gamma_z:g}_gv{optim.gamma_v:g}"
    return f"{name}_seed{seed}"


def _run_one(args):
    config, seed = args
    trace, _ = train(config, seed)
    name = run_name(config.optim, seed)
    out = Path(config.out)
    try:
        atomic_write(out / f"{name}.csv", trace.to_csv())
    except OSError as exc:
        raise OSError(f"cannot write {out / (name + '.csv')}: {exc}") from exc
    o = config.optim
    return {
        "name": name,
        "rule": o.rule.value,
        "rho": o.rho,
        "gamma_z": o.gamma_z,
        "gamma_v": o.gamma_v,
        "seed": seed,
        "best_test_acc": trace.best_test_acc,
        "best_epoch": trace.best_epoch,
        "csv": f"{name}.csv",
    }


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("SNL_THREADS", "1")))
    except ValueError:
        return 1


def _map(jobs):
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_run_one, jobs))


def run(config: ExperimentConfig):
    """Train every seed, write one CSV per run and summary.json."""
    results = _map([(config, s) for s in config.seeds])
    summary = {"config": config.to_dict(), "runs": results}
    atomic_write(Path(config.out) / "summary.json", json.dumps(summary, indent=2) + "\n")
    return results


def sweep(config: ExperimentConfig, rho_grid=None, gamma_grid=None):
    """One run per grid point and seed; returns rows of the summary table.

    ``gamma_grid`` holds (gamma_z, gamma_v) pairs and forces the REGSGD rule.
    """
    if (rho_grid is None) == (gamma_grid is None):
        raise ValueError("give exactly one of rho_grid / gamma_grid")
    grid = list(rho_grid if rho_grid is not None else gamma_grid)
    if not grid:
        raise ValueError("grid is empty")
    points = []
    for value in grid:
        if rho_grid is not None:
            opt = replace(config.optim, rho=float(value))
        else:
            gz, gv = value
            opt = replace(config.optim, rule=Rule.REGSGD, gamma_z=float(gz), gamma_v=float(gv))
        points.append((value, replace(copy.deepcopy(config), optim=opt)))
    jobs = [(cfg, s) for _, cfg in points for s in config.seeds]
    results = _map(jobs)
    rows = []
    k = len(config.seeds)
    for i, (value, _) in enumerate(points):
        accs = [r["best_test_acc"] for r in results[i * k : (i + 1) * k]]
        rows.append(
            {
                "value": value,
                "mean_best_test_acc": statistics.fmean(accs),
                "std_best_test_acc": statistics.pstdev(accs) if len(accs) > 1 else 0.0,
                "n_seeds": len(accs),
            }
        )
    out = Path(config.out)
    header = "rho" if rho_grid is not None else "gamma_z,gamma_v"
    lines = [f"{header},mean_best_test_acc,std_best_test_acc,n_seeds"]
    for r in rows:
        v = r["value"]
        key = f"{v:g}" if rho_grid is not None else f"{v[0]:g},{v[1]:g}"
        lines.append(f"{key},{r['mean_best_test_acc']!r},{r['std_best_test_acc']!r},{r['n_seeds']}")
    atomic_write(out / "sweep.csv", "\n".join(lines) + "\n")
    summary = {"config": config.to_dict(), "runs": results, "sweep": rows}
    atomic_write(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    return rows
