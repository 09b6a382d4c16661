"""Per-epoch training diagnostics and the closed-form toy accuracy."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from typing import List, Optional

import numpy as np

from samnoise import models as M
from samnoise.errors import DegenerateGradient, EmptyStratum, UndefinedAccuracy
from samnoise.optim import Rule, rule_terms

CSV_COLUMNS = (
    "epoch",
    "rule",
    "rho",
    "lr",
    "seed",
    "train_acc_clean",
    "train_acc_noisy",
    "train_loss_clean",
    "train_loss_noisy",
    "test_acc",
    "best_test_acc",
    "closed_form_acc",
    "grad_ratio",
    "logit_ratio_clean",
    "logit_ratio_noisy",
    "act_norm",
    "v_norm",
    "acc_gap",
)


def std_normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def closed_form_toy_accuracy(w, config) -> float:
    """Expected noiseless test accuracy of a linear classifier on the toy data.

    Only the ratio of the signal weight to the norm of the remaining weights
    matters: acc = Phi(B sqrt(d-1) w_1 / (gamma ||w_rest||)).
    """
    w = np.asarray(w, dtype=np.float64)
    w1 = float(w[0])
    rest = float(np.linalg.norm(w[1:]))
    if w1 == 0.0 and rest == 0.0:
        raise UndefinedAccuracy("accuracy of the zero classifier is undefined")
    if rest == 0.0 or config.gamma == 0.0:
        if w1 == 0.0:
            # every prediction sits on the boundary and resolves to +1
            return 0.5
        return 1.0 if w1 * config.signal_B > 0 else 0.0
    arg = config.signal_B * math.sqrt(config.dim - 1) * w1 / (config.gamma * rest)
    return std_normal_cdf(arg)


def monte_carlo_toy_accuracy(w, config, n=100_000, seed=0, chunk=10_000) -> float:
    """Accuracy on ``n`` fresh noiseless toy samples, drawn in chunks."""
    w = np.asarray(w, dtype=np.float64)
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        y = np.where(rng.random(m) < 0.5, -1, 1)
        noise = rng.normal(0.0, config.noise_std, size=(m, config.dim - 1))
        f = y * (config.signal_B * w[0] + noise @ w[1:])
        pred = np.where(f >= 0, 1, -1)
        hits += int(np.sum(pred == y))
    return hits / n


def accuracy(model, dataset, observed=False) -> float:
    if len(dataset) == 0:
        raise EmptyStratum("accuracy of an empty dataset")
    target = dataset.observed_targets if observed else dataset.true_targets
    return float(np.mean(M.predict(model, dataset.inputs) == target))


@dataclass
class StratumStats:
    loss: float
    accuracy: float
    logit_scale_norm: float
    n: int


@dataclass
class StratifiedStats:
    clean: StratumStats
    noisy: StratumStats

    @property
    def acc_gap(self) -> float:
        return self.clean.accuracy - self.noisy.accuracy


def _strata(dataset):
    if len(dataset) == 0:
        raise EmptyStratum("dataset is empty")
    clean = np.flatnonzero(dataset.clean_mask)
    noisy = np.flatnonzero(~dataset.clean_mask)
    if clean.size == 0:
        raise EmptyStratum("no clean examples")
    if noisy.size == 0:
        raise EmptyStratum("no noisy examples")
    return clean, noisy


def stratified_stats(model, dataset) -> StratifiedStats:
    """Loss, accuracy and mean logit-scale norm on clean and noisy examples.

    Accuracy is measured against the observed labels, so noisy accuracy
    counts memorized wrong labels.
    """
    clean, noisy = _strata(dataset)
    X, T = dataset.inputs, dataset.observed_targets
    terms = rule_terms(model, X, T, Rule.SGD)
    loss = M.per_example_loss(model, X, T)
    hit = M.predict(model, X) == T
    scale = terms.scale_before

    def stratum(idx):
        return StratumStats(float(loss[idx].mean()), float(hit[idx].mean()), float(scale[idx].mean()), idx.size)

    return StratifiedStats(stratum(clean), stratum(noisy))


def grad_norm_ratio(model, dataset, rule, rho=0.0, gamma_z=0.0) -> float:
    """Mean per-example update norm on clean examples over that on noisy ones."""
    clean, noisy = _strata(dataset)
    norms = rule_terms(model, dataset.inputs, dataset.observed_targets, rule, rho, gamma_z).update_norms
    return float(norms[clean].mean() / norms[noisy].mean())


def logit_upweight_ratios(model, X, T, rho) -> np.ndarray:
    """||logit scale after the 1-SAM perturbation|| / ||before||, per example."""
    terms = rule_terms(model, np.atleast_2d(X), np.atleast_1d(T), Rule.SAM1, rho)
    before = terms.scale_before
    if np.any(before <= M.DEGENERATE_NORM):
        raise DegenerateGradient("logit scale vanishes; upweight ratio undefined")
    return terms.scale_after / before


def logit_upweight_ratio(model, x, t, rho) -> float:
    return float(logit_upweight_ratios(model, np.asarray(x)[None, :], np.asarray([t]), rho)[0])


def loss_bounds_for_logit_bound(C, num_classes=2):
    """Per-example loss range when every logit has magnitude at most C."""
    k = num_classes - 1
    return math.log1p(k * math.exp(-C)), math.log1p(k * math.exp(C))


@dataclass
class EpochRecord:
    epoch: int
    rule: str
    rho: float
    lr: float
    seed: int
    train_acc_clean: Optional[float] = None
    train_acc_noisy: Optional[float] = None
    train_loss_clean: Optional[float] = None
    train_loss_noisy: Optional[float] = None
    test_acc: Optional[float] = None
    best_test_acc: Optional[float] = None
    closed_form_acc: Optional[float] = None
    grad_ratio: Optional[float] = None
    logit_ratio_clean: Optional[float] = None
    logit_ratio_noisy: Optional[float] = None
    act_norm: Optional[float] = None
    v_norm: Optional[float] = None
    acc_gap: Optional[float] = None


assert tuple(f.name for f in fields(EpochRecord)) == CSV_COLUMNS


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricTrace:
    def __init__(self, records: Optional[List[EpochRecord]] = None):
        self.records: List[EpochRecord] = []
        for r in records or []:
            self.append(r)

    def append(self, record: EpochRecord) -> None:
        prev = self.records[-1].best_test_acc if self.records else None
        if record.test_acc is not None:
            record.best_test_acc = record.test_acc if prev is None else max(prev, record.test_acc)
        else:
            record.best_test_acc = prev
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)

    @property
    def best_test_acc(self) -> Optional[float]:
        return self.records[-1].best_test_acc if self.records else None

    @property
    def best_epoch(self) -> Optional[int]:
        acc = self.column("test_acc")
        if not len(acc) or np.all(np.isnan(acc)):
            return None
        return self.records[int(np.nanargmax(acc))].epoch

    def record_at(self, epoch) -> EpochRecord:
        for r in self.records:
            if r.epoch == epoch:
                return r
        raise KeyError(epoch)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricTrace":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError("unexpected CSV header")
        out = cls()
        for row in reader:
            kw = {}
            for f in fields(EpochRecord):
                raw = row[f.name]
                if f.name in ("epoch", "seed"):
                    kw[f.name] = int(raw)
                elif f.name == "rule":
                    kw[f.name] = raw
                else:
                    kw[f.name] = float(raw) if raw != "" else None
            out.records.append(EpochRecord(**kw))
        return out
