"""Measurement: accuracy/backdoor rates, per-round records, variance studies."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .datasets import apply_trigger
from .model import predict

CSV_COLUMNS = ("round", "mta", "asr", "update_norm", "malicious_selected", "mean_C",
               "mean_eta_eff", "trig_opt_seconds")


@dataclass
class RoundRecord:
    round: int
    mta: float
    asr: float
    update_norm: float
    selected: tuple = ()
    malicious_selected: bool = False
    mean_C: float = float("nan")
    mean_eta_eff: float = float("nan")
    trig_opt_seconds: float = 0.0
    path_update_norms: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        for name in ("mta", "asr"):
            v = getattr(self, name)
            if not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be a rate in [0, 1], got {v}")


def attack_success_rate(model, test, trig):
    """Share of non-target test samples sent to the target once triggered."""
    keep = test.labels != trig.target
    if not keep.any():
        return 0.0
    pred = predict(model, apply_trigger(test.images[keep], trig))
    return float(np.mean(pred == trig.target))


def main_task_accuracy(model, test):
    if len(test) == 0:
        return 0.0
    return float(np.mean(predict(model, test.images) == test.labels))


def window_mean(records, field_name, start, end):
    vals = [getattr(r, field_name) for r in records if start <= r.round < end]
    if not vals:
        raise ValueError(f"no records in rounds [{start}, {end})")
    return float(np.mean(vals))


def delta_mta(attacked, benign, start=None, end=None):
    """Attacked minus benign window-mean MTA, in percentage points."""
    if start is None:
        start = min(r.round for r in attacked)
    if end is None:
        end = max(r.round for r in attacked) + 1
    return 100.0 * (window_mean(attacked, "mta", start, end) - window_mean(benign, "mta", start, end))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v != v:
        return ""
    return repr(float(v))


def records_to_csv(records, timing=True):
    """Per-round CSV text; with ``timing=False`` the seconds column is left blank."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(r.round), _fmt(r.mta), _fmt(r.asr), _fmt(r.update_norm),
                    _fmt(bool(r.malicious_selected)), _fmt(r.mean_C), _fmt(r.mean_eta_eff),
                    _fmt(r.trig_opt_seconds) if timing else ""])
    return buf.getvalue()


def records_from_csv(text):
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        num = lambda k: float(row[k]) if row[k] != "" else float("nan")
        out.append(RoundRecord(
            round=int(row["round"]), mta=num("mta"), asr=num("asr"), update_norm=num("update_norm"),
            malicious_selected=row["malicious_selected"] == "1", mean_C=num("mean_C"),
            mean_eta_eff=num("mean_eta_eff"),
            trig_opt_seconds=num("trig_opt_seconds") if row["trig_opt_seconds"] else 0.0))
    return out


@dataclass
class VarianceExperimentConfig:
    etas: tuple = (0.05, 0.1, 0.15, 0.2)
    sigma: float = 0.1
    trials: int = 10_000
    dim: int = 4
    gamma: tuple = (1.0, 2.0, 4.0)
    alpha: tuple = (0.1, 0.9)
    seed: int = 0

    def __post_init__(self):
        if self.trials < 100:
            raise ValueError("variance experiments need at least 100 trials")
        if len(self.etas) < 1 or min(self.etas) <= 0:
            raise ValueError("etas must be a non-empty list of positive rates")
        if self.sigma < 0 or self.dim < 1:
            raise ValueError("sigma must be >= 0 and dim >= 1")

    @property
    def K(self):
        return len(self.etas)


def variance_law_check(cfg):
    """Monte-Carlo check of Var(mean update) = (1/K^2) sum eta_k^2 sigma^2.

    Each of K clients reports -eta_k (g + noise) with isotropic Gaussian
    noise around a fixed true gradient g.
    """
    rng = np.random.default_rng([cfg.seed, 0xA11])
    etas = np.asarray(cfg.etas, dtype=np.float64)
    K = etas.size
    g = rng.standard_normal(cfg.dim)
    predicted = float(np.sum(etas ** 2) * cfg.sigma ** 2 / K ** 2)
    total = np.zeros((cfg.trials, cfg.dim))
    for eta in etas:
        total -= eta * (g + cfg.sigma * rng.standard_normal((cfg.trials, cfg.dim)))
    mean_update = total / K
    # shifting by one draw leaves the variance unchanged and makes identical draws give exactly 0
    empirical = (mean_update - mean_update[0]).var(axis=0, ddof=1)
    if predicted > 0:
        rel = np.abs(empirical - predicted) / predicted
    else:
        rel = np.where(empirical == 0, 0.0, np.inf)
    return {
        "K": K,
        "trials": cfg.trials,
        "predicted": predicted,
        "empirical": [float(v) for v in empirical],
        "empirical_mean": float(empirical.mean()),
        "max_rel_error": float(rel.max()),
    }


def _update_variances(model, train, parts, lr, epochs, batch_size, seed):
    """Per-client spread: mean squared deviation of each update from the round's mean update."""
    from .engine import local_train_benign, stream

    deltas = np.stack([
        local_train_benign(model, train.subset(idx), epochs, lr, batch_size,
                           stream(seed, "train", cid, 0), client_id=cid).delta
        for cid, idx in enumerate(parts)])
    return ((deltas - deltas.mean(axis=0)) ** 2).mean(axis=1)


def _rank_corr(xs, ys):
    if len(set(xs)) < 2:
        return None
    rho = spearmanr(xs, ys).statistic
    return None if rho != rho else float(rho)


def heterogeneity_sweep(model, train, gamma, alpha, seed, clients=20, base_lr=0.05, epochs=2,
                        batch_size=32, base_alpha=0.9):
    """One all-clients benign round per grid point; per-client update spread.

    The gamma axis scales the learning rate at ``base_alpha``; the alpha axis
    repartitions the data at ``base_lr``.
    """
    from .datasets import PartitionConfig, dirichlet_partition
    from .engine import stream

    part_seed = int(stream(seed, "partition").integers(2**31))
    base_parts = dirichlet_partition(train, PartitionConfig(base_alpha, clients, part_seed))
    by_gamma = {}
    for gm in gamma:
        v = _update_variances(model, train, base_parts, gm * base_lr, epochs, batch_size, seed)
        by_gamma[float(gm)] = v
    by_alpha = {}
    for a in alpha:
        parts = dirichlet_partition(train, PartitionConfig(a, clients, part_seed))
        by_alpha[float(a)] = _update_variances(model, train, parts, base_lr, epochs, batch_size, seed)

    def summarize(d):
        return {str(k): {"median": float(np.median(v)), "p25": float(np.percentile(v, 25)),
                         "p75": float(np.percentile(v, 75))} for k, v in d.items()}

    g_keys = list(by_gamma)
    a_keys = list(by_alpha)
    rho_g = _rank_corr(g_keys, [np.median(by_gamma[k]) for k in g_keys])
    rho_a = _rank_corr(a_keys, [np.median(by_alpha[k]) for k in a_keys])
    report = {
        "gamma": summarize(by_gamma),
        "alpha": summarize(by_alpha),
        "spearman_gamma": rho_g,
        "spearman_alpha": rho_a,
        "flags": [],
    }
    if rho_g is None:
        report["flags"].append("insufficient gamma grid")
    if rho_a is None:
        report["flags"].append("insufficient alpha grid")
    return report


def norm_distribution_report(norms):
    """p50 / p95 / max of a collection of update norms.

    Accepts a flat sequence of norms or a list of RoundRecords (their
    ``path_update_norms`` are pooled).
    """
    values = []
    for item in norms:
        if isinstance(item, RoundRecord):
            values.extend(item.path_update_norms)
        else:
            values.append(float(item))
    if not values:
        raise ValueError("no update norms to summarize")
    v = np.asarray(values)
    return {"count": int(v.size), "p50": float(np.percentile(v, 50)),
            "p95": float(np.percentile(v, 95)), "max": float(v.max())}
