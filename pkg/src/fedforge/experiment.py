"""Experiment orchestration: build a federation from a config, run it, write results."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfgmod
from .analytics import (VarianceExperimentConfig, attack_success_rate, delta_mta, main_task_accuracy,
                        norm_distribution_report, records_from_csv, records_to_csv, variance_law_check,
                        window_mean)
from .datasets import (PartitionConfig, Trigger, dirichlet_partition, generate_synthetic,
                       load_dataset, load_trigger, save_dataset, save_trigger)
from .dopa import path_learning_rates
from .engine import ClientState, Federation, FederationConfig, MaliciousClient, run_round, stream
from .fileio import atomic_write
from .model import ModelSpec, init_model, load_checkpoint, save_checkpoint

SWEEP_AXES = {
    "K": "attack.K",
    "beta": "attack.beta",
    "lambda": "attack.lam",
    "alpha": "partition.alpha",
    "rule": "aggregator.rule",
}
ABLATIONS = ("dopa", "fedfusion", "none")


def load_data(cfg, base_dir="."):
    ds = cfg.dataset
    if ds.source == "file":
        train = load_dataset(cfgmod._resolve(ds.train_path, base_dir), split="train")
        test = load_dataset(cfgmod._resolve(ds.test_path, base_dir), split="test")
        if train.shape != test.shape or train.classes != test.classes:
            raise ValueError("train and test files disagree on image shape or class count")
        return train, test
    return generate_synthetic(ds.classes, ds.per_class, (ds.height, ds.width, ds.channels), cfg.seed,
                              noise=ds.noise, test_per_class=ds.test_per_class)


def federation_config(cfg):
    f = cfg.federation
    start, end = f.window
    return FederationConfig(
        clients=cfg.partition.clients, fraction=f.fraction, rounds=f.rounds, attack_start=start,
        attack_end=end, malicious_ids=f.malicious_ids, benign_epochs=f.benign_epochs,
        malicious_epochs=f.malicious_epochs, lr=f.lr, batch_size=f.batch_size,
        poison_fraction=f.poison_fraction, seed=cfg.seed)


def initial_trigger(cfg, shape):
    return Trigger.top_left(shape, cfg.attack.target, patch=cfgmod.patch_side(cfg), fill=cfg.attack.init_fill)


def build_federation(cfg, train, test):
    """Everything a run needs, drawn from the named streams of ``cfg.seed``."""
    seed = cfg.seed
    part_seed = int(stream(seed, "partition").integers(2**31))
    parts = dirichlet_partition(train, PartitionConfig(cfg.partition.alpha, cfg.partition.clients, part_seed))
    fed = federation_config(cfg)
    attacking = cfg.attack.enabled
    clients = [ClientState(i, p, attacking and i in fed.malicious_ids) for i, p in enumerate(parts)]
    spec = ModelSpec(cfg.model.arch, train.shape, train.classes, cfg.model.hidden)
    model = init_model(spec, stream(seed, "init"))
    trig = initial_trigger(cfg, train.shape)
    trig.check_classes(train.classes)

    attackers = {}
    if attacking:
        dopa = cfgmod.dopa_config(cfg)
        for cid in fed.malicious_ids:
            attackers[cid] = MaliciousClient(cid, train.subset(parts[cid]), trig, fed, dopa,
                                             mode=cfg.attack.mode, seed=seed)

    # server-held splits, both carved from the test set once per seed
    order = stream(seed, "server-data").permutation(len(test))
    n_val = max(1, int(round(cfg.federation.validation_fraction * len(test))))
    validation = test.subset(np.sort(order[:n_val]))
    root = test.subset(np.sort(order[:max(1, min(cfg.federation.root_size, len(test)))]))

    agg = dataclasses.replace(cfg.aggregator, seed=seed)
    return Federation(model=model, train=train, test=test, clients=clients, fed=fed, agg=agg,
                      attackers=attackers, eval_trigger=trig, validation=validation, root=root)


def simulate(cfg, train, test, progress=None):
    fedn = build_federation(cfg, train, test)
    for _ in range(fedn.fed.rounds):
        rec = run_round(fedn)
        if progress is not None:
            progress(rec)
    return fedn


def _window_stats(records, start, end):
    out = {}
    if end > start:
        out["window_mta"] = window_mean(records, "mta", start, end)
        out["window_asr"] = window_mean(records, "asr", start, end)
    last = len(records)
    if end < last:
        post_end = min(end + 10, last)
        out["post_window_asr"] = window_mean(records, "asr", end, post_end)
        out["post_window_mta"] = window_mean(records, "mta", end, post_end)
    if 0 < end <= last:
        out["window_end_asr"] = records[end - 1].asr
    return out


def summarize(cfg, fedn, benign=None):
    records = fedn.records
    start, end = cfg.federation.window
    summary = {
        "name": cfg.experiment.name,
        "seed": cfg.seed,
        "rule": cfg.aggregator.rule,
        "attack": cfg.attack.mode if cfg.attack.enabled else "none",
        "rounds": len(records),
        "window": [start, end],
        "final_mta": records[-1].mta if records else None,
        "final_asr": records[-1].asr if records else None,
        "malicious_rounds": [r.round for r in records if r.malicious_selected],
    }
    summary.update(_window_stats(records, start, end))
    if "window_end_asr" in summary and records:
        w = summary["window_end_asr"]
        summary["persistence_ratio"] = records[-1].asr / w if w > 0 else None
    if benign is not None and end > start:
        summary["delta_mta"] = delta_mta(records, benign.records, start, end)
        summary["benign_final_mta"] = benign.records[-1].mta
    try:
        summary["path_update_norms"] = norm_distribution_report(records)
    except ValueError:
        summary["path_update_norms"] = None
    dopa = cfgmod.dopa_config(cfg)
    etas = tuple(float(e) for e in path_learning_rates(dopa.eta0, dopa.beta, dopa.K))
    summary["variance_law"] = variance_law_check(VarianceExperimentConfig(etas=etas, seed=cfg.seed))
    attacked = [r for r in records if r.malicious_selected and r.mean_C == r.mean_C]
    if attacked:
        summary["mean_C"] = float(np.mean([r.mean_C for r in attacked]))
        summary["mean_eta_eff"] = float(np.mean([r.mean_eta_eff for r in attacked]))
    if cfg.outputs.timing:
        secs = [r.trig_opt_seconds for r in records if r.malicious_selected]
        summary["trig_opt_seconds_mean"] = float(np.mean(secs)) if secs else None
    return summary


def _write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def run_experiment(cfg, out_dir=None, base_dir=".", progress=None):
    """Run one configured experiment and write its files; returns the summary."""
    out_dir = out_dir or cfg.outputs.dir
    os.makedirs(out_dir, exist_ok=True)
    train, test = load_data(cfg, base_dir)
    fedn = simulate(cfg, train, test, progress)
    atomic_write(os.path.join(out_dir, "rounds.csv"),
                 records_to_csv(fedn.records, timing=cfg.outputs.timing).encode())
    benign = None
    if cfg.attack.enabled and cfg.outputs.benign_baseline:
        benign = simulate(cfg.replace(**{"attack.enabled": False}), train, test)
        atomic_write(os.path.join(out_dir, "benign_rounds.csv"),
                     records_to_csv(benign.records, timing=cfg.outputs.timing).encode())
    summary = summarize(cfg, fedn, benign)
    if cfg.outputs.checkpoint:
        save_checkpoint(fedn.model, os.path.join(out_dir, "model.ckpt"))
    if cfg.outputs.trigger:
        trig = fedn.attackers[min(fedn.attackers)].trigger if fedn.attackers else fedn.eval_trigger
        save_trigger(trig, os.path.join(out_dir, "trigger.fftrig"))
    atomic_write(os.path.join(out_dir, "config.cfg"), cfgmod.render(cfg).encode())
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def thread_cap():
    raw = os.environ.get("FEDFORGE_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"FEDFORGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"FEDFORGE_THREADS must be a positive integer, got {raw!r}")
    return n


def _coerce(axis, value):
    if axis == "rule":
        return str(value)
    if axis == "K":
        return int(value)
    return float(value)


def _sweep_job(args):
    cfg, out_dir, base_dir = args
    return run_experiment(cfg, out_dir, base_dir)


def sweep(cfg, axis, values, out_dir, base_dir="."):
    """One run per value with a shared seed; writes per-value dirs plus comparison files.

    Values whose configuration is invalid (for example Krum with too few
    sampled clients) are recorded with their validation message instead of
    aborting the sweep.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    os.makedirs(out_dir, exist_ok=True)
    labels, jobs, status = [], [], {}
    for raw in values:
        value = _coerce(axis, raw)
        label = f"{axis}={value}"
        if label in labels:
            raise ValueError(f"duplicate sweep value {value!r}")
        labels.append(label)
        try:
            vcfg = cfg.replace(**{SWEEP_AXES[axis]: value})
            vcfg = cfgmod.parse_text(cfgmod.render(vcfg), base_dir)
        except ValueError as exc:
            status[label] = "invalid: " + " | ".join(getattr(exc, "problems", [str(exc)]))
            continue
        jobs.append((label, (vcfg, os.path.join(out_dir, label), base_dir)))

    workers = min(thread_cap(), len(jobs)) if jobs else 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, [j for _, j in jobs]))
    else:
        results = [_sweep_job(j) for _, j in jobs]
    summaries = dict(zip([label for label, _ in jobs], results))
    for label in summaries:
        status[label] = "ok"

    columns = ["round"]
    curves = {}
    for label in labels:
        if label in summaries:
            with open(os.path.join(out_dir, label, "rounds.csv"), encoding="utf-8") as fh:
                curves[label] = records_from_csv(fh.read())
            columns += [f"asr[{label}]", f"mta[{label}]"]
    n_rounds = max((len(c) for c in curves.values()), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rnd in range(n_rounds):
        row = [rnd]
        for label in labels:
            if label in curves:
                rec = curves[label][rnd]
                row += [repr(rec.asr), repr(rec.mta)]
        w.writerow(row)
    atomic_write(os.path.join(out_dir, "comparison.csv"), buf.getvalue().encode())

    keys = ("post_window_asr", "window_end_asr", "final_asr", "final_mta", "delta_mta")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("value", "status") + keys)
    for label in labels:
        s = summaries.get(label, {})
        w.writerow([label, status[label]] + ["" if s.get(k) is None else repr(float(s[k])) for k in keys])
    atomic_write(os.path.join(out_dir, "summary.csv"), buf.getvalue().encode())
    return {label: {"status": status[label], "summary": summaries.get(label)} for label in labels}


def ablated_config(cfg, drop):
    if drop == "dopa":
        return cfg.replace(**{"attack.mode": "naive", "attack.init_fill": 0.5})
    if drop == "fedfusion":
        return cfg.replace(**{"fusion.weight": 0.0})
    if drop == "none":
        return cfg.replace()
    raise ValueError(f"unknown ablation {drop!r}; expected one of {', '.join(ABLATIONS)}")


def ablate(cfg, drop, out_dir, base_dir="."):
    """Run the ablated method next to the full one; ``drop="none"`` is a plain run."""
    if drop == "none":
        return {"full": run_experiment(cfg, out_dir, base_dir)}
    variant = ablated_config(cfg, drop)
    full = run_experiment(cfg, os.path.join(out_dir, "full"), base_dir)
    ablated = run_experiment(variant, os.path.join(out_dir, f"drop-{drop}"), base_dir)
    report = {"drop": drop, "full": full, "ablated": ablated}
    _write_json(os.path.join(out_dir, "ablation.json"), report)
    return report


def transfer_eval(trigger_path, checkpoint_path, dataset_path):
    """ASR of a saved trigger against a saved model on a saved dataset; no training."""
    trig = load_trigger(trigger_path)
    model = load_checkpoint(checkpoint_path)
    data = load_dataset(dataset_path)
    if data.shape != model.spec.input_shape:
        raise ValueError(f"dataset images {data.shape} do not match the model input {model.spec.input_shape}")
    if trig.pattern.shape != data.shape:
        raise ValueError(f"trigger shape {trig.pattern.shape} does not match the images {data.shape}")
    trig.check_classes(data.classes)
    return {"asr": attack_success_rate(model, data, trig), "mta": main_task_accuracy(model, data),
            "samples": len(data), "target": trig.target}


def gen_data(cfg, out_dir):
    ds = cfg.dataset
    if ds.source != "synthetic":
        raise ValueError("gen-data needs dataset.source = synthetic")
    train, test = load_data(cfg)
    os.makedirs(out_dir, exist_ok=True)
    paths = {"train": os.path.join(out_dir, "train.ffdata"), "test": os.path.join(out_dir, "test.ffdata")}
    save_dataset(train, paths["train"])
    save_dataset(test, paths["test"])
    return paths
