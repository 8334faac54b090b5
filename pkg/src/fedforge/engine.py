"""Federated round loop.

The malicious client is an object that only ever receives a copy of the
broadcast global model and its own local data; nothing server-side
(aggregator, defense state, other clients' updates) is reachable from it.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from math import ceil

import numpy as np

from .aggregation import AggregatorConfig, ClientUpdate, ServerContext, aggregate
from .analytics import RoundRecord, attack_success_rate, main_task_accuracy
from .datasets import Trigger, poison_dataset
from .dopa import DopaConfig, optimize_trigger, sgd_epochs


def stream(seed, name, *keys):
    """Independent generator for one named purpose (partition, sampling, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *(int(k) for k in keys)])


@dataclass
class FederationConfig:
    clients: int = 20
    fraction: float = 0.1
    rounds: int = 100
    attack_start: int = 30
    attack_end: int = 60
    malicious_ids: tuple = (0,)
    benign_epochs: int = 2
    malicious_epochs: int = 5
    lr: float = 0.1
    batch_size: int = 32
    poison_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.malicious_ids = tuple(int(i) for i in self.malicious_ids)
        problems = []
        if self.clients < 1:
            problems.append("clients: must be >= 1")
        if not 0 < self.fraction <= 1:
            problems.append("fraction: must be in (0, 1]")
        if self.rounds < 0:
            problems.append("rounds: must be >= 0")
        if not 0 <= self.attack_start <= self.attack_end <= self.rounds:
            problems.append("attack window: need 0 <= attack_start <= attack_end <= rounds")
        if any(not 0 <= i < self.clients for i in self.malicious_ids):
            problems.append("malicious_ids: every id must be a client id")
        if self.benign_epochs < 0 or self.malicious_epochs < 0:
            problems.append("epochs: must be >= 0")
        if self.lr < 0:
            problems.append("lr: must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if not 0 <= self.poison_fraction <= 1:
            problems.append("poison_fraction: must be in [0, 1]")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def per_round(self):
        return max(1, ceil(self.fraction * self.clients - 1e-9))

    def in_window(self, rnd):
        return self.attack_start <= rnd < self.attack_end


@dataclass
class ClientState:
    id: int
    indices: np.ndarray
    is_malicious: bool = False

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ValueError(f"client {self.id} has no data")


class AggregationError(RuntimeError):
    def __init__(self, rnd, cause):
        super().__init__(f"aggregation failed in round {rnd}: {cause}")
        self.round = rnd


def sample_clients(rnd, cfg):
    rng = stream(cfg.seed, "sampling", rnd)
    return sorted(int(i) for i in rng.choice(cfg.clients, size=cfg.per_round, replace=False))


def local_train_benign(global_model, data, epochs, lr, batch_size, rng, client_id=0):
    local = sgd_epochs(global_model, data, epochs, lr, batch_size, rng)
    return ClientUpdate(client_id, len(data), local.params - global_model.params)


def local_train_malicious(global_model, data, trig, epochs, lr, poison_fraction, batch_size, rng,
                          client_id=0, poison_seed=0):
    """Train on a poisoned copy of the local data; the update is not scaled.

    An empty-mask trigger stamps nothing, so no sample is poisoned and the
    update equals benign training with the same generator.
    """
    if poison_fraction > 0 and trig.mask.any():
        data = poison_dataset(data, trig, poison_fraction, poison_seed)
    local = sgd_epochs(global_model, data, epochs, lr, batch_size, rng)
    return ClientUpdate(client_id, len(data), local.params - global_model.params)


@dataclass
class AttackOutcome:
    update: ClientUpdate
    consensus: float = float("nan")
    eta_eff: float = float("nan")
    seconds: float = 0.0
    trace: object = None


class MaliciousClient:
    """Holds the attacker's private state: data, current trigger, settings.

    ``mode`` is ``"dopa"`` (re-optimize the trigger on every selection,
    warm-started) or ``"naive"`` (keep the initial fixed patch).
    """

    def __init__(self, client_id, data, trigger, fed, dopa=None, mode="dopa", seed=0):
        if mode not in ("dopa", "naive"):
            raise ValueError(f"attack mode must be 'dopa' or 'naive', got {mode!r}")
        self.id = client_id
        self.data = data
        self.trigger = trigger.copy()
        self.fed = fed
        self.dopa = dopa if dopa is not None else DopaConfig()
        self.mode = mode
        self.seed = seed
        self.traces = []

    def attack(self, broadcast, rnd):
        rng = stream(self.seed, "attack", self.id, rnd)
        out = AttackOutcome(update=None)
        if self.mode == "dopa":
            self.trigger, _, trace = optimize_trigger(broadcast, self.data, self.dopa, self.trigger, rng)
            self.traces.append(trace)
            out.trace = trace
            out.seconds = trace.seconds
            if trace.consensus:
                out.consensus = float(np.mean(trace.consensus))
                out.eta_eff = float(np.mean(trace.eta_eff))
        out.update = local_train_malicious(
            broadcast, self.data, self.trigger, self.fed.malicious_epochs, self.fed.lr,
            self.fed.poison_fraction, self.fed.batch_size, stream(self.fed.seed, "train", self.id, rnd),
            client_id=self.id, poison_seed=int(rng.integers(2**31)))
        return out


@dataclass
class Federation:
    """Mutable simulation state advanced one round at a time by :func:`run_round`."""

    model: object
    train: object
    test: object
    clients: list
    fed: FederationConfig
    agg: AggregatorConfig
    attackers: dict = field(default_factory=dict)  # client id -> MaliciousClient
    eval_trigger: Trigger | None = None
    validation: object = None
    root: object = None
    history: dict = field(default_factory=dict)
    round: int = 0
    records: list = field(default_factory=list)

    def client_data(self, cid):
        return self.train.subset(self.clients[cid].indices)


def server_reference(fedn, rnd):
    """FLTrust's trusted update: one local pass on the server's root split."""
    rng = stream(fedn.fed.seed, "server-root", rnd)
    trained = sgd_epochs(fedn.model, fedn.root, 1, fedn.fed.lr, fedn.fed.batch_size, rng)
    return trained.params - fedn.model.params


def run_round(fedn):
    rnd = fedn.round
    cfg = fedn.fed
    selected = sample_clients(rnd, cfg)
    updates = []
    attack = None
    for cid in selected:
        if cid in fedn.attackers and cfg.in_window(rnd):
            # the attacker sees a copy of the broadcast model and nothing else
            outcome = fedn.attackers[cid].attack(fedn.model.copy(), rnd)
            attack = attack or outcome
            updates.append(outcome.update)
        else:
            rng = stream(cfg.seed, "train", cid, rnd)
            updates.append(local_train_benign(fedn.model, fedn.client_data(cid), cfg.benign_epochs,
                                              cfg.lr, cfg.batch_size, rng, client_id=cid))

    ctx = ServerContext(global_model=fedn.model, history=fedn.history, round=rnd,
                        rng=stream(cfg.seed, "server", rnd))
    if fedn.agg.rule == "fltrust":
        ctx.reference_update = server_reference(fedn, rnd)
    if fedn.agg.rule == "zeno":
        ctx.validation = fedn.validation
    try:
        delta = aggregate(updates, fedn.agg, ctx)
    except (ValueError, ArithmeticError) as exc:
        raise AggregationError(rnd, exc) from exc
    fedn.model = fedn.model.with_params(fedn.model.params + delta)

    trig = fedn.attackers[min(fedn.attackers)].trigger if fedn.attackers else fedn.eval_trigger
    rec = RoundRecord(
        round=rnd,
        mta=main_task_accuracy(fedn.model, fedn.test),
        asr=attack_success_rate(fedn.model, fedn.test, trig) if trig is not None else float("nan"),
        update_norm=float(np.linalg.norm(delta)),
        selected=tuple(selected),
        malicious_selected=attack is not None,
        mean_C=attack.consensus if attack is not None else float("nan"),
        mean_eta_eff=attack.eta_eff if attack is not None else float("nan"),
        trig_opt_seconds=attack.seconds if attack is not None else 0.0,
    )
    if attack is not None and attack.trace is not None:
        rec.path_update_norms = list(attack.trace.path_update_norms)
    fedn.records.append(rec)
    fedn.round += 1
    return rec
