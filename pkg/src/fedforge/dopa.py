"""Divergent-path trigger optimization with gradient consensus.

The attacker fine-tunes K replicas of the broadcast model on different
slices of its own data with spread-out learning rates, then descends the
trigger pattern along a success-weighted blend of the per-replica trigger
gradients.  The step grows with how well those gradients agree.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError
from .datasets import apply_trigger, poison_dataset
from .model import loss_and_grads, predict, sgd_step


@dataclass
class FusionConfig:
    enabled: bool = True
    weight: float = 0.1
    mu_target: float = 0.5
    sigma_target: float = 0.288
    c_budget: float = 1.0
    mode: str = "simultaneous"  # or "pre": shape the pattern before the consensus loop
    pre_steps: int = 50

    def __post_init__(self):
        if self.mode not in ("simultaneous", "pre"):
            raise ValueError(f"fusion mode must be 'simultaneous' or 'pre', got {self.mode!r}")
        if self.weight < 0 or self.c_budget < 0 or self.pre_steps < 0:
            raise ValueError("fusion weight, c_budget and pre_steps must be >= 0")


@dataclass
class DopaConfig:
    K: int = 3
    eta0: float = 0.1
    beta: float = 0.2
    eta_delta: float = 0.5
    lam: float = 1.0
    e_sim: int = 1
    e_delta: int = 50
    path_fraction: float = 0.5
    sub_fraction: float = 0.25
    batch_size: int = 32
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        problems = []
        if self.K < 2:
            problems.append("K: need at least 2 reference paths")
        if not 0 <= self.beta < 1:
            problems.append("beta: must be in [0, 1)")
        if not self.eta0 > 0:
            problems.append("eta0: must be > 0")
        if not self.eta_delta > 0:
            problems.append("eta_delta: must be > 0")
        if self.lam < 0:
            problems.append("lam: must be >= 0")
        if self.e_sim < 0 or self.e_delta < 0:
            problems.append("e_sim/e_delta: must be >= 0")
        if not (0 < self.path_fraction <= 1 and 0 < self.sub_fraction <= 1):
            problems.append("path_fraction/sub_fraction: must be in (0, 1]")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class ReferencePath:
    model: object
    lr: float
    indices: np.ndarray


def path_learning_rates(eta0, beta, K):
    """Evenly spaced rates over [eta0 (1 - beta), eta0 (1 + beta)]."""
    if K == 1:
        return np.array([eta0])
    k = np.arange(K)
    return eta0 * (1.0 - beta + 2.0 * beta * k / (K - 1))


def sgd_epochs(model, data, epochs, lr, batch_size, rng, step_norms=None):
    """Plain minibatch SGD; returns the trained copy."""
    if epochs == 0 or lr == 0 or len(data) == 0:
        return model.copy()
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            _, g = loss_and_grads(model, data.images[idx], data.labels[idx])
            if step_norms is not None:
                step_norms.append(lr * float(np.linalg.norm(g)))
            model = sgd_step(model, g, lr)
    return model


def _path_slices(n, K, fraction, rng):
    """K windows over one permutation, spaced n/K apart: disjoint when K * size <= n."""
    order = rng.permutation(n)
    size = max(1, int(round(fraction * n)))
    return [np.sort(order[(int(k * n / K) + np.arange(size)) % n]) for k in range(K)]


def build_reference_paths(theta0, local_data, cfg, rng):
    rates = path_learning_rates(cfg.eta0, cfg.beta, cfg.K)
    paths = []
    for lr, idx in zip(rates, _path_slices(len(local_data), cfg.K, cfg.path_fraction, rng)):
        model = sgd_epochs(theta0, local_data.subset(idx), cfg.e_sim, lr, cfg.batch_size, rng)
        paths.append(ReferencePath(model, float(lr), idx))
    return paths


def consensus_factor(grads):
    """Mean positive pairwise cosine among the gradients (zero-norm pairs count as 0)."""
    K = len(grads)
    if K < 2:
        raise ValueError("consensus needs at least 2 gradients")
    flat = [np.ravel(g).astype(np.float64) for g in grads]
    # cosines ignore scale; dividing by the largest entry keeps squares clear of under/overflow
    flat = [g / np.abs(g).max() if g.size and np.abs(g).max() > 0 else g for g in flat]
    sq = [float(g @ g) for g in flat]
    total = 0.0
    for i in range(K - 1):
        for j in range(i + 1, K):
            if sq[i] > 0 and sq[j] > 0:
                # sqrt of the product (not a product of norms) keeps identical vectors at exactly 1
                total += max(0.0, float(flat[i] @ flat[j]) / np.sqrt(sq[i] * sq[j]))
    return min(1.0, 2.0 * total / (K * (K - 1)))


def path_weights(successes, eps=1e-3):
    a = np.asarray(successes, dtype=np.float64) + eps
    return a / a.sum()


def fusion_loss(pattern, mask, fcfg):
    """Mean/std/norm regularizer over the masked pixels; returns (loss, grad)."""
    support = np.asarray(mask) == 1
    v = np.asarray(pattern, dtype=np.float64)[support]
    grad = np.zeros(np.shape(pattern))
    if v.size == 0:
        return 0.0, grad
    n = v.size
    mu = v.mean()
    sigma = np.sqrt(np.mean((v - mu) ** 2))
    norm = np.linalg.norm(v)
    excess = max(0.0, norm - fcfg.c_budget)
    loss = (mu - fcfg.mu_target) ** 2 + (sigma - fcfg.sigma_target) ** 2 + excess ** 2
    g = np.full(n, 2.0 * (mu - fcfg.mu_target) / n)
    if sigma > 0:
        g += 2.0 * (sigma - fcfg.sigma_target) * (v - mu) / (n * sigma)
    if excess > 0:
        g += 2.0 * excess * v / norm
    grad[support] = g
    return float(loss), grad


@dataclass
class OptimizationTrace:
    loss: list = field(default_factory=list)  # mean per-path attack loss, before each step
    success: list = field(default_factory=list)  # mean per-path success on the minibatch
    consensus: list = field(default_factory=list)
    eta_eff: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)
    path_update_norms: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    final_success: list = field(default_factory=list)
    seconds: float = 0.0


def _path_stats(paths, xb, trig):
    target = np.full(len(xb), trig.target)
    grads, losses, success = [], [], []
    poisoned = apply_trigger(xb, trig)
    for p in paths:
        loss, g = loss_and_grads(p.model, xb, target, wrt="trigger", trigger=trig)
        grads.append(g)
        losses.append(loss)
        success.append(float(np.mean(predict(p.model, poisoned) == trig.target)))
    return grads, losses, success


def optimize_trigger(theta0, local_data, cfg, init, rng, paths=None, probe_fraction=0.3):
    """Run the consensus loop for ``cfg.e_delta`` iterations.

    Returns the optimized trigger, the reference paths and the trace.  Only
    the masked part of the pattern moves; it is clamped to [0, 1] after
    every step.
    """
    t0 = time.perf_counter()
    trace = OptimizationTrace()
    trig = init.copy()
    if paths is None:
        paths = build_reference_paths(theta0, local_data, cfg, rng)
    n = len(local_data)
    sub = rng.permutation(n)[: max(1, int(round(cfg.sub_fraction * n)))]
    support = trig.mask == 1
    fusion = cfg.fusion

    def step(direction, lr):
        new = trig.pattern.copy()
        new[support] = np.clip(new[support] - lr * direction[support], 0.0, 1.0)
        return new

    trace.initial_loss = float(np.mean(_path_stats(paths, local_data.images[sub], trig)[1]))

    if fusion.enabled and fusion.mode == "pre":
        for _ in range(fusion.pre_steps):
            _, fg = fusion_loss(trig.pattern, trig.mask, fusion)
            trig.pattern = step(fusion.weight * fg, cfg.eta_delta)

    for it in range(cfg.e_delta):
        idx = sub if len(sub) <= cfg.batch_size else rng.choice(sub, size=cfg.batch_size, replace=False)
        xb = local_data.images[idx]
        grads, losses, success = _path_stats(paths, xb, trig)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NonFiniteError(f"non-finite trigger gradient at iteration {it}")
        C = consensus_factor([g[support] for g in grads])
        w = path_weights(success)
        g_agg = sum(wk * gk for wk, gk in zip(w, grads))
        eta_eff = cfg.eta_delta * (1.0 + cfg.lam * C)
        direction = g_agg
        if fusion.enabled and fusion.mode == "simultaneous":
            direction = direction + fusion.weight * fusion_loss(trig.pattern, trig.mask, fusion)[1]
        before = trig.pattern
        trig.pattern = step(direction, eta_eff)
        trace.loss.append(float(np.mean(losses)))
        trace.success.append(float(np.mean(success)))
        trace.consensus.append(C)
        trace.eta_eff.append(eta_eff)
        trace.step_norm.append(float(np.linalg.norm(trig.pattern - before)))

    xb = local_data.images[sub]
    _, losses, success = _path_stats(paths, xb, trig)
    trace.final_loss = float(np.mean(losses))
    trace.final_success = success

    # Update norms the finished trigger induces on each simulated path.
    for p in paths:
        seed = int(rng.integers(2**31))
        poisoned = poison_dataset(local_data.subset(p.indices), trig, probe_fraction, seed)
        sgd_epochs(theta0, poisoned, max(1, cfg.e_sim), p.lr, cfg.batch_size, rng,
                   step_norms=trace.path_update_norms)
    trace.seconds = time.perf_counter() - t0
    return trig, paths, trace
