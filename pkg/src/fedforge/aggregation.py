"""Server-side aggregation rules.

Every rule maps a list of :class:`ClientUpdate` to one aggregated delta.
Updates are sorted by client id on entry, so outputs never depend on the
order in which clients reported.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .model import forward

RULES = ("fedavg", "nc", "dp", "median", "tm", "krum", "rfa", "fsg", "fltrust", "zeno", "manc", "flame")


@dataclass
class ClientUpdate:
    client_id: int
    n_k: int
    delta: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.n_k < 1:
            raise ValueError(f"client {self.client_id}: n_k must be >= 1")
        if self.delta.ndim != 1 or not np.all(np.isfinite(self.delta)):
            raise ValueError(f"client {self.client_id}: delta must be a finite 1-D vector")


@dataclass
class AggregatorConfig:
    rule: str = "fedavg"
    trim_ratio: float = 0.2
    f: int = 2
    weiszfeld_iters: int = 10
    weiszfeld_eps: float = 1e-5
    clip_norm: float = 1.0
    dp_sigma: float = 0.0015
    zeno_rho: float = 0.0005
    zeno_b: int = 1
    zeno_nr: int = 4
    zeno_batch: int = 32
    flame_lambda: float = 0.001
    manc_tau: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        if self.rule not in RULES:
            problems.append(f"rule: unknown tag {self.rule!r}; expected one of {', '.join(RULES)}")
        if not 0 <= self.trim_ratio < 0.5:
            problems.append("trim_ratio: must be in [0, 0.5)")
        if self.f < 0:
            problems.append("f: must be >= 0")
        if self.weiszfeld_iters < 1 or self.weiszfeld_eps <= 0:
            problems.append("weiszfeld_iters/weiszfeld_eps: must be positive")
        if not self.clip_norm > 0:
            problems.append("clip_norm: must be > 0")
        if self.dp_sigma < 0 or self.flame_lambda < 0:
            problems.append("dp_sigma/flame_lambda: must be >= 0")
        if self.zeno_rho < 0 or self.zeno_b < 0 or self.zeno_nr < 1 or self.zeno_batch < 1:
            problems.append("zeno_*: rho >= 0, b >= 0, nr >= 1, batch >= 1")
        if not self.manc_tau > 0:
            problems.append("manc_tau: must be > 0")
        if problems:
            raise ValueError("; ".join(problems))

    def min_clients(self):
        """Smallest per-round update count this rule can aggregate."""
        if self.rule == "krum":
            return 2 * self.f + 3
        if self.rule == "zeno":
            return self.zeno_b + 1
        return 1


@dataclass
class ServerContext:
    global_model: object = None
    reference_update: np.ndarray | None = None
    validation: object = None
    history: dict = field(default_factory=dict)
    round: int = 0
    rng: np.random.Generator | None = None


def _sorted(updates):
    if not updates:
        raise ValueError("cannot aggregate an empty set of updates")
    ups = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ups]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in updates: {ids}")
    dims = {u.delta.shape for u in ups}
    if len(dims) != 1:
        raise ValueError(f"updates have mismatched lengths: {sorted(dims)}")
    return ups


def _stack(ups):
    return np.stack([u.delta for u in ups])


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def fedavg(updates):
    ups = _sorted(updates)
    n = np.array([u.n_k for u in ups], dtype=np.float64)
    return (n / n.sum()) @ _stack(ups)


def _clip(delta, bound):
    norm = np.linalg.norm(delta)
    return delta * min(1.0, bound / norm) if norm > 0 else delta


def norm_clip(updates, clip_norm):
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    ups = _sorted(updates)
    return fedavg([ClientUpdate(u.client_id, u.n_k, _clip(u.delta, clip_norm)) for u in ups])


def dp_aggregate(updates, clip_norm, dp_sigma, rng):
    out = norm_clip(updates, clip_norm)
    if dp_sigma > 0:
        out = out + rng.normal(0.0, dp_sigma, size=out.shape)
    return out


def coordinate_median(updates):
    return np.median(_stack(_sorted(updates)), axis=0)


def trimmed_mean(updates, trim_ratio):
    x = np.sort(_stack(_sorted(updates)), axis=0)
    m = x.shape[0]
    k = int(np.floor(trim_ratio * m))
    if m - 2 * k < 1:
        raise ValueError(f"trim ratio {trim_ratio} removes every one of {m} values")
    return x[k:m - k].mean(axis=0)


def krum_scores(updates, f):
    ups = _sorted(updates)
    m = len(ups)
    if m < 2 * f + 3:
        raise ValueError(f"krum needs n >= 2f + 3 updates (f={f} requires {2 * f + 3}, got {m})")
    x = _stack(ups)
    d2 = np.array([[np.sum((x[i] - x[j]) ** 2) for j in range(m)] for i in range(m)])
    nearest = m - f - 2
    scores = np.array([np.sort(np.delete(d2[i], i))[:nearest].sum() for i in range(m)])
    return ups, scores


def krum(updates, f):
    ups, scores = krum_scores(updates, f)
    # argmin returns the first minimum, i.e. the lowest client id among ties.
    return ups[int(np.argmin(scores))].delta.copy()


def rfa_geometric_median(updates, iters=10, eps=1e-5, return_iterations=False):
    """Weighted geometric median by Weiszfeld iterations from the weighted mean."""
    ups = _sorted(updates)
    x = _stack(ups)
    alpha = np.array([u.n_k for u in ups], dtype=np.float64)
    alpha /= alpha.sum()
    z = alpha @ x
    used = 0
    for used in range(1, iters + 1):
        dist = np.maximum(np.linalg.norm(x - z, axis=1), 1e-10)
        beta = alpha / dist
        z_new = beta @ x / beta.sum()
        step = np.linalg.norm(z_new - z)
        z = z_new
        if step < eps:
            break
    return (z, used) if return_iterations else z


def foolsgold_weights(histories):
    """Canonical FoolsGold reweighting over per-client cumulative histories.

    ``histories`` is an (m, d) array. Returns weights in [0, 1].
    """
    h = np.asarray(histories, dtype=np.float64)
    m = h.shape[0]
    norms = np.linalg.norm(h, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = h / safe[:, None]
    cs = unit @ unit.T
    cs[norms == 0, :] = 0.0
    cs[:, norms == 0] = 0.0
    np.fill_diagonal(cs, 0.0)
    maxcs = cs.max(axis=1) if m > 1 else np.zeros(1)
    # pardoning: scale down similarity to clients that look more suspicious
    for i in range(m):
        for j in range(m):
            if i != j and maxcs[i] < maxcs[j]:
                cs[i, j] *= maxcs[i] / maxcs[j]
    wv = 1.0 - (cs.max(axis=1) if m > 1 else np.zeros(1))
    wv = np.clip(wv, 0.0, 1.0)
    top = wv.max()
    if top == 0:
        return wv
    wv = wv / top
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = np.log(wv / (1.0 - wv)) + 0.5
    wv[np.isinf(wv) | (wv > 1.0)] = 1.0
    wv[wv < 0.0] = 0.0
    return wv


def foolsgold(updates, history):
    """Reweight by cumulative-history similarity; ``history`` is updated in place."""
    ups = _sorted(updates)
    for u in ups:
        prev = history.get(u.client_id)
        history[u.client_id] = u.delta.copy() if prev is None else prev + u.delta
    wv = foolsgold_weights(np.stack([history[u.client_id] for u in ups]))
    if wv.sum() == 0:
        # every client is indistinguishable from another one: no basis to prefer any
        wv = np.ones_like(wv)
    return (wv / wv.sum()) @ _stack(ups)


def fltrust(updates, server_reference):
    if server_reference is None:
        raise ValueError("fltrust needs a server reference update")
    ref = np.asarray(server_reference, dtype=np.float64)
    ups = _sorted(updates)
    ref_norm = np.linalg.norm(ref)
    scores, rescaled = [], []
    for u in ups:
        s = max(0.0, _cos(u.delta, ref))
        norm = np.linalg.norm(u.delta)
        scores.append(s)
        rescaled.append(u.delta * (ref_norm / norm) if norm > 0 else np.zeros_like(ref))
    scores = np.array(scores)
    if scores.sum() == 0:
        return np.zeros_like(ref)
    return scores @ np.stack(rescaled) / scores.sum()


def zeno_scores(updates, model, validation, rho, nr, batch, rng):
    ups = _sorted(updates)
    batches = [rng.choice(len(validation), size=min(batch, len(validation)), replace=False)
               for _ in range(nr)]

    def loss(params, idx):
        logits = forward(model.with_params(params), validation.images[idx])
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return float(np.mean(lse - z[np.arange(len(idx)), validation.labels[idx]]))

    base = [loss(model.params, idx) for idx in batches]
    scores = []
    for u in ups:
        gain = np.mean([b - loss(model.params + u.delta, idx) for b, idx in zip(base, batches)])
        scores.append(gain - rho * float(u.delta @ u.delta))
    return ups, np.array(scores)


def zeno(updates, ctx, rho, b, nr=4, batch=32):
    if ctx.validation is None or ctx.global_model is None:
        raise ValueError("zeno needs a server validation split and the global model")
    rng = ctx.rng if ctx.rng is not None else np.random.default_rng(0)
    ups, scores = zeno_scores(updates, ctx.global_model, ctx.validation, rho, nr, batch, rng)
    if b >= len(ups):
        raise ValueError(f"zeno cannot drop b={b} of {len(ups)} updates")
    order = sorted(range(len(ups)), key=lambda i: (scores[i], ups[i].client_id))
    return fedavg([ups[i] for i in order[b:]])


def manc(updates, tau):
    ups = _sorted(updates)
    x = _stack(ups)
    anchor = np.median(x, axis=0)
    dev = x - anchor
    dist = np.linalg.norm(dev, axis=1)
    bound = tau * np.median(dist)
    clipped = []
    for u, d, dn in zip(ups, dev, dist):
        scale = min(1.0, bound / dn) if dn > 0 else 1.0
        clipped.append(ClientUpdate(u.client_id, u.n_k, anchor + d * scale))
    return fedavg(clipped)


def complete_linkage_two_clusters(x):
    """Merge clusters under complete linkage on cosine distance until <= 2 remain.

    Rows of ``x`` must be in client-id order; ties merge the pair with the
    smallest member indices, so the result is order-independent.
    """
    m = x.shape[0]
    dist = np.array([[1.0 - _cos(x[i], x[j]) for j in range(m)] for i in range(m)])
    clusters = [[i] for i in range(m)]
    while len(clusters) > 2:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                d = max(dist[i, j] for i in clusters[a] for j in clusters[b])
                if best is None or d < best[0]:
                    best = (d, a, b)
        _, a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    return clusters


def flame_simplified(updates, f, lam, rng):
    ups = _sorted(updates)
    x = _stack(ups)
    m = len(ups)
    clusters = complete_linkage_two_clusters(x)
    # larger cluster; on a tie the one holding the lowest client id (index 0 after sorting)
    kept = max(clusters, key=lambda c: (len(c), -c[0]))
    if len(kept) < m - f:
        kept = list(range(m))
    survivors = x[kept]
    norms = np.linalg.norm(survivors, axis=1)
    bound = float(np.median(norms))
    clipped = np.stack([s * min(1.0, bound / n) if n > 0 else s for s, n in zip(survivors, norms)])
    out = clipped.mean(axis=0)
    if lam > 0 and bound > 0:
        out = out + rng.normal(0.0, lam * bound, size=out.shape)
    return out


def flame_kept(updates, f):
    """Client ids surviving the clustering stage (for diagnostics/tests)."""
    ups = _sorted(updates)
    clusters = complete_linkage_two_clusters(_stack(ups))
    kept = max(clusters, key=lambda c: (len(c), -c[0]))
    if len(kept) < len(ups) - f:
        kept = list(range(len(ups)))
    return [ups[i].client_id for i in kept]


def aggregate(updates, cfg, ctx=None):
    ctx = ctx if ctx is not None else ServerContext()
    rng = ctx.rng if ctx.rng is not None else np.random.default_rng(cfg.seed)
    rule = cfg.rule
    if rule == "fedavg":
        return fedavg(updates)
    if rule == "nc":
        return norm_clip(updates, cfg.clip_norm)
    if rule == "dp":
        return dp_aggregate(updates, cfg.clip_norm, cfg.dp_sigma, rng)
    if rule == "median":
        return coordinate_median(updates)
    if rule == "tm":
        return trimmed_mean(updates, cfg.trim_ratio)
    if rule == "krum":
        return krum(updates, cfg.f)
    if rule == "rfa":
        return rfa_geometric_median(updates, cfg.weiszfeld_iters, cfg.weiszfeld_eps)
    if rule == "fsg":
        return foolsgold(updates, ctx.history)
    if rule == "fltrust":
        return fltrust(updates, ctx.reference_update)
    if rule == "zeno":
        return zeno(updates, ctx, cfg.zeno_rho, cfg.zeno_b, cfg.zeno_nr, cfg.zeno_batch)
    if rule == "manc":
        return manc(updates, cfg.manc_tau)
    if rule == "flame":
        return flame_simplified(updates, cfg.f, cfg.flame_lambda, rng)
    raise ValueError(f"unknown aggregation rule {rule!r}")


def config_fields():
    return [f.name for f in fields(AggregatorConfig)]
