"""Server-side aggregation rules behind one strategy contract.

Every rule maps (previous global model, client submissions) to the next
global model. Submissions are sorted by client id before any reduction, so
rule outputs are invariant under permutation of the submission list and
reproducible bit-for-bit.

Rules: plain weighted averaging (fedavg), partial-layer averaging that never
touches classifier layers (flplas), selection by neighbor distance scores
(krum / multikrum), sign-based steps (rsa), norm-clipped deltas (ndc),
server-reference cosine trust (fltrust), and cluster-then-clip with additive
noise (flame).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import nn
from .data import Dataset
from .rng import rng_for

RULES = ("fedavg", "flplas", "krum", "multikrum", "rsa", "ndc", "fltrust", "flame")


@dataclass
class ClientSubmission:
    client_id: int
    model: nn.LayeredModel
    num_samples: int

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be positive, got {self.num_samples}")


@dataclass
class RuleConfig:
    rule: str = "fedavg"
    cut_layer: int | None = None  # flplas; None resolves to the arch default
    krum_f: int | None = None  # assumed malicious count; None resolves at setup
    multikrum_m: int = 3
    ndc_threshold: float = 1.0
    rsa_beta: float = 0.01
    rsa_beta_decay: bool = False  # decay beta by lr_decay_base**round_t
    flame_sigma: float = 0.01
    flame_noise_absolute: bool = False  # noise std = sigma instead of sigma * S_median
    fltrust_root_size: int = 100
    root_dataset: Dataset | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.ndc_threshold <= 0:
            raise ValueError(f"ndc_threshold must be > 0, got {self.ndc_threshold}")
        if self.rsa_beta <= 0:
            raise ValueError(f"rsa_beta must be > 0, got {self.rsa_beta}")
        if self.flame_sigma < 0:
            raise ValueError(f"flame_sigma must be >= 0, got {self.flame_sigma}")
        if self.multikrum_m < 1:
            raise ValueError(f"multikrum_m must be >= 1, got {self.multikrum_m}")
        if self.fltrust_root_size < 1:
            raise ValueError(
                f"fltrust_root_size must be >= 1, got {self.fltrust_root_size}"
            )


def _sorted(subs) -> list[ClientSubmission]:
    subs = sorted(subs, key=lambda s: s.client_id)
    if not subs:
        raise ValueError("no client submissions to aggregate")
    return subs


def _weights(subs) -> np.ndarray:
    n = np.array([s.num_samples for s in subs], dtype=np.float64)
    return n / n.sum()


def fedavg(prev_global: nn.LayeredModel, subs) -> nn.LayeredModel:
    """Sample-count weighted mean of all layers."""
    subs = _sorted(subs)
    w = _weights(subs)
    acc = w[0] * nn.flatten_model(subs[0].model)
    for wi, s in zip(w[1:], subs[1:]):
        acc += wi * nn.flatten_model(s.model)
    return nn.unflatten_model(prev_global, acc)


def flplas_aggregate(
    prev_global: nn.LayeredModel, subs, cut_layer: int
) -> nn.LayeredModel:
    """Weighted mean of layers below the cut; layers at or above it come back
    as local-only markers, because the server never owns classifier values."""
    subs = _sorted(subs)
    num_layers = prev_global.num_layers
    if not 0 < cut_layer <= num_layers:
        raise ValueError(
            f"cut_layer must be in [1, {num_layers}], got {cut_layer}"
        )
    w = _weights(subs)
    layers = []
    for idx, layer in enumerate(prev_global.layers):
        if idx >= cut_layer:
            layers.append(nn.Layer(layer.index, layer.kind, None))
            continue
        acc = w[0] * subs[0].model.array(idx)
        for wi, s in zip(w[1:], subs[1:]):
            acc += wi * s.model.array(idx)
        layers.append(nn.Layer(layer.index, layer.kind, (acc,)))
    return nn.LayeredModel(
        prev_global.arch_id,
        prev_global.num_classes,
        prev_global.input_shape,
        layers,
        on_sentinel_access=prev_global.on_sentinel_access,
    )


def krum_scores(vectors: np.ndarray, f: int) -> np.ndarray:
    """Score per submission: sum of squared distances to its n-f-2 nearest
    other submissions (lower is more central)."""
    n = len(vectors)
    if n < f + 3:
        raise ValueError(f"krum needs at least f+3={f + 3} submissions, got {n}")
    diffs = vectors[:, None, :] - vectors[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diffs, diffs)
    scores = np.empty(n)
    keep = n - f - 2
    for i in range(n):
        others = np.delete(d2[i], i)
        others.sort()
        scores[i] = others[:keep].sum()
    return scores


def krum(prev_global: nn.LayeredModel, subs, f: int) -> nn.LayeredModel:
    """Return the single most central submission (ties: lowest client id)."""
    subs = _sorted(subs)
    vectors = np.stack([nn.flatten_model(s.model) for s in subs])
    scores = krum_scores(vectors, f)
    return nn.clone_model(subs[int(np.argmin(scores))].model)


def multikrum(prev_global: nn.LayeredModel, subs, f: int, m: int) -> nn.LayeredModel:
    """Unweighted mean of the m best-scoring submissions."""
    subs = _sorted(subs)
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    m = min(m, len(subs))
    vectors = np.stack([nn.flatten_model(s.model) for s in subs])
    scores = krum_scores(vectors, f)
    chosen = np.argsort(scores, kind="stable")[:m]
    mean = vectors[np.sort(chosen)].mean(axis=0)
    return nn.unflatten_model(prev_global, mean)


def rsa(prev_global: nn.LayeredModel, subs, beta: float) -> nn.LayeredModel:
    """Sign-of-difference step: G + beta * sum_i sign(M_i - G), elementwise."""
    subs = _sorted(subs)
    g = nn.flatten_model(prev_global)
    acc = np.zeros_like(g)
    for s in subs:
        acc += np.sign(nn.flatten_model(s.model) - g)
    return nn.unflatten_model(prev_global, g + beta * acc)


def ndc(prev_global: nn.LayeredModel, subs, threshold: float) -> nn.LayeredModel:
    """Norm-clipped deltas: each client delta is shrunk onto the threshold
    ball, then sample-weighted-averaged onto the previous global model."""
    if threshold <= 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    subs = _sorted(subs)
    w = _weights(subs)
    g = nn.flatten_model(prev_global)
    acc = np.zeros_like(g)
    for wi, s in zip(w, subs):
        delta = nn.flatten_model(s.model) - g
        norm = float(np.linalg.norm(delta))
        acc += wi * (delta / max(1.0, norm / threshold))
    return nn.unflatten_model(prev_global, g + acc)


def clip_delta(delta: np.ndarray, threshold: float) -> np.ndarray:
    """The per-client clipping used by :func:`ndc` (exposed for checks)."""
    norm = float(np.linalg.norm(delta))
    return delta / max(1.0, norm / threshold)


def fltrust(
    prev_global: nn.LayeredModel,
    subs,
    root: Dataset,
    train_cfg: nn.TrainingConfig,
    round_t: int,
) -> nn.LayeredModel:
    """Cosine-trust aggregation against a server-trained reference update.

    The server runs one local pass over its small clean root dataset starting
    from the previous global model; client updates are ReLU-cosine weighted
    against that reference and rescaled to its norm before averaging. If all
    trust scores vanish the previous global model is kept.
    """
    subs = _sorted(subs)
    if root is None or len(root) == 0:
        raise ValueError("fltrust requires a nonempty root dataset")
    g = nn.flatten_model(prev_global)
    server_model = _local_pass(prev_global, root, train_cfg, round_t)
    g0 = nn.flatten_model(server_model) - g
    g0_norm = float(np.linalg.norm(g0))
    trust_sum = 0.0
    acc = np.zeros_like(g)
    for s in subs:
        gi = nn.flatten_model(s.model) - g
        gi_norm = float(np.linalg.norm(gi))
        if gi_norm == 0.0 or g0_norm == 0.0:
            continue
        trust = max(0.0, float(gi @ g0) / (gi_norm * g0_norm))
        if trust == 0.0:
            continue
        acc += trust * (gi * (g0_norm / gi_norm))
        trust_sum += trust
    if trust_sum == 0.0:
        return nn.clone_model(prev_global)
    return nn.unflatten_model(prev_global, g + acc / trust_sum)


def _local_pass(model: nn.LayeredModel, ds: Dataset, cfg: nn.TrainingConfig, round_t: int):
    """One epoch of seeded mini-batch SGD from ``model`` (used server-side)."""
    current = model
    velocity = nn.zeros_velocity(model)
    rng = rng_for(cfg.seed, "fltrust-root", round_t)
    order = rng.permutation(len(ds))
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start : start + cfg.batch_size]
        _, grads = nn.loss_and_gradients(current, ds.images[batch], ds.labels[batch])
        current, velocity = nn.sgd_step(current, grads, cfg, velocity, round_t)
    return current


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise 1 - cos similarity with zero-vector guards: two zero vectors
    are at distance 0, a zero vector is at distance 1 from any other."""
    norms = np.linalg.norm(vectors, axis=1)
    dist = np.ones((len(vectors), len(vectors)))
    nonzero = norms > 0
    if nonzero.any():
        v = vectors[nonzero] / norms[nonzero, None]
        sims = np.clip(v @ v.T, -1.0, 1.0)
        block = np.ix_(nonzero, nonzero)
        dist[block] = np.clip(1.0 - sims, 0.0, None)
    both_zero = np.ix_(~nonzero, ~nonzero)
    dist[both_zero] = 0.0
    np.fill_diagonal(dist, 0.0)
    return dist


def flame(
    prev_global: nn.LayeredModel,
    subs,
    sigma: float,
    noise_rng: np.random.Generator | None = None,
    noise_absolute: bool = False,
) -> nn.LayeredModel:
    """Cluster, clip, average, and blur.

    1. Two-way average-linkage clustering on pairwise cosine distances of the
       client updates; the larger cluster is kept (ties keep the cluster
       containing the lowest client id).
    2. Kept updates are clipped to the median update norm S_median by the
       factor min(1, S_median / S_i).
    3. Their unweighted mean is added to the previous global model, plus
       centered Gaussian noise with std sigma * S_median (or plain sigma when
       ``noise_absolute``).
    """
    subs = _sorted(subs)
    if len(subs) < 2:
        raise ValueError(f"flame needs at least 2 submissions, got {len(subs)}")
    g = nn.flatten_model(prev_global)
    updates = np.stack([nn.flatten_model(s.model) - g for s in subs])

    dist = cosine_distance_matrix(updates)
    condensed = dist[np.triu_indices(len(subs), k=1)]
    labels = fcluster(linkage(condensed, method="average"), t=2, criterion="maxclust")
    size_a = int(np.sum(labels == 1))
    size_b = len(labels) - size_a
    if size_a > size_b:
        kept_label = 1
    elif size_b > size_a:
        kept_label = 2
    else:
        kept_label = labels[0]  # subs sorted, index 0 is the lowest client id
    kept = np.flatnonzero(labels == kept_label)

    norms = np.linalg.norm(updates[kept], axis=1)
    s_median = float(np.median(norms))
    factors = np.array(
        [1.0 if n == 0.0 else min(1.0, s_median / n) for n in norms]
    )
    mean_update = (updates[kept] * factors[:, None]).mean(axis=0)

    result = g + mean_update
    std = sigma if noise_absolute else sigma * s_median
    if std > 0.0:
        if noise_rng is None:
            raise ValueError("flame needs an explicit noise generator when sigma > 0")
        result = result + noise_rng.normal(0.0, std, size=result.shape)
    return nn.unflatten_model(prev_global, result)


def flame_clip_factors(updates: np.ndarray) -> np.ndarray:
    """Clipping factors for a kept set of updates (exposed for checks)."""
    norms = np.linalg.norm(updates, axis=1)
    s_median = float(np.median(norms))
    return np.array([1.0 if n == 0.0 else min(1.0, s_median / n) for n in norms])


def dispatch(
    cfg: RuleConfig,
    prev_global: nn.LayeredModel,
    subs,
    train_cfg: nn.TrainingConfig,
    round_t: int,
    noise_seed: int = 0,
) -> nn.LayeredModel:
    """Run the configured rule; all rule-specific knobs come from ``cfg``."""
    if cfg.rule == "fedavg":
        return fedavg(prev_global, subs)
    if cfg.rule == "flplas":
        cut = cfg.cut_layer
        if cut is None:
            cut = nn.default_cut_layer(prev_global.arch_id)
        return flplas_aggregate(prev_global, subs, cut)
    if cfg.rule == "krum":
        if cfg.krum_f is None:
            raise ValueError("krum requires krum_f")
        return krum(prev_global, subs, cfg.krum_f)
    if cfg.rule == "multikrum":
        if cfg.krum_f is None:
            raise ValueError("multikrum requires krum_f")
        return multikrum(prev_global, subs, cfg.krum_f, cfg.multikrum_m)
    if cfg.rule == "rsa":
        beta = cfg.rsa_beta
        if cfg.rsa_beta_decay:
            beta *= train_cfg.lr_decay_base**round_t
        return rsa(prev_global, subs, beta)
    if cfg.rule == "ndc":
        return ndc(prev_global, subs, cfg.ndc_threshold)
    if cfg.rule == "fltrust":
        return fltrust(prev_global, subs, cfg.root_dataset, train_cfg, round_t)
    if cfg.rule == "flame":
        rng = rng_for(noise_seed, "flame-noise", round_t)
        return flame(
            prev_global,
            subs,
            cfg.flame_sigma,
            noise_rng=rng,
            noise_absolute=cfg.flame_noise_absolute,
        )
    raise ValueError(f"unknown rule {cfg.rule!r}")


def screening_complexity() -> dict[str, str]:
    """Server-side screening cost per rule, in terms of the number of
    collected updates (tau), parameters per update (zeta), and the iteration
    count of iterative methods (R*)."""
    return {
        "fedavg": "O(0)",
        "flplas": "O(0)",
        "multikrum": "O(tau^2 zeta)",
        "krum": "O(tau^2 zeta)",
        "rfa": "O(tau zeta R*)",
        "rsa": "O(tau zeta)",
        "ndc": "O(tau zeta)",
    }
