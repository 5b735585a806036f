"""The federated round engine.

Each round: sample a stratified set of clients, run local training on every
sampled client, collect submissions (sorted by client id), dispatch the
configured aggregation rule, evaluate, and log. When the defense keeps
classifier layers local, clients upload and receive feature-extractor layers
only; their classifier parameters live exclusively in their own state, and an
isolation monitor counts any attempt by server-side code to touch them.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics, nn
from .aggregation import ClientSubmission, RuleConfig, dispatch
from .attacks import AttackSpec, inject_edgecase, make_backdoor_testset, poison_partition
from .data import Dataset, PartitionSpec, dirichlet_partition, load_idx, subset, synth_generate
from .rng import rng_for

log = logging.getLogger(__name__)

THREADS_ENV = "FEDPLAS_THREADS"


@dataclass
class DatasetSpec:
    """Where experiment data comes from.

    ``source`` is "synth" (generated cluster images) or "idx" (IDX file
    pairs, e.g. MNIST). File-backed datasets are subsampled deterministically
    to train_size/test_size.
    """

    source: str = "synth"
    num_classes: int = 10
    image_side: int = 28
    train_size: int = 2000
    test_size: int = 500
    synth_noise: float = 0.18
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    name: str = "synth"

    def __post_init__(self):
        if self.source not in ("synth", "idx"):
            raise ValueError(f"source must be 'synth' or 'idx', got {self.source!r}")
        if self.source == "idx":
            missing = [
                k
                for k in ("train_images", "train_labels", "test_images", "test_labels")
                if getattr(self, k) is None
            ]
            if missing:
                raise ValueError(f"idx source needs paths for: {', '.join(missing)}")
        if min(self.train_size, self.test_size) < 1:
            raise ValueError("train_size and test_size must be positive")


@dataclass
class ExperimentConfig:
    num_clients: int = 100
    clients_per_round: int = 30
    rounds: int = 200
    malicious_fraction: float = 0.0
    dirichlet_alpha: float = 0.2
    arch_id: str = "lenet-s"
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    training: nn.TrainingConfig = field(default_factory=nn.TrainingConfig)
    defense: RuleConfig = field(default_factory=RuleConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    reset_velocity: bool = False  # zero per-client momentum at every round
    boost_factor: float = 1.0  # malicious update scaling (1.0 = honest training)
    eval_every: int = 1  # evaluate every k-th round (the last round always)

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError(
                f"clients_per_round must be in [1, {self.num_clients}], "
                f"got {self.clients_per_round}"
            )
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ValueError(
                f"malicious_fraction must be in [0, 1], got {self.malicious_fraction}"
            )
        if self.dirichlet_alpha <= 0:
            raise ValueError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.boost_factor <= 0:
            raise ValueError(f"boost_factor must be > 0, got {self.boost_factor}")

    @property
    def is_flplas(self) -> bool:
        return self.defense.rule == "flplas"

    def resolved_cut(self) -> int:
        if self.defense.cut_layer is not None:
            return self.defense.cut_layer
        return nn.default_cut_layer(self.arch_id)


@dataclass
class ClientState:
    client_id: int
    indices: np.ndarray
    malicious: bool
    attack: AttackSpec
    data: Dataset
    classifier: list[nn.Layer] | None = None  # layers >= cut, persisted across rounds
    velocity: list[np.ndarray] | None = None


@dataclass
class RoundLog:
    round_t: int
    sampled: list[int]
    rule: str
    malicious_fraction: float
    loss: float
    ma: float | None
    ba: float | None
    ba_atk: float | None
    wall_ms: float


class IsolationMonitor:
    """Counts attempted reads of locally-held classifier layers. A correct
    run never records any; reads also raise, so a violation cannot slip by."""

    def __init__(self):
        self.classifier_reads = 0

    def record(self, layer_index: int) -> None:
        self.classifier_reads += 1


def malicious_client_ids(cfg: ExperimentConfig) -> np.ndarray:
    """The fixed set of malicious client ids for this config: exactly
    floor(malicious_fraction * num_clients) clients, drawn by seed."""
    count = math.floor(cfg.malicious_fraction * cfg.num_clients)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    rng = rng_for(cfg.seed, "malicious-flags", cfg.num_clients, cfg.malicious_fraction)
    return np.sort(rng.choice(cfg.num_clients, size=count, replace=False))


def sample_round_clients(cfg: ExperimentConfig, round_t: int) -> list[int]:
    """Stratified per-round sample: a constant number of malicious clients,
    round(malicious_fraction * clients_per_round), plus benign ones."""
    if round_t < 1:
        raise ValueError(f"round_t must be >= 1, got {round_t}")
    bad = set(int(i) for i in malicious_client_ids(cfg))
    benign_pool = np.array([c for c in range(cfg.num_clients) if c not in bad])
    bad_pool = np.array(sorted(bad), dtype=np.int64)
    n_bad = int(math.floor(cfg.malicious_fraction * cfg.clients_per_round + 0.5))
    n_benign = cfg.clients_per_round - n_bad
    if n_bad > len(bad_pool):
        raise ValueError(
            f"round needs {n_bad} malicious clients but only {len(bad_pool)} exist"
        )
    if n_benign > len(benign_pool):
        raise ValueError(
            f"round needs {n_benign} benign clients but only {len(benign_pool)} exist"
        )
    rng = rng_for(cfg.seed, "round-sample", round_t)
    picked = []
    if n_bad:
        picked.extend(rng.choice(bad_pool, size=n_bad, replace=False).tolist())
    if n_benign:
        picked.extend(rng.choice(benign_pool, size=n_benign, replace=False).tolist())
    return sorted(int(c) for c in picked)


def _receive_global(
    state: ClientState, global_model: nn.LayeredModel, cfg: ExperimentConfig
) -> nn.LayeredModel:
    """Client-side model assembly: feature layers from the global model,
    classifier layers restored from the client's own persisted state."""
    cut = cfg.resolved_cut() if cfg.is_flplas else global_model.num_layers
    layers = []
    for idx in range(global_model.num_layers):
        if idx < cut:
            layers.append(
                nn.Layer(idx, global_model.layers[idx].kind, (global_model.array(idx).copy(),))
            )
        else:
            own = state.classifier[idx - cut]
            layers.append(nn.Layer(idx, own.kind, (own.params[0].copy(),)))
    return nn.LayeredModel(
        global_model.arch_id,
        global_model.num_classes,
        global_model.input_shape,
        layers,
    )


def client_update(
    state: ClientState,
    global_model: nn.LayeredModel,
    cfg: ExperimentConfig,
    round_t: int,
    monitor: IsolationMonitor | None = None,
):
    """Local training for one sampled client.

    Returns (submission, mean_batch_loss), or None if the client holds no
    data. Under the partial-aggregation defense the uploaded model carries
    feature layers only; classifier slots are local-only markers.
    """
    if len(state.data) == 0:
        log.warning("client %d has no data; skipping round %d", state.client_id, round_t)
        return None
    model = _receive_global(state, global_model, cfg)
    velocity = (
        nn.zeros_velocity(model)
        if state.velocity is None or cfg.reset_velocity
        else [v.copy() for v in state.velocity]
    )
    tcfg = cfg.training
    losses = []
    n = len(state.data)
    for epoch in range(tcfg.local_iterations):
        order = rng_for(cfg.seed, "shuffle", state.client_id, round_t, epoch).permutation(n)
        for start in range(0, n, tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            loss, grads = nn.loss_and_gradients(
                model, state.data.images[batch], state.data.labels[batch]
            )
            model, velocity = nn.sgd_step(model, grads, tcfg, velocity, round_t)
            losses.append(loss)
    state.velocity = velocity

    cut = cfg.resolved_cut() if cfg.is_flplas else model.num_layers
    if cfg.is_flplas:
        state.classifier = [
            nn.Layer(l.index, l.kind, (l.params[0].copy(),)) for l in model.layers[cut:]
        ]
    upload_layers = []
    for idx in range(model.num_layers):
        if idx >= cut:
            upload_layers.append(nn.Layer(idx, model.layers[idx].kind, None))
            continue
        arr = model.array(idx)
        if state.malicious and cfg.boost_factor != 1.0:
            base = global_model.array(idx)
            arr = base + cfg.boost_factor * (arr - base)
        upload_layers.append(nn.Layer(idx, model.layers[idx].kind, (arr.copy(),)))
    upload = nn.LayeredModel(
        model.arch_id,
        model.num_classes,
        model.input_shape,
        upload_layers,
        on_sentinel_access=monitor.record if monitor else None,
    )
    submission = ClientSubmission(state.client_id, upload, n)
    return submission, float(np.mean(losses))


class Experiment:
    """Materialized experiment: datasets, partition, clients, global model."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.monitor = IsolationMonitor()
        train, test = _build_datasets(cfg)
        if cfg.attack.kind == "edgecase":
            train = inject_edgecase(
                train,
                cfg.attack.edge,
                count=max(1, round(cfg.attack.edge_fraction * len(train))),
                seed=cfg.seed,
            )
            test = inject_edgecase(
                test,
                cfg.attack.edge,
                count=max(1, round(cfg.attack.edge_fraction * len(test))),
                seed=cfg.seed + 1,
            )
        if cfg.defense.rule == "fltrust":
            root_rng = rng_for(cfg.seed, "fltrust-root-pick")
            root_idx = root_rng.choice(
                len(train),
                size=min(cfg.defense.fltrust_root_size, len(train) // 2),
                replace=False,
            )
            rest = np.setdiff1d(np.arange(len(train)), root_idx)
            self.cfg = replace(
                cfg, defense=replace(cfg.defense, root_dataset=subset(train, root_idx, "root"))
            )
            cfg = self.cfg
            train = subset(train, rest)
        self.train = train
        self.test = test
        self.backdoor_test = (
            make_backdoor_testset(test, cfg.attack) if cfg.attack.kind != "none" else None
        )
        self.partition = dirichlet_partition(
            train, PartitionSpec(cfg.num_clients, cfg.dirichlet_alpha, cfg.seed)
        )
        bad = set(int(i) for i in malicious_client_ids(cfg))

        init = nn.build_arch(
            cfg.arch_id, train.num_classes, train.image_shape, seed=cfg.seed
        )
        cut = cfg.resolved_cut()
        if not 0 < cut <= init.num_layers:
            raise ValueError(
                f"cut_layer must be in [1, {init.num_layers}] for {cfg.arch_id}, "
                f"got {cut}"
            )
        self.clients: list[ClientState] = []
        for cid in range(cfg.num_clients):
            local = subset(train, self.partition.assignments[cid], f"client-{cid}")
            malicious = cid in bad
            if malicious and cfg.attack.kind != "none":
                local = poison_partition(local, cfg.attack, salt=cid)
            classifier = None
            if cfg.is_flplas:
                classifier = [
                    nn.Layer(l.index, l.kind, (l.params[0].copy(),))
                    for l in init.layers[cut:]
                ]
            self.clients.append(
                ClientState(
                    client_id=cid,
                    indices=self.partition.assignments[cid],
                    malicious=malicious,
                    attack=cfg.attack,
                    data=local,
                    classifier=classifier,
                )
            )
        if cfg.is_flplas:
            layers = [
                nn.Layer(l.index, l.kind, (l.params[0].copy(),) if idx < cut else None)
                for idx, l in enumerate(init.layers)
            ]
            self.global_model = nn.LayeredModel(
                init.arch_id,
                init.num_classes,
                init.input_shape,
                layers,
                on_sentinel_access=self.monitor.record,
            )
        else:
            self.global_model = init
        self.logs: list[RoundLog] = []

    def _evaluate(self) -> metrics.EvalReport:
        cfg = self.cfg
        if cfg.is_flplas:
            cut = cfg.resolved_cut()
            triples = []
            for state in self.clients:
                layers = [
                    nn.Layer(i, self.global_model.layers[i].kind, (self.global_model.array(i),))
                    for i in range(cut)
                ] + [nn.Layer(l.index, l.kind, l.params) for l in state.classifier]
                model = nn.LayeredModel(
                    self.global_model.arch_id,
                    self.global_model.num_classes,
                    self.global_model.input_shape,
                    layers,
                )
                triples.append((state.client_id, model, state.malicious))
            return metrics.evaluate(triples, self.test, self.backdoor_test)
        return metrics.evaluate(self.global_model, self.test, self.backdoor_test)

    def run_round(self, round_t: int) -> RoundLog:
        cfg = self.cfg
        sampled = sample_round_clients(cfg, round_t)
        workers = int(os.environ.get(THREADS_ENV, "1"))

        def train_one(cid: int):
            return client_update(
                self.clients[cid], self.global_model, cfg, round_t, self.monitor
            )

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(train_one, sampled))
        else:
            results = [train_one(cid) for cid in sampled]
        pairs = [r for r in results if r is not None]
        losses = [loss for _, loss in pairs]
        subs = sorted((sub for sub, _ in pairs), key=lambda s: s.client_id)

        t0 = time.perf_counter()
        if subs:
            self.global_model = dispatch(
                cfg.defense,
                self.global_model,
                subs,
                cfg.training,
                round_t,
                noise_seed=cfg.seed,
            )
            if cfg.is_flplas:
                self.global_model.on_sentinel_access = self.monitor.record
        wall_ms = (time.perf_counter() - t0) * 1000.0

        ma = ba = ba_atk = None
        if round_t % cfg.eval_every == 0 or round_t == cfg.rounds:
            report = self._evaluate()
            ma, ba, ba_atk = report.ma, report.ba, report.ba_atk
        entry = RoundLog(
            round_t=round_t,
            sampled=sampled,
            rule=cfg.defense.rule,
            malicious_fraction=cfg.malicious_fraction,
            loss=float(np.mean(losses)) if losses else float("nan"),
            ma=ma,
            ba=ba,
            ba_atk=ba_atk,
            wall_ms=wall_ms,
        )
        self.logs.append(entry)
        return entry

    def run(self) -> list[RoundLog]:
        for round_t in range(1, self.cfg.rounds + 1):
            self.run_round(round_t)
        return self.logs

    def final_report(self) -> metrics.EvalReport:
        return self._evaluate()


def _build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    spec = cfg.dataset
    if spec.source == "synth":
        per_class_train = -(-spec.train_size // spec.num_classes)
        per_class_test = -(-spec.test_size // spec.num_classes)
        train = synth_generate(
            spec.num_classes,
            per_class_train,
            spec.image_side,
            seed=cfg.seed,
            noise=spec.synth_noise,
            name=f"{spec.name}-train",
        )
        test = synth_generate(
            spec.num_classes,
            per_class_test,
            spec.image_side,
            seed=cfg.seed + 1,
            noise=spec.synth_noise,
            name=f"{spec.name}-test",
        )
        train = subset(train, np.arange(spec.train_size))
        test = subset(test, np.arange(spec.test_size))
        return train, test
    train = load_idx(
        spec.train_images, spec.train_labels, f"{spec.name}-train", spec.num_classes
    )
    test = load_idx(
        spec.test_images, spec.test_labels, f"{spec.name}-test", spec.num_classes
    )
    train_pick = rng_for(cfg.seed, "idx-train-subset").permutation(len(train))[
        : spec.train_size
    ]
    test_pick = rng_for(cfg.seed, "idx-test-subset").permutation(len(test))[
        : spec.test_size
    ]
    return subset(train, np.sort(train_pick)), subset(test, np.sort(test_pick))


def run_experiment(cfg: ExperimentConfig) -> Experiment:
    """Build and run a full experiment; the returned object carries logs,
    the final global model, and per-client state."""
    exp = Experiment(cfg)
    exp.run()
    return exp
