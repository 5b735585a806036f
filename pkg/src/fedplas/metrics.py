"""Evaluation: main-task accuracy, backdoor accuracy, and model surgery.

Main-task accuracy (ma) is the fraction of clean test inputs classified
correctly. Backdoor accuracy (ba) is the fraction of backdoor test inputs
classified as the attacker's target, so lower is better for a defense. When
clients keep personal classifier layers there is one model per client: ma/ba
are averaged over benign clients and ba_atk is the same backdoor rate
averaged over the malicious clients' own models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset
from .rng import rng_for

EVAL_BATCH = 512


@dataclass
class EvalReport:
    ma: float
    ba: float | None
    loss: float
    ba_atk: float | None = None
    per_client_ma: dict[int, float] | None = None
    per_client_ba: dict[int, float] | None = None


def predict(model: nn.LayeredModel, images: np.ndarray) -> np.ndarray:
    """Argmax class per sample, evaluated in fixed-size batches."""
    out = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), EVAL_BATCH):
        logits = nn.forward(model, images[start : start + EVAL_BATCH])
        out[start : start + EVAL_BATCH] = logits.argmax(axis=1)
    return out


def _clean_loss(model: nn.LayeredModel, ds: Dataset) -> float:
    total = 0.0
    for start in range(0, len(ds), EVAL_BATCH):
        stop = min(start + EVAL_BATCH, len(ds))
        loss, _ = nn.loss_and_gradients(model, ds.images[start:stop], ds.labels[start:stop])
        total += loss * (stop - start)
    return total / len(ds)


def _eval_single(model, clean_test: Dataset, backdoor_test: Dataset | None):
    ma = float(np.mean(predict(model, clean_test.images) == clean_test.labels))
    ba = None
    if backdoor_test is not None and len(backdoor_test):
        ba = float(
            np.mean(predict(model, backdoor_test.images) == backdoor_test.labels)
        )
    return ma, ba


def evaluate(models, clean_test: Dataset, backdoor_test: Dataset | None) -> EvalReport:
    """Evaluate one global model, or a per-client collection.

    ``models`` is either a single model or an iterable of
    (client_id, model, malicious) triples. In the per-client form, ma/ba
    average over the benign clients and ba_atk over the malicious ones.
    """
    if len(clean_test) == 0:
        raise ValueError("clean test set is empty")
    if isinstance(models, nn.LayeredModel):
        ma, ba = _eval_single(models, clean_test, backdoor_test)
        return EvalReport(ma=ma, ba=ba, loss=_clean_loss(models, clean_test))

    per_ma: dict[int, float] = {}
    per_ba: dict[int, float] = {}
    benign_ma, benign_ba, atk_ba = [], [], []
    benign_loss = []
    for client_id, model, malicious in models:
        ma, ba = _eval_single(model, clean_test, backdoor_test)
        per_ma[client_id] = ma
        if ba is not None:
            per_ba[client_id] = ba
        if malicious:
            if ba is not None:
                atk_ba.append(ba)
        else:
            benign_ma.append(ma)
            benign_loss.append(_clean_loss(model, clean_test))
            if ba is not None:
                benign_ba.append(ba)
    if not benign_ma:
        raise ValueError("no benign client models to evaluate")
    return EvalReport(
        ma=float(np.mean(benign_ma)),
        ba=float(np.mean(benign_ba)) if benign_ba else None,
        loss=float(np.mean(benign_loss)),
        ba_atk=float(np.mean(atk_ba)) if atk_ba else None,
        per_client_ma=per_ma,
        per_client_ba=per_ba or None,
    )


def model_surgery(
    fe_source: nn.LayeredModel, cls_source: nn.LayeredModel, cut_layer: int
) -> nn.LayeredModel:
    """Stitch a model from two donors: layers below the cut come from
    ``fe_source``, layers at or above it from ``cls_source``."""
    if not nn.congruent(fe_source, cls_source):
        raise nn.ShapeError(
            f"cannot stitch incongruent models "
            f"({fe_source.arch_id}/{fe_source.input_shape} vs "
            f"{cls_source.arch_id}/{cls_source.input_shape})"
        )
    if not 0 < cut_layer <= fe_source.num_layers:
        raise ValueError(
            f"cut_layer must be in [1, {fe_source.num_layers}], got {cut_layer}"
        )
    layers = []
    for idx in range(fe_source.num_layers):
        donor = fe_source if idx < cut_layer else cls_source
        layers.append(
            nn.Layer(idx, donor.layers[idx].kind, (donor.array(idx).copy(),))
        )
    return nn.LayeredModel(
        fe_source.arch_id, fe_source.num_classes, fe_source.input_shape, layers
    )


def train_central(
    model: nn.LayeredModel,
    ds: Dataset,
    cfg: nn.TrainingConfig,
    epochs: int,
    shuffle_seed: int,
) -> nn.LayeredModel:
    """Plain centralized training, one lr-decay step per epoch. Aborts if the
    loss stops being finite."""
    current = model
    velocity = nn.zeros_velocity(model)
    for epoch in range(epochs):
        order = rng_for(shuffle_seed, "central-shuffle", epoch).permutation(len(ds))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = nn.loss_and_gradients(
                current, ds.images[batch], ds.labels[batch]
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: loss={loss} at epoch {epoch}, "
                    f"batch offset {start}"
                )
            current, velocity = nn.sgd_step(current, grads, cfg, velocity, epoch)
    return current


def surgery_experiment(
    train_ds: Dataset,
    test_ds: Dataset,
    attack,
    arch_id: str,
    training: nn.TrainingConfig,
    cut_layer: int | None = None,
    epochs: int = 3,
    warmup_epochs: int = 1,
    branch_training: nn.TrainingConfig | None = None,
    seed: int = 0,
):
    """Train one clean and one poisoned model centrally, then evaluate all
    four feature-extractor x classifier recombinations.

    Both models get the same total budget of ``epochs``: a shared clean
    warm-up of ``warmup_epochs`` followed by per-model branches (clean data
    vs poisoned data) with a common batch order, optionally at a different
    branch learning rate. The shared warm-up mirrors how federated models
    descend from a common aggregate; without it, two small networks trained
    this briefly land in unrelated weight basins and recombining their halves
    says nothing about where the backdoor lives. ``warmup_epochs=0`` gives
    fully independent trainings from the shared initialization.

    Returns a dict mapping (fe, classifier) in {"clean", "backdoor"}^2 to an
    EvalReport.
    """
    from .attacks import make_backdoor_testset, poison_partition

    if cut_layer is None:
        cut_layer = nn.default_cut_layer(arch_id)
    if not 0 <= warmup_epochs < epochs:
        raise ValueError(f"warmup_epochs must be in [0, {epochs}), got {warmup_epochs}")
    branch_cfg = branch_training if branch_training is not None else training
    init = nn.build_arch(arch_id, train_ds.num_classes, train_ds.image_shape, seed=seed)
    poisoned_ds = poison_partition(train_ds, attack)
    warm = train_central(init, train_ds, training, warmup_epochs, shuffle_seed=seed)
    branch_epochs = epochs - warmup_epochs
    clean_model = train_central(warm, train_ds, branch_cfg, branch_epochs,
                                shuffle_seed=seed + 1)
    backdoor_model = train_central(warm, poisoned_ds, branch_cfg, branch_epochs,
                                   shuffle_seed=seed + 1)
    backdoor_test = make_backdoor_testset(test_ds, attack)

    sources = {"clean": clean_model, "backdoor": backdoor_model}
    table = {}
    for fe_kind, fe_model in sources.items():
        for cl_kind, cl_model in sources.items():
            stitched = model_surgery(fe_model, cl_model, cut_layer)
            table[(fe_kind, cl_kind)] = evaluate(stitched, test_ds, backdoor_test)
    return table
