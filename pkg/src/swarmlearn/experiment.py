"""Experiment assembly shared by all algorithm variants.

Everything derived from (configuration, seed) — dataset, partitions, shared
sets, test set, model spec and initial parameters — is built here from
dedicated orchestrator streams, so every variant run under the same seed sees
byte-identical data and initialization (checked through the digests).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from .core import DOMAIN_INIT, DOMAIN_ORCHESTRATOR, HyperParameters, derived_rng, worker_stream
from .model import Batch, ModelSpec, init_params, loss, param_count
from .swarm import WorkerState

PARTITION_MODES = ("iid", "shard")
INIT_MODES = ("shared", "per_worker")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    classes: int = 10
    per_class: int = 900
    dim: int = 20
    separation: float = 1.6
    test_per_class: int = 100
    idx_images: str | None = None
    idx_labels: str | None = None
    idx_test_images: str | None = None
    idx_test_labels: str | None = None
    partition: str = "shard"
    per_worker: int = 300
    num_shards: int = 60
    shards_per_worker: int = 2
    global_train: int = 600
    global_score: int = 500

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError("data source must be 'synthetic' or 'idx'")
        if self.partition not in PARTITION_MODES:
            raise ValueError(f"partition must be one of {PARTITION_MODES}")
        if self.source == "idx" and (self.idx_images is None or self.idx_labels is None):
            raise ValueError("idx source needs idx_images and idx_labels paths")
        if self.global_train < 0 or self.global_score < 0:
            raise ValueError("shared set sizes must be >= 0")


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    variant: str
    seed: int
    f_g: float
    train_loss_mean: float
    train_loss_min: float
    train_loss_max: float
    test_accuracy: float
    scalar_uplinks: int
    vector_uplinks: int
    vector_broadcasts: int
    detections: int
    diag: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentSetup:
    train: datamod.Dataset
    test: Batch
    plan: datamod.PartitionPlan
    shared: datamod.GlobalShared | None
    spec: ModelSpec
    init_w: np.ndarray          # (D,) shared or (U, D) per-worker
    init_mode: str
    seed: int
    partition_digest: str
    init_digest: str


def _digest_plan(plan: datamod.PartitionPlan) -> str:
    h = hashlib.sha256(plan.mode.encode())
    for idx in plan.worker_indices:
        h.update(np.ascontiguousarray(idx, dtype="<i8").tobytes())
    return h.hexdigest()


def _digest_array(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def build_setup(
    cfg: DataConfig,
    spec_kind: str,
    hidden_dims: tuple[int, ...],
    h: HyperParameters,
    seed: int,
    init_mode: str = "shared",
) -> ExperimentSetup:
    """Build the per-seed world every variant shares."""
    if init_mode not in INIT_MODES:
        raise ValueError(f"init mode must be one of {INIT_MODES}")

    if cfg.source == "synthetic":
        train = datamod.synthetic_blobs(
            cfg.classes, cfg.per_class, cfg.dim, cfg.separation,
            derived_rng(seed, DOMAIN_ORCHESTRATOR, 0),
        )
    else:
        train = datamod.load_idx(cfg.idx_images, cfg.idx_labels, cfg.classes)

    if cfg.partition == "iid":
        plan = datamod.partition_iid(
            train, h.num_workers, cfg.per_worker, derived_rng(seed, DOMAIN_ORCHESTRATOR, 1)
        )
    else:
        plan = datamod.partition_shards(
            train, cfg.num_shards, cfg.shards_per_worker, h.num_workers,
            derived_rng(seed, DOMAIN_ORCHESTRATOR, 1),
        )

    shared = None
    if cfg.global_train or cfg.global_score:
        shared = datamod.build_global_shared(
            train, cfg.global_train, cfg.global_score, plan,
            derived_rng(seed, DOMAIN_ORCHESTRATOR, 2),
        )

    if cfg.source == "synthetic":
        test_ds = datamod.synthetic_blobs(
            cfg.classes, cfg.test_per_class, cfg.dim, cfg.separation,
            derived_rng(seed, DOMAIN_ORCHESTRATOR, 3),
        )
        test = test_ds.as_batch()
    elif cfg.idx_test_images is not None and cfg.idx_test_labels is not None:
        test = datamod.load_idx(cfg.idx_test_images, cfg.idx_test_labels, cfg.classes).as_batch()
    else:
        taken = set(int(i) for i in plan.all_indices())
        if shared is not None:
            taken |= set(int(i) for i in shared.train_indices)
            taken |= set(int(i) for i in shared.score_indices)
        test_idx = datamod.stratified_sample(
            train, cfg.test_per_class * cfg.classes, taken,
            derived_rng(seed, DOMAIN_ORCHESTRATOR, 3),
        )
        test = train.subset(test_idx).as_batch()

    spec = ModelSpec(spec_kind, train.features.shape[1], cfg.classes, tuple(hidden_dims))
    if init_mode == "shared":
        init_w = init_params(spec, derived_rng(seed, DOMAIN_INIT, 0))
    else:
        init_w = np.stack(
            [init_params(spec, derived_rng(seed, DOMAIN_INIT, i)) for i in range(h.num_workers)]
        )

    return ExperimentSetup(
        train=train,
        test=test,
        plan=plan,
        shared=shared,
        spec=spec,
        init_w=init_w,
        init_mode=init_mode,
        seed=seed,
        partition_digest=_digest_plan(plan),
        init_digest=_digest_array(init_w),
    )


def initial_w_for(setup: ExperimentSetup, worker_id: int) -> np.ndarray:
    if setup.init_mode == "shared":
        return setup.init_w.copy()
    return setup.init_w[worker_id].copy()


def worker_pool(setup: ExperimentSetup, worker_id: int, with_global_train: bool):
    """A worker's training arrays: its partition, optionally + the shared train set."""
    idx = setup.plan.worker_indices[worker_id]
    features = setup.train.features[idx]
    labels = setup.train.labels[idx]
    if with_global_train and setup.shared is not None and len(setup.shared.train):
        features = np.concatenate([features, setup.shared.train.features])
        labels = np.concatenate([labels, setup.shared.train.labels])
    return features, labels


def make_workers(
    setup: ExperimentSetup,
    h: HyperParameters,
    with_global_train: bool,
    score_mode: str,            # "shared" | "local" | "none"
) -> list[WorkerState]:
    if score_mode == "shared" and (setup.shared is None or not len(setup.shared.score)):
        raise ValueError("missing global scoring dataset (global_score)")
    workers = []
    for i in range(h.num_workers):
        features, labels = worker_pool(setup, i, with_global_train)
        local_idx = setup.plan.worker_indices[i]
        if score_mode == "shared":
            score_set = setup.shared.score.as_batch()
        elif score_mode == "local":
            score_set = Batch(setup.train.features[local_idx], setup.train.labels[local_idx])
        else:
            score_set = None
        w0 = initial_w_for(setup, i)
        f_p = loss(setup.spec, w0, score_set) if score_set is not None else math.inf
        workers.append(
            WorkerState(
                worker_id=i,
                w=w0,
                v=np.zeros(param_count(setup.spec)),
                w_p=w0.copy(),
                f_p=f_p,
                train_features=features,
                train_labels=labels,
                score_set=score_set,
                stream=worker_stream(seed=setup.seed, worker_id=i),
            )
        )
    return workers


def population_batch(setup: ExperimentSetup) -> Batch:
    """Union of all worker partitions: the empirical population."""
    idx = np.sort(setup.plan.all_indices())
    return Batch(setup.train.features[idx], setup.train.labels[idx])
