"""Reference algorithms and the variant dispatcher for the five-way comparison.

FedAvg here is synchronized gradient averaging: every worker computes one
mini-batch gradient at the common model per round, the server applies the
mean. Pure particle-swarm optimization exists in optimization mode only
(shared deterministic objective), mirroring its origin as an optimizer rather
than a learner.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import analysis
from .attacks import AttackSpec
from .core import (
    DOMAIN_INIT,
    HyperParameters,
    RngStream,
    derived_rng,
    inertia_schedule,
    require_finite,
    sample_coefficients,
    worker_stream,
)
from .data import draw_batch_indices
from .experiment import (
    ExperimentSetup,
    RoundRecord,
    initial_w_for,
    make_workers,
    population_batch,
)
from .model import Batch, accuracy, loss, loss_and_gradient
from .swarm import ProtocolWiring, hybrid_update, initial_ps, run_round

VARIANTS = ("fedavg", "fedavg_gtr", "cbdsl_plain", "cbdsl_gsc", "cbdsl_full", "pure_pso")
LEARNING_VARIANTS = VARIANTS[:-1]


@dataclass(frozen=True)
class DiagnosticsFlags:
    cosine_stats: bool = False
    divergence: bool = False


@dataclass
class RunResult:
    variant: str
    seed: int
    records: list[RoundRecord]
    cosine_stats: analysis.CosineStats | None
    min_observed_loss: float
    partition_digest: str
    init_digest: str


def fedavg_round(workers, w: np.ndarray, h: HyperParameters, spec, t: int):
    """One synchronized round: mean of all workers' mini-batch gradients at w."""
    grads = np.zeros((len(workers), w.shape[0]))
    losses = np.zeros(len(workers))
    for k, state in enumerate(workers):
        rng = state.stream.round(t)
        idx = draw_batch_indices(rng, len(state.train_labels), h.batch_size)
        batch = Batch(state.train_features[idx], state.train_labels[idx])
        losses[k], grads[k] = loss_and_gradient(spec, w, batch)
    w_new = w - h.alpha * grads.mean(axis=0)
    require_finite(w_new, f"fedavg consensus at round {t}")
    return w_new, losses


@dataclass
class Particle:
    particle_id: int
    w: np.ndarray
    v: np.ndarray
    w_p: np.ndarray
    f_p: float
    stream: RngStream


def make_particles(objective, dim: int, count: int, seed: int, init_low=-1.0, init_high=1.0):
    particles = []
    for i in range(count):
        w0 = derived_rng(seed, DOMAIN_INIT, i).uniform(init_low, init_high, size=dim)
        particles.append(
            Particle(i, w0, np.zeros(dim), w0.copy(), float(objective(w0)), worker_stream(seed, i))
        )
    return particles


def pso_round(particles, objective, h: HyperParameters, t: int, f_g: float, w_g):
    """Classic swarm update on a shared objective; returns the moved swarm and
    the (possibly improved) global best."""
    moved = []
    zero_grad = None
    for p in particles:
        rng = p.stream.round(t)
        c1, c2 = sample_coefficients(h, rng)
        c0 = inertia_schedule(h, t)
        if zero_grad is None:
            zero_grad = np.zeros_like(p.w)
        w_new, v_new = hybrid_update(p.w, p.v, p.w_p, w_g, c0, c1, c2, 0.0, zero_grad)
        f_new = float(objective(w_new))
        if f_new < p.f_p:
            p = replace(p, w_p=w_new.copy(), f_p=f_new)
        moved.append(replace(p, w=w_new, v=v_new))
    best = min(moved, key=lambda p: (p.f_p, p.particle_id))
    if best.f_p < f_g:
        return moved, best.f_p, best.w_p.copy()
    return moved, f_g, w_g


def pso_minimize(objective, dim: int, h: HyperParameters, seed: int,
                 init_low=-1.0, init_high=1.0):
    """Run the swarm for h.rounds iterations; returns (best w, best f, history)."""
    particles = make_particles(objective, dim, h.num_workers, seed, init_low, init_high)
    f_g, w_g = math.inf, None
    history = []
    for t in range(h.rounds):
        particles, f_g, w_g = pso_round(particles, objective, h, t, f_g, w_g)
        history.append(f_g)
    return w_g, f_g, history


def _variant_wiring(variant: str):
    if variant == "cbdsl_plain":
        return dict(with_global_train=False, score_mode="local", uses_shared_score=False)
    if variant == "cbdsl_gsc":
        return dict(with_global_train=False, score_mode="shared", uses_shared_score=True)
    if variant == "cbdsl_full":
        return dict(with_global_train=True, score_mode="shared", uses_shared_score=True)
    raise ValueError(f"not a swarm variant: {variant}")


def run_variant(
    variant: str,
    setup: ExperimentSetup,
    h: HyperParameters,
    attack: AttackSpec = AttackSpec(),
    verification: bool = True,
    diag: DiagnosticsFlags = DiagnosticsFlags(),
) -> RunResult:
    """Run one algorithm variant against the shared per-seed world."""
    if variant == "pure_pso":
        raise ValueError("pure_pso runs in optimization mode only; use pso_minimize")
    if variant not in LEARNING_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if attack.attacker_ids and max(attack.attacker_ids) >= h.num_workers:
        raise ValueError("attacker ids must be valid worker ids")
    if variant in ("fedavg_gtr", "cbdsl_full") and (
        setup.shared is None or not len(setup.shared.train)
    ):
        raise ValueError(f"variant {variant} requires a global training set (global_train)")

    if variant in ("fedavg", "fedavg_gtr"):
        return _run_fedavg(variant, setup, h, attack, diag)
    return _run_swarm(variant, setup, h, attack, verification, diag)


def _maybe_genie(setup, h, diag):
    if not diag.divergence:
        return None, None
    population = population_batch(setup)
    genie = analysis.GenieState(initial_w_for(setup, 0), np.zeros(setup.init_w.shape[-1]))
    return genie, population


def _divergence_row(worker_ws, genie):
    gnorm = float(np.linalg.norm(genie.w))
    if gnorm == 0.0:
        return {"divergence_mean": math.nan, "divergence_max": math.nan}
    divs = [float(np.linalg.norm(w - genie.w)) / gnorm for w in worker_ws]
    return {"divergence_mean": float(np.mean(divs)), "divergence_max": float(np.max(divs))}


def _run_swarm(variant, setup, h, attack, verification, diag) -> RunResult:
    wiring_kind = _variant_wiring(variant)
    workers = make_workers(setup, h, wiring_kind["with_global_train"], wiring_kind["score_mode"])
    if attack.active:
        workers = [
            replace(w, is_byzantine=w.worker_id in attack.attacker_ids) for w in workers
        ]
    shared_score = (
        setup.shared.score.as_batch()
        if wiring_kind["uses_shared_score"] and setup.shared is not None and len(setup.shared.score)
        else None
    )
    wiring = ProtocolWiring(
        hyper=h,
        spec=setup.spec,
        shared_score=shared_score,
        verification=verification,
        attack=attack,
    )
    ps = initial_ps()
    stats = analysis.CosineStats(h) if diag.cosine_stats else None
    genie, population = _maybe_genie(setup, h, diag)

    records = []
    min_loss = math.inf
    for t in range(h.rounds):
        workers, ps, outcome = run_round(workers, ps, wiring, t, collect_vectors=diag.cosine_stats)
        diag_row: dict[str, float] = {}
        if stats is not None:
            diag_row.update(stats.consume_round(outcome.step_infos))
        if genie is not None:
            genie = analysis.genie_step(genie, h, setup.spec, population, t)
            diag_row.update(_divergence_row([w.w for w in workers], genie))
        test_acc = (
            accuracy(setup.spec, ps.w_g, setup.test) if ps.w_g is not None else math.nan
        )
        if math.isfinite(outcome.f_g):
            min_loss = min(min_loss, outcome.f_g)
        records.append(
            RoundRecord(
                round_index=t,
                variant=variant,
                seed=setup.seed,
                f_g=outcome.f_g,
                train_loss_mean=float(outcome.batch_losses.mean()),
                train_loss_min=float(outcome.batch_losses.min()),
                train_loss_max=float(outcome.batch_losses.max()),
                test_accuracy=test_acc,
                scalar_uplinks=outcome.scalar_uplinks,
                vector_uplinks=outcome.vector_uplinks,
                vector_broadcasts=outcome.vector_broadcasts,
                detections=outcome.detections,
                diag=diag_row,
            )
        )
    return RunResult(
        variant, setup.seed, records, stats, min_loss, setup.partition_digest, setup.init_digest
    )


def _run_fedavg(variant, setup, h, attack, diag) -> RunResult:
    if attack.active:
        raise ValueError("attacks are wired into the swarm report/upload path only")
    with_gtr = variant == "fedavg_gtr"
    workers = make_workers(setup, h, with_gtr, "none")
    w = initial_w_for(setup, 0)
    genie, population = _maybe_genie(setup, h, diag)
    score_batch = (
        setup.shared.score.as_batch()
        if setup.shared is not None and len(setup.shared.score)
        else None
    )

    records = []
    min_loss = math.inf
    for t in range(h.rounds):
        w, losses = fedavg_round(workers, w, h, setup.spec, t)
        diag_row: dict[str, float] = {}
        if genie is not None:
            genie = analysis.genie_step(genie, h, setup.spec, population, t)
            diag_row.update(_divergence_row([w] * len(workers), genie))
        if diag.cosine_stats and score_batch is not None:
            min_loss = min(min_loss, loss(setup.spec, w, score_batch))
        records.append(
            RoundRecord(
                round_index=t,
                variant=variant,
                seed=setup.seed,
                f_g=math.nan,
                train_loss_mean=float(losses.mean()),
                train_loss_min=float(losses.min()),
                train_loss_max=float(losses.max()),
                test_accuracy=accuracy(setup.spec, w, setup.test),
                scalar_uplinks=0,
                vector_uplinks=len(workers),
                vector_broadcasts=1,
                detections=0,
                diag=diag_row,
            )
        )
    return RunResult(
        variant, setup.seed, records, None, min_loss, setup.partition_digest, setup.init_digest
    )
