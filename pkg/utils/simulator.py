"""
Federated mask-training simulator

Drives the full protocol: partition a synthetic task over clients, fit the
head once, then for every round sample participants, train their
probability masks, encode the top-κ mask deltas, decode and reconstruct
them on the server and aggregate into the global Beta posterior.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.aggregation import GlobalState, bayes_agg, verify_error_bound
from utils.codec import (
    DENSE_HEADER_SIZE,
    BinaryMask,
    DenseUpdate,
    FilterSpec,
    decode_dense,
    decode_update,
    delta_indices,
    encode_dense,
    encode_update,
    rank_random,
    rank_topk,
    read_update,
    reconstruct_mask,
    sample_mask,
)
from utils.config import ExperimentConfig
from utils.datasets import class_coverage, make_dataset, partition_dirichlet, train_test_split
from utils.errors import ConstructionFailed
from utils.filters import derive_seed, hash64
from utils.mask_engine import (
    ClientDataset,
    FrozenModel,
    ModelSpec,
    average_heads,
    client_update,
    evaluate,
    init_model,
    linear_probe,
    with_head,
)

logger = logging.getLogger(__name__)

__all__ = [
    "RoundMetrics", "SimulationState", "ExperimentResult", "partition_dirichlet",
    "kappa_schedule", "federated_data", "setup_experiment", "run_round", "dense_baseline_round", "run_experiment",
]

ROLE_DATA = 0x3C6EF372FE94F82B
ROLE_MODEL = 0xA54FF53A5F1D36F1
ROLE_CLIENTS = 0x510E527FADE682D1
ROLE_TRAIN = 0x9B05688C2B3E6C1F
ROLE_FILTER = 0x1F83D9ABFB41BD6B
ROLE_RANK = 0x5BE0CD19137E2179
ROLE_EVAL = 0xCBBB9D5DC1059ED8
ROLE_BOUND = 0x629A292A367CD507

FLOAT32_BYTES = 4


def _seed(master: int, role: int, *counters: int) -> int:
    seed = derive_seed(master, role)
    for counter in counters:
        seed = hash64(int(counter), seed)
    return seed


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    clients: Tuple[int, ...]
    client_bpp: Tuple[float, ...]
    mean_bpp: float
    round_bytes: int
    cumulative_bytes: int
    accuracy: float
    kappa: float
    mean_delta: float
    mean_delta_prime: float
    spurious_flips: int
    dense_fallbacks: int = 0
    bound_empirical: Optional[float] = None
    bound: Optional[float] = None

    def as_row(self) -> Dict[str, object]:
        return {
            "t": self.round,
            "accuracy": self.accuracy,
            "mean_bpp": self.mean_bpp,
            "cum_bytes": self.cumulative_bytes,
            "mean_delta": self.mean_delta,
            "mean_delta_prime": self.mean_delta_prime,
            "spurious_flips": self.spurious_flips,
            "kappa": self.kappa,
            "round_bytes": self.round_bytes,
            "participants": len(self.clients),
            "dense_fallbacks": self.dense_fallbacks,
            "bound_empirical": self.bound_empirical,
            "bound": self.bound,
        }


@dataclass(frozen=True, eq=False)
class SimulationState:
    """Everything a round needs besides the configuration"""
    model: FrozenModel
    shards: Tuple[ClientDataset, ...]
    test: ClientDataset
    global_state: GlobalState
    cumulative_bytes: int = 0


@dataclass
class ExperimentResult:
    metrics: List[RoundMetrics]
    state: SimulationState
    summary: Dict[str, object] = field(default_factory=dict)
    # client id -> serialized uploads of the last round, for auditing
    last_uploads: Dict[int, bytes] = field(default_factory=dict)


@dataclass(frozen=True)
class _ClientResult:
    client: int
    theta: np.ndarray
    wire: bytes
    delta: int
    retained: int
    fallback: bool


def kappa_schedule(t: int, rounds: int, start: float = 0.8, end: float = 1.0, mode: str = "cosine") -> float:
    """
    κ for the 0-based round index t of a run with `rounds` rounds.

    Cosine mode moves from `start` at t = 0 to `end` at t = rounds - 1.
    """
    if mode == "constant":
        return start
    if mode != "cosine":
        raise ValueError(f"Unknown kappa schedule '{mode}'")
    if not 0 <= t < max(rounds, 1):
        raise ValueError(f"Round index {t} outside [0, {rounds})")
    if rounds <= 1:
        return start
    return end + (start - end) * (1.0 + math.cos(math.pi * t / (rounds - 1))) / 2.0


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------

def federated_data(config: ExperimentConfig) -> Tuple[ClientDataset, ClientDataset, Tuple[ClientDataset, ...]]:
    """(train, test, client shards) for a configuration, deterministic in the master seed"""
    seed = config.run.seed
    data = config.data
    dataset = make_dataset(data.kind, data.classes, data.dim, data.samples, data.noise,
                           _seed(seed, ROLE_DATA))
    train, test = train_test_split(dataset, data.test_samples, _seed(seed, ROLE_DATA, 1))
    shards = tuple(partition_dirichlet(train, config.federation.clients, data.dirichlet_alpha,
                                       _seed(seed, ROLE_DATA, 2)))
    return train, test, shards


def setup_experiment(config: ExperimentConfig) -> Tuple[SimulationState, Dict[str, object]]:
    """
    Build data, shards and model, then initialise the head.

    Returns:
        (initial state, setup report with probe accuracy, probe bytes and C_p)
    """
    seed = config.run.seed
    data = config.data
    train, test, shards = federated_data(config)
    coverage = class_coverage(list(shards), data.classes)
    logger.info(f"Partitioned {train.sample_count} samples over {len(shards)} clients (C_p={coverage:.3f})")

    spec = ModelSpec(data.dim, tuple(config.model.hidden), data.classes)
    model = init_model(spec, _seed(seed, ROLE_MODEL))

    probe_bytes = 0
    if config.model.head_init == "probe":
        heads = [linear_probe(model, shard, config.model.probe_epochs, config.model.probe_lr,
                              config.training.batch_size, _seed(seed, ROLE_TRAIN, 0, client))
                 for client, shard in enumerate(shards)]
        model = with_head(model, average_heads(heads, [s.sample_count for s in shards]))
        head_size = model.head.weight.numel() + model.head.bias.numel()
        probe_bytes = len(shards) * head_size * FLOAT32_BYTES

    probe_accuracy = evaluate(model, BinaryMask.ones(model.d), test)
    logger.info(f"Head initialised by {config.model.head_init}: accuracy={probe_accuracy:.4f}, d={model.d}")

    global_state = GlobalState.initial(model.d, config.federation.participation,
                                       config.protocol.prior_lambda0, config.training.score_init)
    report = {
        "probe_accuracy": probe_accuracy,
        "probe_bytes": probe_bytes,
        "class_coverage": coverage,
        "weight_digest": model.weight_digest(),
    }
    return SimulationState(model, shards, test, global_state), report


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------

def _participants(config: ExperimentConfig, t: int) -> List[int]:
    rng = np.random.default_rng(_seed(config.run.seed, ROLE_CLIENTS, t))
    chosen = rng.choice(config.federation.clients, size=config.participants, replace=False)
    return sorted(int(c) for c in chosen)


def _client_step(client: int, state: SimulationState, config: ExperimentConfig, t: int,
                 m_server: BinaryMask, kappa: float, dense: bool) -> _ClientResult:
    seed = config.run.seed
    theta = client_update(state.global_state.probability_mask(), state.model, state.shards[client],
                          epochs=config.federation.local_epochs, lr=config.training.lr,
                          seed=_seed(seed, ROLE_TRAIN, t, client),
                          batch_size=config.training.batch_size)
    # same public uniforms as the server mask, so m_client only differs where θ moved across u
    m_client = sample_mask(theta, seed, round=t)
    if dense:
        return _ClientResult(client, theta.probabilities, encode_dense(m_client, t).to_bytes(),
                             int(np.count_nonzero(m_client.bits != m_server.bits)), m_client.d, False)

    delta = delta_indices(m_server, m_client)
    global_theta = state.global_state.theta
    if config.kappa.ranking == "random":
        ranked = rank_random(delta, theta, global_theta, kappa, _seed(seed, ROLE_RANK, t, client))
    else:
        ranked = rank_topk(delta, theta, global_theta, kappa)

    if config.protocol.bypass_codec:
        wire = ranked.indices.astype("<i8").tobytes()
        return _ClientResult(client, theta.probabilities, wire, delta.size, len(ranked), False)

    spec = FilterSpec(config.filter.bits_per_entry, config.filter.arity, config.filter.layout)
    try:
        update = encode_update(ranked, m_client.d, spec, _seed(seed, ROLE_FILTER, t, client), round=t)
    except ConstructionFailed as e:
        logger.warning(f"Client {client} round {t}: {str(e)}, sending dense mask instead")
        return _ClientResult(client, theta.probabilities, encode_dense(m_client, t).to_bytes(),
                             delta.size, m_client.d, True)
    wire = update.to_bytes()
    dense_size = DENSE_HEADER_SIZE + math.ceil(m_client.d / 8)
    if config.protocol.size_fallback and len(wire) >= dense_size:
        logger.debug(f"Client {client} round {t}: filter needs {len(wire)} bytes, dense mask {dense_size}")
        return _ClientResult(client, theta.probabilities, encode_dense(m_client, t).to_bytes(),
                             delta.size, m_client.d, True)
    logger.debug(f"Client {client} round {t}: |Δ|={delta.size} |Δ'|={len(ranked)} -> {len(wire)} bytes")
    return _ClientResult(client, theta.probabilities, wire, delta.size, len(ranked), False)


def _server_decode(result: _ClientResult, m_server: BinaryMask, bypass: bool) -> Tuple[BinaryMask, int]:
    """Reconstructed client mask and the number of spurious flips"""
    if bypass:
        flips = np.frombuffer(result.wire, dtype="<i8")
        return reconstruct_mask(m_server, flips), 0
    update = read_update(result.wire)
    if isinstance(update, DenseUpdate):
        return decode_dense(update), 0
    flips = decode_update(update)
    return reconstruct_mask(m_server, flips), int(flips.size) - result.retained


def _eval_mask(theta: np.ndarray, config: ExperimentConfig, t: int) -> BinaryMask:
    if config.protocol.eval_mode == "threshold":
        return BinaryMask(theta >= 0.5)
    return sample_mask(theta, _seed(config.run.seed, ROLE_EVAL), round=t)


def _round(state: SimulationState, config: ExperimentConfig, t: int,
           dense: bool) -> Tuple[SimulationState, RoundMetrics, Dict[int, bytes]]:
    if t != state.global_state.round + 1:
        raise ValueError(f"Round {t} does not follow round {state.global_state.round}")
    rounds = config.federation.rounds
    kappa = kappa_schedule(min(t - 1, max(rounds - 1, 0)), rounds, config.kappa.start,
                           config.kappa.end, config.kappa.mode)
    clients = _participants(config, t)
    # public server mask: every party derives it from (master seed, t)
    m_server = sample_mask(state.global_state.theta, config.run.seed, round=t)
    bypass = config.protocol.bypass_codec and not dense

    with ThreadPoolExecutor(max_workers=config.federation.workers) as executor:
        results = list(executor.map(
            lambda c: _client_step(c, state, config, t, m_server, kappa, dense), clients))
        decoded = list(executor.map(lambda r: _server_decode(r, m_server, bypass), results))

    masks = [mask for mask, _ in decoded]
    global_state = bayes_agg(masks, state.global_state)

    d = state.model.d
    sizes = [0 if bypass else len(r.wire) for r in results]
    client_bpp = tuple(8.0 * size / d for size in sizes)
    round_bytes = int(sum(sizes))
    cumulative = state.cumulative_bytes + round_bytes

    bound_empirical = bound = None
    if config.protocol.check_bound:
        report = verify_error_bound(np.stack([r.theta for r in results]), config.protocol.bound_trials,
                                    None if dense else config.filter.bits_per_entry,
                                    _seed(config.run.seed, ROLE_BOUND, t))
        bound_empirical, bound = report.empirical, report.bound
        if not report.passed:
            logger.warning(f"Round {t}: empirical error {report.empirical:.4f} exceeds bound {report.bound:.4f}")

    accuracy = evaluate(state.model, _eval_mask(global_state.theta, config, t), state.test)
    metrics = RoundMetrics(
        round=t,
        clients=tuple(clients),
        client_bpp=client_bpp,
        mean_bpp=float(np.mean(client_bpp)),
        round_bytes=round_bytes,
        cumulative_bytes=cumulative,
        accuracy=accuracy,
        kappa=kappa,
        mean_delta=float(np.mean([r.delta for r in results])),
        mean_delta_prime=float(np.mean([r.retained for r in results])),
        spurious_flips=int(sum(s for _, s in decoded)),
        dense_fallbacks=sum(r.fallback for r in results),
        bound_empirical=bound_empirical,
        bound=bound,
    )
    logger.info(f"Round {t}/{rounds}: accuracy={accuracy:.4f} mean_bpp={metrics.mean_bpp:.4f} "
                f"|Δ|={metrics.mean_delta:.1f} |Δ'|={metrics.mean_delta_prime:.1f}")
    new_state = replace(state, global_state=global_state, cumulative_bytes=cumulative)
    return new_state, metrics, {r.client: r.wire for r in results}


def run_round(state: SimulationState, config: ExperimentConfig, t: int) -> Tuple[SimulationState, RoundMetrics]:
    """One delta-coded round; t is the 1-based round number"""
    new_state, metrics, _ = _round(state, config, t, dense=False)
    return new_state, metrics


def dense_baseline_round(state: SimulationState, config: ExperimentConfig,
                         t: int) -> Tuple[SimulationState, RoundMetrics]:
    """Same training, but every client uploads its full packed binary mask"""
    new_state, metrics, _ = _round(state, config, t, dense=True)
    return new_state, metrics


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------

def _summary(config: ExperimentConfig, state: SimulationState, metrics: Sequence[RoundMetrics],
             report: Dict[str, object]) -> Dict[str, object]:
    d = state.model.d
    client_rounds = sum(len(m.clients) for m in metrics)
    total_bytes = int(sum(m.round_bytes for m in metrics))
    float_bytes = client_rounds * d * FLOAT32_BYTES
    return {
        "mode": config.protocol.mode,
        "rounds": len(metrics),
        "final_round": state.global_state.round,
        "d": d,
        "probe_accuracy": report["probe_accuracy"],
        "final_accuracy": metrics[-1].accuracy if metrics else report["probe_accuracy"],
        "avg_bpp": float(np.mean([m.mean_bpp for m in metrics])) if metrics else 0.0,
        "total_bytes": total_bytes,
        "probe_bytes": report["probe_bytes"],
        "relative_volume": total_bytes / float_bytes if float_bytes else 0.0,
        "class_coverage": report["class_coverage"],
        "dense_fallbacks": int(sum(m.dense_fallbacks for m in metrics)),
        "spurious_flips": int(sum(m.spurious_flips for m in metrics)),
        "weight_digest": report["weight_digest"],
        "weight_digest_end": state.model.weight_digest(),
    }


def run_experiment(config: ExperimentConfig, resume: Optional[GlobalState] = None,
                   on_round: Optional[Callable[[RoundMetrics], None]] = None) -> ExperimentResult:
    """
    Head initialisation followed by rounds 1..R.

    Args:
        config: validated experiment configuration
        resume: global state loaded from a checkpoint; rounds already
            completed are skipped
        on_round: called with each round's metrics as soon as it finishes

    Returns:
        ExperimentResult with per-round metrics, final state and summary
    """
    state, report = setup_experiment(config)
    if resume is not None:
        if resume.d != state.model.d:
            raise ValueError(f"Checkpoint has d={resume.d}, configured model has d={state.model.d}")
        state = replace(state, global_state=resume)
        logger.info(f"Resuming after round {resume.round}")

    dense = config.protocol.mode == "dense"
    metrics: List[RoundMetrics] = []
    uploads: Dict[int, bytes] = {}
    for t in range(state.global_state.round + 1, config.federation.rounds + 1):
        state, round_metrics, uploads = _round(state, config, t, dense=dense)
        metrics.append(round_metrics)
        if on_round:
            on_round(round_metrics)

    summary = _summary(config, state, metrics, report)
    logger.info(f"Finished: accuracy={summary['final_accuracy']:.4f} avg_bpp={summary['avg_bpp']:.4f} "
                f"total_bytes={summary['total_bytes']}")
    return ExperimentResult(metrics, state, summary, uploads)
