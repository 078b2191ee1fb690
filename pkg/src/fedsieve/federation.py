"""The federated training loop: broadcast the global weights, run every
client's local update, screen clients on cadence, and aggregate the
survivors' weights (size-weighted mean).

Screened-out clients keep training and keep receiving the global model;
they are only barred from aggregation, and a later screen run may clear
them again.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import ExperimentConfig
from .data import ClientKind, ClientProfile, Sample, filter_digits, inject_backdoor, \
    load_idx, make_backdoor_test_set, make_synthetic_digits, partition
from .defense import AbcDiagnostics, DefenseConfig, run_abc
from .errors import AggregationImpossibleError, CapacityError, NumericFailureError, \
    RejectedInputError
from .metrics import DetectionReport, RoundRecord, backdoor_success_rate, main_accuracy
from .seeding import STREAM_INIT, STREAM_PARTITION, STREAM_POOL, STREAM_TEST, \
    STREAM_TRAIN, substream

logger = logging.getLogger(__name__)

# After this many consecutive screen runs with a degenerate clustering
# (everything in one cluster, or all singletons) a calibration warning is
# logged once per experiment.
DEGENERATE_RUN_LIMIT = 5


@dataclass(frozen=True)
class Hyperparams:
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.001
    total_rounds: int = 30
    abc_cadence: int | None = 3
    optimizer: str = "adam"
    reset_optimizer_each_round: bool = False

    def __post_init__(self) -> None:
        if self.local_epochs < 0 or self.total_rounds < 0:
            raise RejectedInputError("epoch and round counts must be non-negative")
        if self.batch_size < 1:
            raise RejectedInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise RejectedInputError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.abc_cadence is not None and self.abc_cadence < 1:
            raise RejectedInputError(f"abc_cadence must be >= 1 or None, got {self.abc_cadence}")
        if self.optimizer not in ("adam", "sgd"):
            raise RejectedInputError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer}")


@dataclass
class RoundState:
    round_index: int
    global_params: nn.ModelParams
    detected: frozenset[int]
    adam_states: dict[int, nn.AdamState] = field(default_factory=dict)


def client_update(w: nn.ModelParams, client: ClientProfile, hyper: Hyperparams,
                  state: nn.AdamState, model: nn.ModelConfig,
                  rng: np.random.Generator | None = None) -> tuple[nn.ModelParams, nn.AdamState]:
    """Local training: ``local_epochs`` passes of mini-batch updates
    starting from ``w``.  ``w`` itself is never modified."""
    if not client.dataset:
        raise RejectedInputError(f"client {client.id} has an empty dataset")
    params = w.copy()
    if hyper.local_epochs == 0:
        return params, state
    images = np.stack([s.image for s in client.dataset])
    labels = np.array([s.label for s in client.dataset])
    n = len(client.dataset)
    for _ in range(hyper.local_epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            grads = nn.backward(params, images[idx], labels[idx], model)
            if hyper.optimizer == "adam":
                params, state = nn.adam_step(params, grads, state, hyper.learning_rate)
            else:
                params = nn.sgd_step(params, grads, hyper.learning_rate)
    return params, state


def aggregate(updates: list[tuple[int, nn.ModelParams, int]],
              detected: frozenset[int] | set[int]) -> nn.ModelParams:
    """Size-weighted mean over the non-detected clients only.

    Weights are n_k over the benign total, so they sum to 1 regardless of
    how many clients were excluded.  Computed as base + sum(a_i * (w_i -
    base)), which returns identical inputs exactly and never reads a
    detected client's tensors.
    """
    benign = sorted(((cid, p, nk) for cid, p, nk in updates if cid not in detected),
                    key=lambda u: u[0])
    if not benign:
        raise AggregationImpossibleError("every client is detected; nothing to aggregate")
    total = sum(nk for _, _, nk in benign)
    base = benign[0][1]
    acc = {k: base[k].copy() for k in nn.PARAM_KEYS}
    for _, params, nk in benign[1:]:
        weight = nk / total
        for k in nn.PARAM_KEYS:
            acc[k] += weight * (params[k] - base[k])
    return nn.ModelParams(acc)


def run_round(state: RoundState, clients: list[ClientProfile], hyper: Hyperparams,
              model: nn.ModelConfig, defense: DefenseConfig,
              seed: int) -> tuple[RoundState, AbcDiagnostics | None]:
    """Execute one global round starting from ``state`` and return the new
    state plus the screen diagnostics when the screen ran this round."""
    t_next = state.round_index + 1
    updates: list[tuple[int, nn.ModelParams, int]] = []
    new_states: dict[int, nn.AdamState] = {}
    for client in sorted(clients, key=lambda c: c.id):
        prev = state.adam_states.get(client.id)
        if prev is None or hyper.reset_optimizer_each_round:
            prev = nn.init_adam_state(model)
        rng = substream(seed, STREAM_TRAIN, t_next, client.id)
        params, opt_state = client_update(state.global_params, client, hyper, prev, model, rng)
        updates.append((client.id, params, len(client.dataset)))
        new_states[client.id] = opt_state

    detected = state.detected
    diagnostics = None
    if hyper.abc_cadence is not None and t_next % hyper.abc_cadence == 0:
        result = run_abc([(cid, p) for cid, p, _ in updates],
                         state.global_params, set(detected), model, defense)
        detected = frozenset(result.flagged)
        diagnostics = result.diagnostics

    try:
        new_global = aggregate(updates, detected)
    except AggregationImpossibleError:
        logger.warning("round %d: all %d clients detected; keeping previous global weights",
                       t_next, len(updates))
        new_global = state.global_params.copy()
    if not new_global.all_finite():
        raise NumericFailureError(f"non-finite global weights after round {t_next}")

    return RoundState(t_next, new_global, detected, new_states), diagnostics


# ---------------------------------------------------------------------------
# whole experiments


@dataclass
class ExperimentRun:
    records: list[RoundRecord]
    diagnostics: list[tuple[int, AbcDiagnostics]]  # (round, diagnostics)
    final_params: nn.ModelParams
    ground_truth_malicious: frozenset[int]
    client_kinds: dict[int, ClientKind]


def build_datasets(config: ExperimentConfig) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """(training pool, clean test set, backdoor test set) for a config."""
    trigger = config.trigger_config()
    pool_size = config.n_clients * config.samples_per_client
    if config.dataset_source == "synthetic":
        pool = make_synthetic_digits(pool_size, substream(config.seed, STREAM_POOL, 0),
                                     config.image_size)
        clean_test = make_synthetic_digits(config.clean_test_size,
                                           substream(config.seed, STREAM_POOL, 1),
                                           config.image_size)
        bd_rng = substream(config.seed, STREAM_POOL, 2)
        ones = make_synthetic_digits(config.backdoor_test_size, bd_rng, config.image_size,
                                     labels=np.full(config.backdoor_test_size,
                                                    trigger.source_label))
        backdoor_test = [inject_backdoor(s, bd_rng, trigger) for s in ones]
        return pool, clean_test, backdoor_test

    data_dir = config.resolved_data_dir()
    train = filter_digits(load_idx(data_dir / config.train_images,
                                   data_dir / config.train_labels), config.max_label)
    test = filter_digits(load_idx(data_dir / config.test_images,
                                  data_dir / config.test_labels), config.max_label)
    if len(train) < pool_size:
        raise CapacityError(f"training pool: required {pool_size}, available {len(train)}")
    rng = substream(config.seed, STREAM_POOL, 0)
    pool = [train[i] for i in rng.choice(len(train), size=pool_size, replace=False)]
    if len(test) < config.clean_test_size:
        raise CapacityError(
            f"clean test set: required {config.clean_test_size}, available {len(test)}")
    test_rng = substream(config.seed, STREAM_POOL, 1)
    test_order = test_rng.permutation(len(test))
    clean_test = [test[i] for i in test_order[:config.clean_test_size]]
    held_out = [test[i] for i in test_order[config.clean_test_size:]]
    backdoor_test = make_backdoor_test_set(held_out, config.backdoor_test_size, trigger,
                                           substream(config.seed, STREAM_TEST))
    return pool, clean_test, backdoor_test


def run_experiment_detailed(config: ExperimentConfig) -> ExperimentRun:
    config.validate()
    model = config.model_config()
    defense = config.defense_config()
    hyper = Hyperparams(
        local_epochs=config.local_epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        total_rounds=config.total_rounds,
        abc_cadence=config.abc_cadence,
        optimizer=config.optimizer,
        reset_optimizer_each_round=config.reset_optimizer_each_round,
    )

    pool, clean_test, backdoor_test = build_datasets(config)
    profiles = partition(config, pool, substream(config.seed, STREAM_PARTITION))
    truth = frozenset(p.id for p in profiles if p.kind is ClientKind.MALICIOUS)
    all_ids = {p.id for p in profiles}

    params = nn.init_params(model, substream(config.seed, STREAM_INIT))
    state = RoundState(0, params, frozenset())
    records: list[RoundRecord] = []
    diagnostics: list[tuple[int, AbcDiagnostics]] = []
    degenerate_streak = 0
    warned = False
    for _ in range(config.total_rounds):
        state, diag = run_round(state, profiles, hyper, model, defense, config.seed)
        detection = None
        if diag is not None:
            diagnostics.append((state.round_index, diag))
            detection = DetectionReport.from_sets(set(state.detected), set(truth), all_ids)
            if diag.n_clusters in (1, len(profiles)):
                degenerate_streak += 1
            else:
                degenerate_streak = 0
            if degenerate_streak >= DEGENERATE_RUN_LIMIT and not warned:
                logger.warning(
                    "screen produced a degenerate clustering (%d clusters of %d clients) "
                    "for %d consecutive runs; the distance threshold looks miscalibrated",
                    diag.n_clusters, len(profiles), degenerate_streak)
                warned = True
        records.append(RoundRecord(
            round_index=state.round_index,
            main_accuracy=main_accuracy(state.global_params, clean_test, model),
            backdoor_success=backdoor_success_rate(state.global_params, backdoor_test, model),
            detection=detection,
        ))
    return ExperimentRun(
        records=records,
        diagnostics=diagnostics,
        final_params=state.global_params,
        ground_truth_malicious=truth,
        client_kinds={p.id: p.kind for p in profiles},
    )


def run_experiment(config: ExperimentConfig) -> list[RoundRecord]:
    """Per-round records for one experiment (see :class:`ExperimentRun`)."""
    return run_experiment_detailed(config).records
