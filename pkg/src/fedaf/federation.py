"""Round orchestration for FedAF and the FedAvg / FedProx / FedDM baselines."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .condensation import (
    ClassRows,
    ClientPayload,
    CondensedSet,
    SWDConfig,
    condense,
    init_condensed,
    mean_logit_rows,
    soft_labels,
)
from .data import ClientShard, LabeledDataset, normalize
from .model import Architecture, ModelParams, forward_logits, init, serialized_bytes
from .rng import stream, subseed
from .server import (
    GlobalKnowledge,
    ServerTrainConfig,
    aggregate_mean_logits,
    aggregate_soft_labels,
    evaluate,
    train_global,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("fedaf", "feddm", "fedavg", "fedprox")


class RoundAborted(RuntimeError):
    def __init__(self, round_index: int, client_id: int, cause: BaseException):
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause
        super().__init__(f"round {round_index}: client {client_id} failed: {cause!r}")


@dataclass(frozen=True)
class RoundConfig:
    algorithm: str = "fedaf"
    rounds: int = 20
    seed: int = 0
    workers: int = 1
    # condensation (fedaf / feddm)
    ipc: int = 50
    local_steps: int = 1000
    batch_real: int = 256
    image_lr: float = 1.0
    image_momentum: float = 0.9
    gamma: float = 0.9
    lam_loc: float = 1e-4
    lam_glob: float = 0.01
    tau: float = 1.0
    swd_projections: int = 64
    swd_p: float = 2.0
    swd_pooled: bool = False
    disable_cdc: bool = False
    disable_lgkm: bool = False
    # server training (fedaf / feddm)
    server_epochs: int = 500
    server_batch: int = 256
    server_lr: float = 0.001
    server_momentum: float = 0.9
    lgkm_every_batch: bool = False
    # local training (fedavg / fedprox)
    local_epochs: int = 10
    local_batch: int = 64
    local_lr: float = 0.01
    local_momentum: float = 0.9
    mu: float = 0.001

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.ipc < 1 or self.local_steps < 0 or self.workers < 1:
            raise ValueError("ipc >= 1, local_steps >= 0 and workers >= 1 are required")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")

    @property
    def effective_lam_loc(self) -> float:
        if self.algorithm == "feddm" or self.disable_cdc:
            return 0.0
        return self.lam_loc

    @property
    def effective_lam_glob(self) -> float:
        if self.algorithm == "feddm" or self.disable_lgkm:
            return 0.0
        return self.lam_glob


# ---------------------------------------------------------------- accounting

FLOAT_BYTES = 4
PIXEL_BYTES = 1


def model_bytes(arch: Architecture) -> int:
    return serialized_bytes(arch)


def image_bytes(count: int, image_shape) -> int:
    return PIXEL_BYTES * count * int(np.prod(image_shape))


def class_matrix_bytes(num_classes: int) -> int:
    return FLOAT_BYTES * num_classes * num_classes


def comm_cost(item, direction: str = "up") -> int:
    """Bytes needed to send ``item`` in ``direction`` ("up" = client to server).

    Models and logit/soft-label matrices are float32; condensed images are
    one byte per pixel per channel.
    """
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    if isinstance(item, Architecture):
        return model_bytes(item)
    if isinstance(item, ModelParams):
        return model_bytes(item.arch)
    if isinstance(item, ClassRows):
        return item.nbytes
    if isinstance(item, CondensedSet):
        return item.nbytes
    if isinstance(item, ClientPayload):
        if direction != "up":
            raise ValueError("client payloads only travel upstream")
        total = item.condensed.nbytes
        for rows in (item.mean_logits, item.soft_labels):
            if rows is not None:
                total += rows.nbytes
        return total
    raise TypeError(f"no byte accounting for {type(item).__name__}")


def to_megabytes(nbytes: int, binary: bool = True) -> float:
    return nbytes / (2**20 if binary else 10**6)


# ---------------------------------------------------------------- state


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    client_loss: dict[int, float]
    up_bytes: dict[int, int]
    down_bytes: dict[int, int]
    server_loss: float | None = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def mean_client_loss(self) -> float:
        return float(np.mean(list(self.client_loss.values())))


@dataclass
class FederationState:
    cfg: RoundConfig
    train: LabeledDataset
    test: LabeledDataset
    shards: list[ClientShard]
    params: ModelParams
    round: int = 0
    condensed: dict[int, CondensedSet] = field(default_factory=dict)
    knowledge: GlobalKnowledge | None = None
    records: list[RoundRecord] = field(default_factory=list)
    _client_data: dict = field(default_factory=dict, repr=False)

    def client_classes(self, k: int) -> dict[int, np.ndarray]:
        """Normalized real images of client ``k`` keyed by owned class."""
        if k not in self._client_data:
            shard = self.shards[k]
            x = normalize(self.train.images[shard.indices])
            y = self.train.labels[shard.indices]
            self._client_data[k] = {c: x[y == c] for c in shard.owned_classes()}
        return self._client_data[k]


def new_state(cfg: RoundConfig, arch: Architecture, train, test, shards) -> FederationState:
    if arch.num_classes != train.num_classes:
        raise ValueError("architecture and dataset disagree on the class count")
    params = init(arch, subseed(cfg.seed, "global-init"))
    return FederationState(cfg, train, test, list(shards), params)


def _map_clients(state: FederationState, fn: Callable[[int], object], round_index: int) -> list:
    """Run ``fn`` for every client; results come back in client-id order."""
    ids = [s.client_id for s in state.shards]

    def guarded(k):
        try:
            return fn(k)
        except Exception as exc:  # abort the whole round, no partial aggregation
            raise RoundAborted(round_index, k, exc) from exc

    if state.cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=state.cfg.workers) as pool:
            return list(pool.map(guarded, ids))
    return [guarded(k) for k in ids]


# ---------------------------------------------------------------- condensed-data rounds


def _client_mean_logits(state: FederationState, k: int) -> ClassRows:
    return mean_logit_rows(state.params, state.client_classes(k))


def run_fedaf_round(state: FederationState) -> FederationState:
    """One round of aggregation-free training.

    Clients first report class-mean logits of their real data under the
    current global model; the server averages them and broadcasts the result
    with the model.  Clients then refine their condensed sets and upload them
    with their soft labels, and the server trains the global model on the
    pooled condensed data.
    """
    cfg = state.cfg
    r = state.round + 1
    t0 = time.perf_counter()
    lam_loc, lam_glob = cfg.effective_lam_loc, cfg.effective_lam_glob
    use_cdc, use_lgkm = lam_loc != 0, lam_glob != 0
    arch = state.params.arch

    local_logits: list[ClassRows | None] = [None] * len(state.shards)
    global_logits = None
    if use_cdc or use_lgkm:
        local_logits = _map_clients(state, lambda k: _client_mean_logits(state, k), r)
    if use_cdc:
        probe = [ClientPayload(k, CondensedSet(k, {}), state.shards[k].class_counts, mean_logits=v)
                 for k, v in enumerate(local_logits)]
        global_logits, _ = aggregate_mean_logits(probe)

    swd = SWDConfig(cfg.swd_projections, cfg.swd_p, cfg.swd_pooled)

    def client(k: int) -> ClientPayload:
        real = state.client_classes(k)
        cset = state.condensed.get(k)
        if cset is None:
            cset = init_condensed(k, real, cfg.ipc, subseed(cfg.seed, "init-condensed"))
        cset, trace = condense(
            cset,
            real,
            state.params,
            global_logits,
            steps=cfg.local_steps,
            batch_real=cfg.batch_real,
            image_lr=cfg.image_lr,
            momentum=cfg.image_momentum,
            gamma=cfg.gamma,
            lam_loc=lam_loc,
            swd=swd,
            seed=subseed(cfg.seed, "condense", r, k),
        )
        v = local_logits[k]
        return ClientPayload(
            k,
            cset,
            state.shards[k].class_counts.copy(),
            mean_logits=v if use_cdc else None,
            soft_labels=soft_labels(v, cfg.tau) if use_lgkm else None,
            stats={"loss": trace[-1] if trace else 0.0},
        )

    payloads = _map_clients(state, client, r)

    soft = None
    label_counts = None
    if use_lgkm:
        soft, label_counts = aggregate_soft_labels(payloads)
    # the server sees what went over the wire: byte-quantized pixels
    wire = [p.condensed.as_bytes() for p in payloads]
    images = normalize(np.concatenate([x for x, _ in wire]))
    labels = np.concatenate([y for _, y in wire])
    server_cfg = ServerTrainConfig(
        epochs=cfg.server_epochs,
        batch_size=cfg.server_batch,
        lr=cfg.server_lr,
        momentum=cfg.server_momentum,
        lam_glob=lam_glob,
        tau=cfg.tau,
        lgkm_every_batch=cfg.lgkm_every_batch,
    )
    params, trace = train_global(state.params, images, labels, soft, server_cfg, seed=subseed(cfg.seed, "server", r))
    acc = evaluate(params, state.test.images, state.test.labels)

    down = model_bytes(arch) + (global_logits.nbytes if use_cdc else 0)
    record = RoundRecord(
        round=r,
        accuracy=acc,
        client_loss={p.client_id: float(p.stats["loss"]) for p in payloads},
        up_bytes={p.client_id: comm_cost(p, "up") for p in payloads},
        down_bytes={p.client_id: down for p in payloads},
        server_loss=trace[-1] if trace else None,
        wall_time=time.perf_counter() - t0,
    )
    return replace(
        state,
        params=params,
        round=r,
        condensed={p.client_id: p.condensed for p in payloads},
        knowledge=GlobalKnowledge(global_logits, soft, None, label_counts),
        records=state.records + [record],
    )


def run_feddm_round(state: FederationState) -> FederationState:
    """FedAF with both the logit-alignment and soft-label terms switched off."""
    if state.cfg.algorithm != "feddm":
        state = replace(state, cfg=replace(state.cfg, lam_loc=0.0, lam_glob=0.0))
    return run_fedaf_round(state)


# ---------------------------------------------------------------- weight-averaging rounds


def _local_train(state: FederationState, k: int, r: int, mu: float) -> tuple[list[Tensor], float]:
    cfg = state.cfg
    shard = state.shards[k]
    x = normalize(state.train.images[shard.indices])
    y = state.train.labels[shard.indices]
    anchor = state.params.values()
    values = list(anchor)
    velocity = None
    rng = stream(cfg.seed, "local-train", r, k)
    losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(y), cfg.local_batch):
            idx = order[start : start + cfg.local_batch]
            current = state.params.with_values(values)
            with Tape() as tape:
                tape.watch(*values)
                loss = ag.cross_entropy(forward_logits(current, x[idx]), y[idx])
                if mu > 0:
                    prox = [ag.squared_l2(w, w0) for w, w0 in zip(values, anchor)]
                    loss = ag.scalar_combine([loss] + prox, [1.0] + [mu / 2] * len(prox))
            grads = tape.gradient(loss, values)
            values, velocity = ag.sgd_momentum_step(values, grads, cfg.local_lr, cfg.local_momentum, velocity)
            losses.append(loss.item())
    return values, float(np.mean(losses)) if losses else 0.0


def weighted_average(weight_sets: list[list[np.ndarray]], sizes: list[int]) -> list[np.ndarray]:
    """``sum_k p_k w_k`` with ``p_k = n_k / sum n``, reduced in list order."""
    total = float(sum(sizes))
    if total <= 0:
        raise ValueError("weighted_average: total size must be positive")
    out = []
    for layer in zip(*weight_sets):
        acc = np.zeros(layer[0].shape, dtype=np.float64)
        for w, n in zip(layer, sizes):
            acc += (n / total) * w.astype(np.float64)
        out.append(acc.astype(layer[0].dtype))
    return out


def _averaging_round(state: FederationState, mu: float) -> FederationState:
    r = state.round + 1
    t0 = time.perf_counter()
    results = _map_clients(state, lambda k: _local_train(state, k, r, mu), r)
    sizes = [len(state.shards[k]) for k in range(len(state.shards))]
    averaged = weighted_average([[t.data for t in vals] for vals, _ in results], sizes)
    params = state.params.with_values([Tensor(a) for a in averaged])
    acc = evaluate(params, state.test.images, state.test.labels)
    nbytes = model_bytes(params.arch)
    ids = [s.client_id for s in state.shards]
    record = RoundRecord(
        round=r,
        accuracy=acc,
        client_loss={k: loss for k, (_, loss) in zip(ids, results)},
        up_bytes={k: nbytes for k in ids},
        down_bytes={k: nbytes for k in ids},
        wall_time=time.perf_counter() - t0,
    )
    return replace(state, params=params, round=r, records=state.records + [record])


def run_fedavg_round(state: FederationState) -> FederationState:
    """Clients fine-tune the global model by CE; the server takes the size-weighted mean."""
    return _averaging_round(state, 0.0)


def run_fedprox_round(state: FederationState) -> FederationState:
    """FedAvg with ``(mu/2) * ||w - w_global||^2`` added to every local loss."""
    return _averaging_round(state, state.cfg.mu)


ROUND_FUNCTIONS = {
    "fedaf": run_fedaf_round,
    "feddm": run_feddm_round,
    "fedavg": run_fedavg_round,
    "fedprox": run_fedprox_round,
}


# ---------------------------------------------------------------- full runs


@dataclass
class RunResult:
    records: list[RoundRecord]
    seeds: dict
    final_params: ModelParams | None = field(default=None, compare=False)

    @property
    def accuracies(self) -> list[float]:
        return [rec.accuracy for rec in self.records]

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].accuracy

    @property
    def best_accuracy(self) -> float:
        return max(self.accuracies)

    @property
    def total_up_bytes(self) -> int:
        return sum(sum(rec.up_bytes.values()) for rec in self.records)

    @property
    def total_down_bytes(self) -> int:
        return sum(sum(rec.down_bytes.values()) for rec in self.records)

    def metric_rows(self) -> list[tuple[int, str, str, float]]:
        """Long-format ``(round, metric, client, value)`` rows; client is "" for global metrics."""
        rows = []
        for rec in self.records:
            rows.append((rec.round, "accuracy", "", rec.accuracy))
            rows.append((rec.round, "mean_client_loss", "", rec.mean_client_loss))
            if rec.server_loss is not None:
                rows.append((rec.round, "server_loss", "", rec.server_loss))
            for k in sorted(rec.client_loss):
                rows.append((rec.round, "client_loss", str(k), rec.client_loss[k]))
            for k in sorted(rec.up_bytes):
                rows.append((rec.round, "up_bytes", str(k), rec.up_bytes[k]))
            for k in sorted(rec.down_bytes):
                rows.append((rec.round, "down_bytes", str(k), rec.down_bytes[k]))
        return rows


def simulate(
    cfg: RoundConfig,
    arch: Architecture,
    train: LabeledDataset,
    test: LabeledDataset,
    shards: list[ClientShard],
    on_round: Callable[[FederationState], None] | None = None,
) -> RunResult:
    """Run ``cfg.rounds`` rounds of ``cfg.algorithm`` from a fresh global model."""
    state = new_state(cfg, arch, train, test, shards)
    step = ROUND_FUNCTIONS[cfg.algorithm]
    for _ in range(cfg.rounds):
        state = step(state)
        rec = state.records[-1]
        log.info("%s round %d: accuracy %.4f (%.1fs)", cfg.algorithm, rec.round, rec.accuracy, rec.wall_time)
        if on_round is not None:
            on_round(state)
    seeds = {"run": cfg.seed, "global_init": subseed(cfg.seed, "global-init")}
    return RunResult(state.records, seeds, state.params)


def round_config_fields() -> dict:
    return asdict(RoundConfig())
