"""Parameter-averaging baseline sharing the same trainer and report format."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .comms import CommLedger, EncodingModel, record_fedavg_round
from .datasets import ExperimentData
from .errors import ConfigError, FkdError
from .fkd import ExperimentReport, RoundMetrics, evaluate, parallel_map, train_teacher
from .nn.model import ModelState, init_model
from .nn.spec import ModelSpec
from .nn.train import OptimizerConfig
from .partition import Partition

log = logging.getLogger(__name__)

_GLOBAL_INIT, _CLIENT_FIT = 20, 21


@dataclass
class FedAvgConfig:
    model_spec: ModelSpec
    num_clients: int = 2
    rounds: int = 10
    local_epochs: int = 5
    num_classes: int = 3
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    weighting: str = "uniform"  # or "by_sample_count"
    encoding: EncodingModel = field(default_factory=EncodingModel)

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 1 or self.local_epochs < 0:
            raise ConfigError("num_clients and rounds must be >= 1, local_epochs >= 0")
        if self.weighting not in ("uniform", "by_sample_count"):
            raise ConfigError(f"weighting must be 'uniform' or 'by_sample_count', got {self.weighting!r}")


def average_states(states: list[ModelState], weights=None) -> ModelState:
    """Weighted elementwise mean of every parameter, BN moving stats included.

    Summation runs in list order (ascending client id).
    """
    k = len(states)
    weights = [1.0 / k] * k if weights is None else list(weights)
    merged = states[0].copy()
    merged.velocity = {}
    for group in ("params", "buffers"):
        target = getattr(merged, group)
        for name in target:
            acc = np.zeros_like(target[name])
            for w, st in zip(weights, states):
                acc = acc + w * getattr(st, group)[name]
            target[name] = acc
    return merged


def fedavg_round(global_model: ModelState, partition: Partition, data: ExperimentData,
                 cfg: FedAvgConfig, round_: int = 1, threads: int = 1):
    """One round: clients copy the global model, train locally, server averages.

    Returns ``(new_global, per-client final-epoch losses)``.
    """
    if partition.num_clients != cfg.num_clients:
        raise ConfigError(f"partition has {partition.num_clients} clients, config wants {cfg.num_clients}")
    pool = data.private_pool

    def local(cid):
        client = global_model.copy()
        client.velocity = {}
        try:
            _, losses = train_teacher(client, pool.subset(partition.assignments[cid]), cfg.local_epochs,
                                      cfg.optimizer, [cfg.seed, _CLIENT_FIT, cid, round_], cfg.num_classes,
                                      f"client{cid}")
        except FkdError as exc:
            raise type(exc)(f"round {round_}, client{cid}: {exc}") from exc
        return client, (losses[-1] if losses else float("nan"))

    results = parallel_map(local, list(range(cfg.num_clients)), threads)
    if cfg.weighting == "by_sample_count":
        sizes = partition.sizes()
        total = sum(sizes)
        weights = [n / total for n in sizes]
    else:
        weights = [1.0 / cfg.num_clients] * cfg.num_clients
    return average_states([c for c, _ in results], weights), [float(l) for _, l in results]


def run_fedavg_experiment(cfg: FedAvgConfig, data: ExperimentData, partition: Partition,
                          threads: int = 1) -> ExperimentReport:
    model = init_model(cfg.model_spec, seed=[cfg.seed, _GLOBAL_INIT])
    ledger = CommLedger()
    history = []
    for rnd in range(1, cfg.rounds + 1):
        model, losses = fedavg_round(model, partition, data, cfg, rnd, threads)
        record_fedavg_round(ledger, rnd, cfg.num_clients, cfg.model_spec, cfg.encoding)
        acc, test_loss = evaluate(model, data.test_set, cfg.num_classes)
        up = sum(e.bytes for e in ledger.entries if e.round == rnd and e.direction == "upload")
        down = sum(e.bytes for e in ledger.entries if e.round == rnd and e.direction == "download")
        history.append(RoundMetrics(rnd, losses, acc, test_loss, up, down))
        log.info("fedavg round %d: global acc %.4f", rnd, acc)
    return ExperimentReport("fedavg", history, ledger, model)
