"""Episodic meta-training: query NLL through the solve, Adam on the field.

Each training episode mean-initializes prototypes, integrates the learned
flow, classifies the query set, and back-propagates the query NLL through
the unrolled solver into the network parameters.  Updates use Adam with
decoupled weight decay and a step learning-rate schedule.

Randomness is organized around one root seed: parameter initialization
and every episode draw get their own spawned seed sequence, so runs are
bit-reproducible and episode order never entangles streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .episodes import MODES, FeatureDataset, sample_episode
from .errors import DivergenceError
from .gradnet import GradNetConfig, GradNetParams, init_gradnet, named_parameters
from .odeflow import SolveConfig, rectify
from .protoclassify import DEFAULT_GAMMA, classify, nll_loss

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Episode shape, optimizer hyperparameters, schedule, and solver."""

    epochs: int = 15
    episodes_per_epoch: int = 200
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15
    mode: str = "transductive"
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (15, 30, 40)
    seed: int = 0
    solver: SolveConfig = field(
        default_factory=lambda: SolveConfig(method="rk4", integral_time=40.0,
                                            num_steps=10))
    val_episodes: int = 60

    def __post_init__(self):
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ValueError("need epochs >= 0 and at least one episode per epoch")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        object.__setattr__(self, "lr_decay_epochs", tuple(self.lr_decay_epochs))


@dataclass
class AdamState:
    """First/second moment buffers per parameter name, plus counters."""

    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    learning_rate: float
    mean_loss: float
    val_accuracy: float
    divergences: int


@dataclass
class TrainResult:
    params: GradNetParams
    config: GradNetConfig
    log: list[EpochRecord]
    divergences: int
    skipped_updates: int


def episode_loss(params: GradNetParams, net_cfg: GradNetConfig, ep,
                 solve_cfg: SolveConfig, mode: str | None = None,
                 gamma: float = DEFAULT_GAMMA) -> nx.Tensor:
    """Query NLL after flowing the prototypes; differentiable in params."""
    result = rectify(params, net_cfg, ep, mode=mode, solve_cfg=solve_cfg)
    probs = classify(ep.query_features, result.final_tensor, gamma)
    return nll_loss(probs, ep.query_labels)


def adam_step(named: list[tuple[str, nx.Tensor]], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    If any gradient is non-finite the whole update is skipped and counted;
    parameters are mutated in place otherwise.
    """
    for name, _ in named:
        g = grads.get(name)
        if g is None or not np.isfinite(g).all():
            state.skipped += 1
            return
    state.step += 1
    bias1 = 1.0 - ADAM_BETA1 ** state.step
    bias2 = 1.0 - ADAM_BETA2 ** state.step
    for name, tensor in named:
        g = grads[name]
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(tensor.values)
            v = np.zeros_like(tensor.values)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        state.first[name] = m
        state.second[name] = v
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPSILON)
        tensor.values -= lr * (update + weight_decay * tensor.values)


def _episode_seed(root: int, stream: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=root, spawn_key=(stream, *key))
    return np.random.Generator(np.random.PCG64(seq))


def initial_params(net_cfg: GradNetConfig, cfg: TrainConfig) -> GradNetParams:
    """The parameters train() starts from for this seed."""
    return init_gradnet(net_cfg, seed=_episode_seed(cfg.seed, 0))


def _validation_accuracy(params: GradNetParams, net_cfg: GradNetConfig,
                         val_ds: FeatureDataset, cfg: TrainConfig,
                         epoch: int) -> float:
    hits = 0
    total = 0
    with nx.no_grad():
        for j in range(cfg.val_episodes):
            rng = _episode_seed(cfg.seed, 2, epoch, j)
            ep = sample_episode(val_ds, cfg.n_way, cfg.k_shot, cfg.m_query,
                                mode=cfg.mode, seed=rng)
            try:
                result = rectify(params, net_cfg, ep, solve_cfg=cfg.solver)
            except DivergenceError:
                continue
            probs = classify(ep.query_features, result.final_tensor).values
            hits += int(np.count_nonzero(probs.argmax(axis=1) == ep.query_labels))
            total += ep.query_labels.shape[0]
    return hits / total if total else float("nan")


def train(base: FeatureDataset, net_cfg: GradNetConfig, cfg: TrainConfig,
          val_ds: FeatureDataset | None = None) -> TrainResult:
    """Meta-train the flow network on episodes from the base split.

    Sequential over episodes; one Adam update per episode.  The log holds
    one record per epoch.  Bit-reproducible for a fixed seed.
    """
    params = initial_params(net_cfg, cfg)
    named = named_parameters(params)
    adam = AdamState()
    log: list[EpochRecord] = []
    divergences_total = 0
    lr = cfg.learning_rate
    for epoch in range(1, cfg.epochs + 1):
        if epoch in cfg.lr_decay_epochs:
            lr *= cfg.lr_decay_factor
        losses = []
        divergences = 0
        for i in range(cfg.episodes_per_epoch):
            rng = _episode_seed(cfg.seed, 1, epoch, i)
            ep = sample_episode(base, cfg.n_way, cfg.k_shot, cfg.m_query,
                                mode=cfg.mode, seed=rng)
            try:
                loss = episode_loss(params, net_cfg, ep, cfg.solver)
            except DivergenceError:
                divergences += 1
                continue
            for _, tensor in named:
                tensor.zero_adjoint()
            loss.backward()
            grads = {name: tensor.adjoint for name, tensor in named}
            adam_step(named, grads, adam, lr, cfg.weight_decay)
            losses.append(loss.item())
        divergences_total += divergences
        val_acc = (_validation_accuracy(params, net_cfg, val_ds, cfg, epoch)
                   if val_ds is not None else float("nan"))
        log.append(EpochRecord(
            epoch=epoch, learning_rate=lr,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            val_accuracy=val_acc, divergences=divergences))
    return TrainResult(params=params, config=net_cfg, log=log,
                       divergences=divergences_total, skipped_updates=adam.skipped)


def format_log(log: list[EpochRecord]) -> str:
    """Comma-separated training log, one record per epoch."""
    lines = ["# epoch,learning_rate,mean_loss,val_accuracy,divergences"]
    for rec in log:
        lines.append("%d,%.10g,%.10g,%.10g,%d" % (
            rec.epoch, rec.learning_rate, rec.mean_loss, rec.val_accuracy,
            rec.divergences))
    return "\n".join(lines) + "\n"
