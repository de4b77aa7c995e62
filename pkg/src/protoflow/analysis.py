"""Evaluation protocol and diagnostics for rectified prototypes.

Accuracy over many sampled episodes with a normal-approximation 95%
confidence interval, plus three lenses on why rectification helps: how
close initial and flowed prototypes sit to the all-sample prototypes, how
well the averaged and the inferred update directions agree with the
all-sample gradient, and how endpoint accuracy moves with integral time.

Episode draws are keyed by (protocol seed, episode index), so reports are
deterministic and independent of thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .episodes import MODES, FeatureDataset, sample_episode
from .errors import DegenerateVectorError
from .gradnet import GradNetConfig, GradNetParams, gradnet_forward
from .odeflow import SolveConfig, rectify
from .protoclassify import (averaged_gradient, classify, gda_optimize,
                            init_prototypes, nll_loss, real_prototypes)

METHODS = ("mean", "gda", "metanode")


@dataclass(frozen=True)
class EvalProtocol:
    """Episode shape and count for one evaluation run."""

    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15
    mode: str = "transductive"
    episodes: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("need at least one episode")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class EvalReport:
    num_episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    per_episode_accuracies: tuple[float, ...]
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.mean_accuracy <= 1.0:
            raise ValueError("mean accuracy out of range")
        if self.ci95_halfwidth < 0.0:
            raise ValueError("negative confidence half-width")
        if len(self.per_episode_accuracies) != self.num_episodes:
            raise ValueError("per-episode list length mismatch")


@dataclass(frozen=True)
class GradientBiasReport:
    sim_averaged: float
    sim_inferred: float
    episodes_used: int
    excluded: int


@dataclass(frozen=True)
class CurvePoint:
    time: float
    mean_accuracy: float
    ci95_halfwidth: float
    mean_loss: float


def _episode_rng(seed: int, index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.Generator(np.random.PCG64(seq))


def _draw(ds: FeatureDataset, protocol: EvalProtocol, index: int):
    return sample_episode(ds, protocol.n_way, protocol.k_shot,
                          protocol.m_query, mode=protocol.mode,
                          seed=_episode_rng(protocol.seed, index))


def _mean_ci(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    half = 1.96 * float(arr.std(ddof=1)) / float(np.sqrt(arr.size))
    return mean, half


def _prototype_builder(method, params, net_cfg, solve_cfg, gda_eta, gda_steps):
    if callable(method):
        return method
    if method == "mean":
        return init_prototypes
    if method == "gda":
        # descent differentiates the support loss, so no no_grad here
        return lambda ep: gda_optimize(init_prototypes(ep), ep.support_features,
                                       ep.support_labels, gda_eta, gda_steps)
    if method == "metanode":
        if params is None or net_cfg is None:
            raise ValueError("metanode evaluation needs trained parameters")

        def flowed(ep):
            with nx.no_grad():
                return rectify(params, net_cfg, ep, solve_cfg=solve_cfg).final

        return flowed
    raise ValueError(f"method must be callable or one of {METHODS}")


def evaluate(params: GradNetParams | None, net_cfg: GradNetConfig | None,
             ds: FeatureDataset, protocol: EvalProtocol,
             method="metanode", solve_cfg: SolveConfig = SolveConfig(),
             threads: int = 1, gda_eta: float = 0.1,
             gda_steps: int = 20) -> EvalReport:
    """Top-1 accuracy over sampled episodes, with a 95% CI half-width.

    ``method`` picks how prototypes are built per episode: the support
    mean, the descent baseline, the learned flow, or any callable mapping
    an episode to a PrototypeState.
    """
    build = _prototype_builder(method, params, net_cfg, solve_cfg,
                               gda_eta, gda_steps)

    def one(index: int) -> float:
        ep = _draw(ds, protocol, index)
        state = build(ep)
        with nx.no_grad():
            probs = classify(ep.query_features, state).values
        return float(np.mean(probs.argmax(axis=1) == ep.query_labels))

    indices = range(protocol.episodes)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accuracies = list(pool.map(one, indices))
    else:
        accuracies = [one(i) for i in indices]
    mean, half = _mean_ci(accuracies)
    return EvalReport(num_episodes=protocol.episodes, mean_accuracy=mean,
                      ci95_halfwidth=half,
                      per_episode_accuracies=tuple(accuracies))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def prototype_bias(params: GradNetParams, net_cfg: GradNetConfig,
                   ds: FeatureDataset, protocol: EvalProtocol,
                   solve_cfg: SolveConfig = SolveConfig()) -> tuple[float, float]:
    """Mean per-class cosine of initial and flowed prototypes to the
    all-sample prototypes: (sim_initial, sim_optimal)."""
    initial, optimal = [], []
    for index in range(protocol.episodes):
        ep = _draw(ds, protocol, index)
        real = real_prototypes(ep).prototypes
        p0 = init_prototypes(ep).prototypes
        with nx.no_grad():
            pm = rectify(params, net_cfg, ep, solve_cfg=solve_cfg).final.prototypes
        for k in range(ep.n_way):
            initial.append(_cosine(p0[k], real[k]))
            optimal.append(_cosine(pm[k], real[k]))
    return float(np.mean(initial)), float(np.mean(optimal))


def gradient_bias(params: GradNetParams, net_cfg: GradNetConfig,
                  ds: FeatureDataset, protocol: EvalProtocol,
                  integral_time: float = 40.0) -> GradientBiasReport:
    """Cosine agreement with the all-sample gradient at the initial point.

    The reference is the averaged gradient over support and query with
    true labels.  The support-only averaged gradient is compared to it
    directly; the learned field, which points where the prototypes should
    move (minus the gradient, up to scale), is compared to the reference's
    descent direction.  Episodes with any zero vector are excluded and
    counted.
    """
    sims_avg, sims_inf = [], []
    excluded = 0
    for index in range(protocol.episodes):
        ep = _draw(ds, protocol, index)
        state0 = init_prototypes(ep)
        all_features = np.concatenate([ep.support_features, ep.query_features])
        all_labels = np.concatenate([ep.support_labels, ep.query_labels])
        real = averaged_gradient(state0, all_features, all_labels).ravel()
        avg = averaged_gradient(state0, ep.support_features,
                                ep.support_labels).ravel()
        with nx.no_grad():
            flow = gradnet_forward(params, net_cfg, state0, ep,
                                   integral_time=integral_time).values.ravel()
        try:
            sims_avg.append(_cosine(avg, real))
            sims_inf.append(_cosine(flow, -real))
        except DegenerateVectorError:
            excluded += 1
            continue
    used = protocol.episodes - excluded
    if used == 0:
        raise DegenerateVectorError("every episode had a zero gradient")
    return GradientBiasReport(sim_averaged=float(np.mean(sims_avg)),
                              sim_inferred=float(np.mean(sims_inf)),
                              episodes_used=used, excluded=excluded)


def convergence_curve(params: GradNetParams, net_cfg: GradNetConfig,
                      ds: FeatureDataset, protocol: EvalProtocol,
                      times, solve_cfg: SolveConfig = SolveConfig(),
                      threads: int = 1) -> list[CurvePoint]:
    """Endpoint accuracy and query loss at each integral time.

    The same protocol seed drives every point, so the curves are paired
    episode by episode.  The solver keeps the step size of ``solve_cfg``
    fixed and varies only how far it integrates.
    """
    times = [float(t) for t in times]
    if not times or any(t <= 0 for t in times):
        raise ValueError("times must be positive")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be strictly increasing")
    points = []
    for t in times:
        steps = max(1, round(t / solve_cfg.step_size))
        cfg_t = SolveConfig(method=solve_cfg.method, integral_time=t,
                            num_steps=steps)

        def one(index: int) -> tuple[float, float]:
            ep = _draw(ds, protocol, index)
            with nx.no_grad():
                state = rectify(params, net_cfg, ep, solve_cfg=cfg_t).final
                probs = classify(ep.query_features, state)
                loss = nll_loss(probs, ep.query_labels).item()
            acc = float(np.mean(probs.values.argmax(axis=1) == ep.query_labels))
            return acc, loss

        indices = range(protocol.episodes)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                pairs = list(pool.map(one, indices))
        else:
            pairs = [one(i) for i in indices]
        mean, half = _mean_ci([p[0] for p in pairs])
        points.append(CurvePoint(time=t, mean_accuracy=mean,
                                 ci95_halfwidth=half,
                                 mean_loss=float(np.mean([p[1] for p in pairs]))))
    return points


# -- report formatting ---------------------------------------------------------


def format_report_csv(report: EvalReport) -> str:
    lines = ["# num_episodes,mean_accuracy,ci95_halfwidth",
             "%d,%.10g,%.10g" % (report.num_episodes, report.mean_accuracy,
                                 report.ci95_halfwidth),
             "# episode,accuracy"]
    for i, acc in enumerate(report.per_episode_accuracies):
        lines.append("%d,%.10g" % (i, acc))
    return "\n".join(lines) + "\n"


def format_report_summary(report: EvalReport, label: str = "accuracy") -> str:
    return ("%s: %.2f%% +- %.2f%% over %d episodes\n"
            % (label, 100.0 * report.mean_accuracy,
               100.0 * report.ci95_halfwidth, report.num_episodes))


def format_curve_csv(points: list[CurvePoint]) -> str:
    lines = ["# time,mean_accuracy,ci95_halfwidth,mean_loss"]
    for p in points:
        lines.append("%.10g,%.10g,%.10g,%.10g"
                     % (p.time, p.mean_accuracy, p.ci95_halfwidth, p.mean_loss))
    return "\n".join(lines) + "\n"
