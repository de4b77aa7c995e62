"""Fixed-step solvers for the prototype flow, differentiable through unrolling.

The dynamics callable maps (prototypes tensor, time) to dp/dt; Euler and
classical Runge-Kutta updates are recorded on the autodiff graph, so a
loss at the endpoint back-propagates through every step into the field's
parameters.  No adjoint method, no adaptive stepping: memory and error
behavior stay predictable and gradients are exact for the discretization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .episodes import Episode
from .errors import DivergenceError, NonFiniteError
from .gradnet import GradNetConfig, GradNetParams, episode_samples, flow_field
from .protoclassify import PrototypeState, init_prototypes

METHODS = ("euler", "rk4")


@dataclass(frozen=True)
class SolveConfig:
    """How to integrate: method, total time, step count, trajectory flag."""

    method: str = "rk4"
    integral_time: float = 40.0
    num_steps: int = 40
    record_trajectory: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.integral_time <= 0:
            raise ValueError("integral_time must be positive")
        if self.num_steps < 1:
            raise ValueError("num_steps must be at least 1")

    @property
    def step_size(self) -> float:
        return self.integral_time / self.num_steps


@dataclass
class SolveResult:
    """Endpoint of the integration plus, optionally, the visited states.

    ``final_tensor`` stays connected to the autodiff graph; ``final`` and
    the trajectory entries are detached value snapshots.
    """

    final: PrototypeState
    final_tensor: nx.Tensor
    trajectory: list[PrototypeState] | None


def solve(field, p0, cfg: SolveConfig) -> SolveResult:
    """Integrate dp/dt = field(p, t) from t=0 to t=integral_time.

    ``p0`` may be a PrototypeState or a Tensor (the latter keeps the
    endpoint differentiable with respect to the start).  A non-finite
    state or field value raises DivergenceError naming the 1-based step.
    """
    if isinstance(p0, PrototypeState):
        p = nx.constant(p0.prototypes)
    else:
        p = p0
    h = cfg.step_size
    trajectory = None
    if cfg.record_trajectory:
        trajectory = [PrototypeState(p.values.copy(), time=0.0)]
    t = 0.0
    for step in range(1, cfg.num_steps + 1):
        try:
            if cfg.method == "euler":
                p = p + nx.scale(field(p, t), h)
            else:
                k1 = field(p, t)
                k2 = field(p + nx.scale(k1, h / 2.0), t + h / 2.0)
                k3 = field(p + nx.scale(k2, h / 2.0), t + h / 2.0)
                k4 = field(p + nx.scale(k3, h), t + h)
                combined = k1 + nx.scale(k2, 2.0) + nx.scale(k3, 2.0) + k4
                p = p + nx.scale(combined, h / 6.0)
        except NonFiniteError as exc:
            raise DivergenceError(str(exc), step=step) from exc
        t = step * h
        if trajectory is not None:
            trajectory.append(PrototypeState(p.values.copy(), time=t))
    final = PrototypeState(p.values.copy(), time=cfg.integral_time)
    return SolveResult(final=final, final_tensor=p, trajectory=trajectory)


def rectify(params: GradNetParams, net_cfg: GradNetConfig, ep: Episode,
            mode: str | None = None,
            solve_cfg: SolveConfig = SolveConfig()) -> SolveResult:
    """Mean-initialize prototypes, then flow them to t = integral_time.

    The sample set (and so the field) is fixed over the whole solve; only
    the prototypes and the decay coefficient evolve.
    """
    mode = ep.mode if mode is None else mode
    features, desc = episode_samples(ep, mode, net_cfg.max_ways)
    feats_c, desc_c = nx.constant(features), nx.constant(desc)

    def field(p: nx.Tensor, t: float) -> nx.Tensor:
        return flow_field(params, net_cfg, p, feats_c, desc_c, t,
                          solve_cfg.integral_time)

    return solve(field, init_prototypes(ep), solve_cfg)


def format_trajectory(trajectory: list[PrototypeState]) -> str:
    """One text line per (state, class): "t,k,v0,...,v{d-1}"."""
    lines = ["# t,k,v0,..."]
    for state in trajectory:
        for k, row in enumerate(state.prototypes):
            lines.append("%.17g,%d," % (state.time, k)
                         + ",".join("%.17g" % v for v in row))
    return "\n".join(lines) + "\n"


def export_trajectory(trajectory: list[PrototypeState], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_trajectory(trajectory))
