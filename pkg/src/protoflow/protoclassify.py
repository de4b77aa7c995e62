"""Mean prototypes, cosine-softmax classification, and the plain descent baseline.

Classification scores a feature against each class prototype by scaled
cosine similarity and softmaxes over classes.  The averaged support
gradient (mean of per-sample loss gradients with respect to the
prototypes) drives the fixed-step descent baseline; the learned flow in
``gradnet`` exists to replace exactly that quantity.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .episodes import Episode
from .errors import (CapacityError, DegenerateVectorError, DivergenceError,
                     NonFiniteError)

DEFAULT_GAMMA = 10.0
PROB_FLOOR = 1e-300

_clamp_lock = threading.Lock()
_clamp_count = 0


def clamp_warning_count() -> int:
    """How many probabilities were clamped to the floor inside nll_loss."""
    return _clamp_count


def reset_clamp_warnings() -> None:
    global _clamp_count
    with _clamp_lock:
        _clamp_count = 0


@dataclass(frozen=True)
class PrototypeState:
    """Class prototypes at a point in rectification time."""

    prototypes: np.ndarray  # (N, d)
    time: float

    def __post_init__(self):
        arr = np.asarray(self.prototypes, dtype=np.float64)
        object.__setattr__(self, "prototypes", arr)
        if arr.ndim != 2:
            raise ValueError("prototypes must be an (N, d) matrix")
        if not np.isfinite(arr).all():
            raise NonFiniteError("prototypes must be finite")
        if self.time < 0:
            raise ValueError("time must be nonnegative")

    @property
    def n_way(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def init_prototypes(ep: Episode) -> PrototypeState:
    """Per-class mean of the support features, at time zero."""
    protos = np.empty((ep.n_way, ep.dim))
    for k in range(ep.n_way):
        rows = ep.support_features[ep.support_labels == k]
        if rows.shape[0] == 0:
            raise CapacityError(f"episode class {k} has no support samples")
        protos[k] = rows.mean(axis=0)
    return PrototypeState(prototypes=protos, time=0.0)


def real_prototypes(ep: Episode) -> PrototypeState:
    """Per-class mean over support and query features, using true labels.

    A diagnostic target only; query labels are never available to a
    classifier at test time.
    """
    protos = np.empty((ep.n_way, ep.dim))
    for k in range(ep.n_way):
        rows = [ep.support_features[ep.support_labels == k]]
        if ep.query_labels.shape[0]:
            rows.append(ep.query_features[ep.query_labels == k])
        stacked = np.concatenate(rows)
        if stacked.shape[0] == 0:
            raise CapacityError(f"episode class {k} has no samples")
        protos[k] = stacked.mean(axis=0)
    return PrototypeState(prototypes=protos, time=0.0)


def _check_nonzero_rows(arr: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(arr, axis=-1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError(f"zero-norm {what} has no direction")


def _row_normalize(x: nx.Tensor) -> nx.Tensor:
    return x / nx.sqrt(nx.tensor_sum(nx.square(x), axis=-1, keepdims=True))


def classify(features, prototypes, gamma: float = DEFAULT_GAMMA) -> nx.Tensor:
    """Cosine-softmax class probabilities, one row per feature.

    ``features`` and ``prototypes`` may be arrays, Tensors, or a
    PrototypeState; passing Tensors keeps the result differentiable back
    to them.  Row i, column k is exp(gamma * cos(f_i, p_k)) normalized
    over k.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if isinstance(prototypes, PrototypeState):
        prototypes = prototypes.prototypes
    f = features if isinstance(features, nx.Tensor) else nx.constant(features)
    p = prototypes if isinstance(prototypes, nx.Tensor) else nx.constant(prototypes)
    _check_nonzero_rows(f.values, "feature")
    _check_nonzero_rows(p.values, "prototype")
    cosine = nx.matmul(_row_normalize(f), _row_normalize(p).transposed())
    return nx.softmax(nx.scale(cosine, gamma), axis=-1)


def nll_loss(probabilities: nx.Tensor, labels) -> nx.Tensor:
    """Mean negative log probability of the true class.

    Probabilities below 1e-300 are clamped before the log; every clamped
    entry bumps the module warning counter.
    """
    global _clamp_count
    probs = (probabilities if isinstance(probabilities, nx.Tensor)
             else nx.constant(probabilities))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
        raise ValueError("labels must be one integer per probability row")
    row_sums = probs.values.sum(axis=-1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-6:
        raise ValueError("probability rows must sum to 1")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    true_probs = nx.tensor_sum(probs * nx.constant(onehot), axis=-1)
    clamped = int(np.count_nonzero(true_probs.values < PROB_FLOOR))
    if clamped:
        with _clamp_lock:
            _clamp_count += clamped
    return nx.negate(nx.log(true_probs.clip_min(PROB_FLOOR)).mean())


def support_loss(state: PrototypeState, features, labels,
                 gamma: float = DEFAULT_GAMMA) -> float:
    """Mean NLL of the given labeled features under the current prototypes."""
    with nx.no_grad():
        return nll_loss(classify(features, state, gamma), labels).item()


def averaged_gradient(state: PrototypeState, features, labels,
                      gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Mean of the per-sample NLL gradients with respect to the prototypes.

    Each labeled sample contributes the gradient of its own loss; the mean
    over samples equals the gradient of the mean loss, which the tests pin
    against a single-pass oracle.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise CapacityError("averaged_gradient over an empty sample set")
    leaf = nx.Tensor(state.prototypes, requires_grad=True)
    for i in range(features.shape[0]):
        probs = classify(features[i:i + 1], leaf, gamma)
        nll_loss(probs, labels[i:i + 1]).backward()
    return leaf.adjoint / features.shape[0]


def gda_optimize(p0: PrototypeState, features, labels, eta: float, steps: int,
                 gamma: float = DEFAULT_GAMMA) -> PrototypeState:
    """Fixed-step descent on the averaged gradient: p <- p - eta * g.

    Raises DivergenceError naming the step if an iterate stops being
    finite.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    protos = p0.prototypes.copy()
    for step in range(1, steps + 1):
        try:
            grad = averaged_gradient(PrototypeState(protos, p0.time), features,
                                     labels, gamma)
        except NonFiniteError as exc:
            raise DivergenceError(str(exc), step=step) from exc
        protos = protos - eta * grad
        if not np.isfinite(protos).all():
            raise DivergenceError("prototype iterate is not finite", step=step)
    return PrototypeState(prototypes=protos, time=p0.time + steps)
