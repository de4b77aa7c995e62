"""Datasets of per-class feature vectors and N-way K-shot episode sampling.

Features come either from a synthetic Gaussian-cluster generator (class
centers on the unit sphere with enforced angular separation) or from a
text file of precomputed vectors.  Episodes draw classes and samples
without replacement and relabel the chosen classes 0..N-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, InfeasibleGeometryError, ParseError

SPLITS = ("base", "validation", "novel")
MODES = ("transductive", "inductive")

_REJECTION_BUDGET = 10 ** 6


@dataclass(frozen=True)
class FeatureDataset:
    """Immutable map from class id to an (m, d) array of feature vectors."""

    features: dict[int, np.ndarray]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.features:
            raise ValueError("dataset has no classes")
        dims = {arr.shape[1] for arr in self.features.values() if arr.ndim == 2}
        if any(arr.ndim != 2 for arr in self.features.values()) or len(dims) != 1:
            raise ValueError("all classes must hold 2-D arrays of one dimension")

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.features))

    @property
    def dim(self) -> int:
        return next(iter(self.features.values())).shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.

    Episode labels 0..N-1 are a relabeling of the sampled dataset classes;
    ``class_ids[i]`` is the dataset class behind episode label ``i``.  The
    source row indices are kept so disjointness can be checked by identity.
    """

    n_way: int
    k_shot: int
    support_features: np.ndarray  # (N*K, d)
    support_labels: np.ndarray    # (N*K,) ints in 0..N-1
    query_features: np.ndarray    # (N*M, d)
    query_labels: np.ndarray      # (N*M,)
    mode: str
    class_ids: tuple[int, ...]
    support_indices: np.ndarray = field(repr=False)  # (N, K) rows into source class
    query_indices: np.ndarray = field(repr=False)    # (N, M)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def m_query(self) -> int:
        return self.query_labels.shape[0] // self.n_way

    @property
    def dim(self) -> int:
        return self.support_features.shape[1]


def synth_dataset(num_classes: int, dim: int, samples_per_class: int,
                  noise_sigma: float = 0.35, min_center_angle_deg: float = 25.0,
                  seed: int = 0, *, split: str = "base",
                  first_class_id: int = 0) -> FeatureDataset:
    """Gaussian clusters around well-separated unit-norm centers.

    Centers are rejection-sampled on the sphere until every pair is at
    least ``min_center_angle_deg`` apart; samples add isotropic noise of
    scale ``noise_sigma`` to their center.  Deterministic for a fixed seed.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < 2:
        raise ValueError("need dimension at least 2")
    if noise_sigma <= 0:
        raise ValueError("noise_sigma must be positive")
    if samples_per_class < 1:
        raise ValueError("need at least one sample per class")

    rng = np.random.default_rng(seed)
    max_dot = math.cos(math.radians(min_center_angle_deg))
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < num_classes:
        attempts += 1
        if attempts > _REJECTION_BUDGET:
            raise InfeasibleGeometryError(
                f"could not place {num_classes} centers at least "
                f"{min_center_angle_deg} degrees apart in dimension {dim} "
                f"within {_REJECTION_BUDGET} attempts")
        cand = rng.normal(size=dim)
        cand /= np.linalg.norm(cand)
        if all(float(np.dot(cand, c)) <= max_dot for c in centers):
            centers.append(cand)

    features = {}
    for i, center in enumerate(centers):
        noise = rng.normal(scale=noise_sigma, size=(samples_per_class, dim))
        features[first_class_id + i] = center + noise
    return FeatureDataset(features=features, split=split)


def save_features(ds: FeatureDataset, path) -> None:
    """Write one "class_id,v0,...,v{d-1}" line per sample.

    %.17g formatting makes the float64 round trip exact.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {ds.num_classes} classes, dimension {ds.dim}\n")
        for cid in ds.class_ids:
            for row in ds.features[cid]:
                fh.write(f"{cid}," + ",".join("%.17g" % v for v in row) + "\n")


def load_features(path, *, split: str = "base") -> FeatureDataset:
    """Parse a feature file; '#' lines and blank lines are skipped.

    The dimension is taken from the first data row and enforced on every
    later row.  Any malformed row raises ParseError naming the line.
    """
    per_class: dict[int, list[np.ndarray]] = {}
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if len(fields) < 2:
                raise ParseError("expected class_id followed by feature values",
                                 line=lineno)
            try:
                cid = int(fields[0])
            except ValueError:
                raise ParseError(f"class id {fields[0]!r} is not an integer",
                                 line=lineno) from None
            try:
                vec = np.array([float(f) for f in fields[1:]], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric feature value", line=lineno) from None
            if not np.isfinite(vec).all():
                raise ParseError("non-finite feature value", line=lineno)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ParseError(
                    f"row has {vec.shape[0]} values but the file started with {dim}",
                    line=lineno)
            per_class.setdefault(cid, []).append(vec)
    if not per_class:
        raise ParseError("file contains no feature rows")
    features = {cid: np.stack(rows) for cid, rows in per_class.items()}
    return FeatureDataset(features=features, split=split)


def sample_episode(ds: FeatureDataset, n_way: int, k_shot: int, m_query: int,
                   mode: str = "transductive", seed=0) -> Episode:
    """Draw an N-way K-shot episode without replacement.

    ``seed`` may be an int or a numpy Generator.  Classes are relabeled
    0..N-1 in sampling order; support and query rows within a class are
    disjoint by construction.
    """
    if n_way < 2 or k_shot < 1 or m_query < 1:
        raise ValueError("need n_way >= 2, k_shot >= 1, m_query >= 1")
    if ds.num_classes < n_way:
        raise CapacityError(
            f"dataset has {ds.num_classes} classes, episode wants {n_way}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    chosen = rng.choice(np.array(ds.class_ids), size=n_way, replace=False)
    need = k_shot + m_query
    sup_rows, sup_labels, qry_rows, qry_labels = [], [], [], []
    sup_idx, qry_idx = [], []
    for label, cid in enumerate(chosen):
        pool = ds.features[int(cid)]
        if pool.shape[0] < need:
            raise CapacityError(
                f"class {int(cid)} has {pool.shape[0]} samples, "
                f"episode wants {need}")
        perm = rng.permutation(pool.shape[0])[:need]
        s, q = perm[:k_shot], perm[k_shot:]
        sup_idx.append(s)
        qry_idx.append(q)
        sup_rows.append(pool[s])
        qry_rows.append(pool[q])
        sup_labels.append(np.full(k_shot, label, dtype=np.int64))
        qry_labels.append(np.full(m_query, label, dtype=np.int64))

    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        support_features=np.concatenate(sup_rows),
        support_labels=np.concatenate(sup_labels),
        query_features=np.concatenate(qry_rows),
        query_labels=np.concatenate(qry_labels),
        mode=mode,
        class_ids=tuple(int(c) for c in chosen),
        support_indices=np.stack(sup_idx),
        query_indices=np.stack(qry_idx),
    )
