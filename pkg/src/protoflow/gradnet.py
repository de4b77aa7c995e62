"""The learned flow field: parallel inference modules fused by inverse variance.

Each module looks at the current prototypes and the episode's samples and
proposes, per class, a weighted combination of scaled difference vectors.
A module has four pieces: a two-layer scale network that modulates each
feature before the difference is taken, an embedding layer, a multi-head
self-attention block that lets the samples of a class contextualize each
other, and a scalar output head whose softmax across samples yields the
combination weights.  Module proposals are fused elementwise with
inverse-variance weights, then scaled by a coefficient that decays
exponentially in rectification time.

Sample conventions: in transductive mode the sample set is the support
set plus the unlabeled queries, the latter carrying a uniform label
descriptor; in inductive mode only the support set is used.  Class and
label descriptors are zero-padded to ``max_ways`` so one parameter set
serves any episode width up to that bound.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .episodes import Episode
from .errors import DimensionError, EmptySetError, ParseError
from .protoclassify import PrototypeState

CHECKPOINT_MAGIC = b"PFLW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GradNetConfig:
    """Widths and fusion constants for the flow network."""

    feature_dim: int
    num_modules: int = 4
    hidden_dim: int = 64
    embed_dim: int = 64
    attention_heads: int = 4
    head_dim: int = 16
    beta0: float = 0.1
    xi: float = 0.1
    variance_epsilon: float = 1e-6
    max_ways: int = 5

    def __post_init__(self):
        if self.num_modules < 1:
            raise ValueError("need at least one inference module")
        for name in ("feature_dim", "hidden_dim", "embed_dim",
                     "attention_heads", "head_dim", "max_ways"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        if not 0 < self.xi <= 1:
            raise ValueError("xi must be in (0, 1]")
        if self.variance_epsilon <= 0:
            raise ValueError("variance_epsilon must be positive")

    @property
    def descriptor_dim(self) -> int:
        """Width of the per-sample embedding input: 2*max_ways + 3*feature_dim."""
        return 2 * self.max_ways + 3 * self.feature_dim

    @classmethod
    def paper_scale(cls, feature_dim: int, max_ways: int = 5,
                    num_modules: int = 4) -> "GradNetConfig":
        """Full-width configuration: 512-wide layers, 8 heads of 16 units."""
        return cls(feature_dim=feature_dim, num_modules=num_modules,
                   hidden_dim=512, embed_dim=512, attention_heads=8,
                   head_dim=16, max_ways=max_ways)


@dataclass
class ModuleParams:
    """Parameters of one inference module."""

    scale_hidden: nx.AffineParams  # (hidden, 2d)
    scale_out: nx.AffineParams     # (d, hidden)
    embed: nx.AffineParams         # (embed, 2*max_ways + 3d)
    relation: nx.AttentionParams   # self-attention over samples
    output: nx.AffineParams        # (1, embed)


@dataclass
class GradNetParams:
    modules: list[ModuleParams]


def init_gradnet(cfg: GradNetConfig, seed=0) -> GradNetParams:
    """Glorot-initialized parameters.

    The final scale layer starts at zero weights with bias one, so the
    initial field points from each prototype toward the raw features.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    modules = []
    for _ in range(cfg.num_modules):
        scale_out = nx.glorot_affine(rng, cfg.feature_dim, cfg.hidden_dim)
        scale_out.weight.values[:] = 0.0
        scale_out.bias.values[:] = 1.0
        modules.append(ModuleParams(
            scale_hidden=nx.glorot_affine(rng, cfg.hidden_dim, 2 * cfg.feature_dim),
            scale_out=scale_out,
            embed=nx.glorot_affine(rng, cfg.embed_dim, cfg.descriptor_dim),
            relation=nx.glorot_attention(rng, cfg.attention_heads, cfg.head_dim,
                                         cfg.embed_dim),
            output=nx.glorot_affine(rng, 1, cfg.embed_dim),
        ))
    return GradNetParams(modules=modules)


def named_parameters(params: GradNetParams) -> list[tuple[str, nx.Tensor]]:
    """Stable (name, tensor) listing used by the optimizer and checkpoints."""
    out = []
    for m, module in enumerate(params.modules):
        prefix = f"module{m}"
        for layer in ("scale_hidden", "scale_out", "embed", "output"):
            aff: nx.AffineParams = getattr(module, layer)
            out.append((f"{prefix}.{layer}.weight", aff.weight))
            out.append((f"{prefix}.{layer}.bias", aff.bias))
        rel = module.relation
        for h in range(rel.heads):
            out.append((f"{prefix}.relation.query{h}", rel.query[h]))
            out.append((f"{prefix}.relation.key{h}", rel.key[h]))
            out.append((f"{prefix}.relation.value{h}", rel.value[h]))
        out.append((f"{prefix}.relation.out", rel.out))
    return out


def rebuild_params(cfg: GradNetConfig, tensors: list[nx.Tensor]) -> GradNetParams:
    """Reassemble a GradNetParams from tensors in named_parameters() order."""
    it = iter(tensors)
    modules = []
    for _ in range(cfg.num_modules):
        layers = {}
        for layer in ("scale_hidden", "scale_out", "embed", "output"):
            layers[layer] = nx.AffineParams(next(it), next(it))
        query, key, value = [], [], []
        for _ in range(cfg.attention_heads):
            query.append(next(it))
            key.append(next(it))
            value.append(next(it))
        relation = nx.AttentionParams(query, key, value, next(it))
        modules.append(ModuleParams(relation=relation, **layers))
    rest = list(it)
    if rest:
        raise DimensionError(f"{len(rest)} extra tensors after rebuild")
    return GradNetParams(modules=modules)


# -- sample views ----------------------------------------------------------


def episode_samples(ep: Episode, mode: str, max_ways: int):
    """Features and label descriptors of the sample set for the given mode.

    Support samples carry a one-hot descriptor; unlabeled queries (present
    only in transductive mode) carry 1/N across the episode's N classes.
    Descriptors are zero-padded to max_ways columns.
    """
    if ep.n_way > max_ways:
        raise DimensionError(
            f"episode has {ep.n_way} classes but the network was sized "
            f"for at most {max_ways}")
    sup = np.zeros((ep.support_labels.shape[0], max_ways))
    sup[np.arange(ep.support_labels.shape[0]), ep.support_labels] = 1.0
    if mode == "transductive":
        qry = np.zeros((ep.query_features.shape[0], max_ways))
        qry[:, :ep.n_way] = 1.0 / ep.n_way
        features = np.concatenate([ep.support_features, ep.query_features])
        desc = np.concatenate([sup, qry])
    elif mode == "inductive":
        features = ep.support_features
        desc = sup
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return features, desc


# -- per-module pieces ------------------------------------------------------


def _pair_views(protos: nx.Tensor, features: nx.Tensor):
    """Broadcast prototypes and features to aligned (N, n, d) views."""
    n_way, dim = protos.shape
    n = features.shape[0]
    f_b = features.reshape((1, n, dim)).broadcast_to((n_way, n, dim))
    p_b = protos.reshape((n_way, 1, dim)).broadcast_to((n_way, n, dim))
    return f_b, p_b


def estimate_directions(module: ModuleParams, protos: nx.Tensor,
                        features: nx.Tensor) -> nx.Tensor:
    """Per (class, sample) direction: scale(f || p) * f - p, shape (N, n, d)."""
    if features.shape[-1] != protos.shape[-1]:
        raise DimensionError(
            f"feature dim {features.shape[-1]} != prototype dim {protos.shape[-1]}")
    f_b, p_b = _pair_views(protos, features)
    h = nx.elu(nx.affine(module.scale_hidden, nx.concat([f_b, p_b], axis=2)))
    s = nx.affine(module.scale_out, h)
    return s * f_b - p_b


def generate_weights(module: ModuleParams, protos: nx.Tensor,
                     features: nx.Tensor, label_desc: nx.Tensor,
                     max_ways: int) -> nx.Tensor:
    """Per (class, sample) combination weights, softmaxed across samples.

    Each sample is described by class one-hot || prototype || label
    descriptor || feature || prototype*feature, embedded, contextualized
    by self-attention over the samples of that class, and scored.
    Rows (fixed class) sum to one.
    """
    n_way = protos.shape[0]
    n = features.shape[0]
    if n == 0:
        raise EmptySetError("cannot weight an empty sample set")
    if n_way > max_ways:
        raise DimensionError(f"{n_way} classes exceed max_ways={max_ways}")
    f_b, p_b = _pair_views(protos, features)
    class_onehot = np.zeros((n_way, 1, max_ways))
    class_onehot[np.arange(n_way), 0, np.arange(n_way)] = 1.0
    k_b = nx.constant(class_onehot).broadcast_to((n_way, n, max_ways))
    y_b = label_desc.reshape((1, n, max_ways)).broadcast_to((n_way, n, max_ways))
    z = nx.concat([k_b, p_b, y_b, f_b, p_b * f_b], axis=2)
    e = nx.elu(nx.affine(module.embed, z))
    contextual = nx.multi_head_attention(module.relation, e)
    scores = nx.affine(module.output, contextual).reshape((n_way, n))
    return nx.softmax(scores, axis=-1)


def weighted_moments(directions: nx.Tensor, weights: nx.Tensor):
    """Weighted mean and variance of the directions, elementwise over d.

    weights rows must sum to one; the variance is then a proper weighted
    spread and is nonnegative by construction.
    """
    n_way, n, dim = directions.shape
    w = weights.reshape((n_way, n, 1))
    mu = nx.tensor_sum(w * directions, axis=1)
    centered = directions - mu.reshape((n_way, 1, dim)).broadcast_to(directions.shape)
    sigma2 = nx.tensor_sum(w * nx.square(centered), axis=1)
    return mu, sigma2


def decay_coefficient(t: float, integral_time: float, cfg: GradNetConfig) -> float:
    """beta(t) = beta0 * xi ** (t / M)."""
    if integral_time <= 0:
        raise ValueError("integral_time must be positive")
    if not 0 <= t <= integral_time:
        raise ValueError(f"time {t} outside [0, {integral_time}]")
    return cfg.beta0 * cfg.xi ** (t / integral_time)


def ensemble(mus: list[nx.Tensor], sigmas: list[nx.Tensor], t: float,
             integral_time: float, cfg: GradNetConfig) -> nx.Tensor:
    """Inverse-variance fusion of module proposals, scaled by beta(t).

    Written as normalized weights lambda_l = inv_l / sum_j inv_j so that a
    single module collapses to beta * mu exactly.
    """
    if len(mus) != len(sigmas) or not mus:
        raise DimensionError("need matching, nonempty moment lists")
    beta = decay_coefficient(t, integral_time, cfg)
    inverses = [1.0 / (s + cfg.variance_epsilon) for s in sigmas]
    total = inverses[0]
    for inv in inverses[1:]:
        total = total + inv
    fused = (inverses[0] / total) * mus[0]
    for inv, mu in zip(inverses[1:], mus[1:]):
        fused = fused + (inv / total) * mu
    return nx.scale(fused, beta)


def flow_field(params: GradNetParams, cfg: GradNetConfig, protos: nx.Tensor,
               features: nx.Tensor, label_desc: nx.Tensor, t: float,
               integral_time: float) -> nx.Tensor:
    """dp/dt at prototypes ``protos`` and time ``t`` for a fixed sample set."""
    mus, sigmas = [], []
    for module in params.modules:
        directions = estimate_directions(module, protos, features)
        weights = generate_weights(module, protos, features, label_desc,
                                   cfg.max_ways)
        mu, sigma2 = weighted_moments(directions, weights)
        mus.append(mu)
        sigmas.append(sigma2)
    return ensemble(mus, sigmas, t, integral_time, cfg)


def gradnet_forward(params: GradNetParams, cfg: GradNetConfig, p,
                    episode: Episode, mode: str | None = None, *,
                    integral_time: float, time: float | None = None) -> nx.Tensor:
    """Evaluate the flow field on an episode; (N, d) Tensor.

    ``p`` may be a PrototypeState (its own time is used) or a Tensor (pass
    ``time`` explicitly, default 0).  Differentiable with respect to the
    parameters and a Tensor ``p``.
    """
    if isinstance(p, PrototypeState):
        protos = nx.constant(p.prototypes)
        t = p.time if time is None else time
    else:
        protos = p
        t = 0.0 if time is None else time
    mode = episode.mode if mode is None else mode
    features, desc = episode_samples(episode, mode, cfg.max_ways)
    return flow_field(params, cfg, protos, nx.constant(features),
                      nx.constant(desc), t, integral_time)


# -- checkpoints -------------------------------------------------------------


_CONFIG_INTS = ("feature_dim", "num_modules", "hidden_dim", "embed_dim",
                "attention_heads", "head_dim", "max_ways")
_CONFIG_FLOATS = ("beta0", "xi", "variance_epsilon")


def save_checkpoint(path, cfg: GradNetConfig, params: GradNetParams) -> None:
    """Binary container: magic, version, config record, named blocks.

    All reals are 64-bit little-endian; the byte stream is a pure function
    of (cfg, params), so identical states produce identical files.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack(f"<{len(_CONFIG_INTS)}I",
                          *(getattr(cfg, n) for n in _CONFIG_INTS)))
    buf.write(struct.pack(f"<{len(_CONFIG_FLOATS)}d",
                          *(getattr(cfg, n) for n in _CONFIG_FLOATS)))
    named = named_parameters(params)
    buf.write(struct.pack("<I", len(named)))
    for name, tensor in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(np.ascontiguousarray(tensor.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ParseError("checkpoint truncated")
    return data


def load_checkpoint(path) -> tuple[GradNetConfig, GradNetParams]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise ParseError("not a parameter checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        ints = struct.unpack(f"<{len(_CONFIG_INTS)}I",
                             _read_exact(fh, 4 * len(_CONFIG_INTS)))
        floats = struct.unpack(f"<{len(_CONFIG_FLOATS)}d",
                               _read_exact(fh, 8 * len(_CONFIG_FLOATS)))
        cfg = GradNetConfig(**dict(zip(_CONFIG_INTS, ints)),
                            **dict(zip(_CONFIG_FLOATS, floats)))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = []
        expected = [name for name, _ in named_parameters(init_gradnet(cfg))]
        if count != len(expected):
            raise ParseError(
                f"checkpoint holds {count} blocks, config implies {len(expected)}")
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            if name != expected[i]:
                raise ParseError(f"unexpected block {name!r} at position {i}")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8")
            tensors.append(nx.Tensor(data.reshape(shape).copy(),
                                     requires_grad=True))
        if fh.read(1):
            raise ParseError("trailing bytes after the last block")
    return cfg, rebuild_params(cfg, tensors)
