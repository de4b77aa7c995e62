"""Few-shot prototype rectification by an integrated gradient flow.

Class prototypes estimated from a handful of support samples are biased.
This package treats the correction as an initial-value problem: a small
meta-learned network proposes the velocity of each prototype, an explicit
solver integrates the flow, and the endpoint replaces the naive mean before
nearest-prototype classification.  Everything runs on numpy, from the
differentiation engine up to the training loop, so results are exactly
reproducible from seeds.

Modules
-------
numerics        reverse-mode differentiation over numpy arrays
episodes        synthetic feature benchmarks and episode sampling
protoclassify   cosine-softmax classifier, losses, descent baseline
gradnet         the learned flow network and its checkpoints
odeflow         explicit solvers that carry prototypes along the flow
metatrain       episodic meta-training with Adam
analysis        accuracy evaluation and bias diagnostics
config          run-configuration documents for the command line
cli             the ``protoflow`` command
"""

from .analysis import (CurvePoint, EvalProtocol, EvalReport,
                       GradientBiasReport, convergence_curve, evaluate,
                       gradient_bias, prototype_bias)
from .episodes import (Episode, FeatureDataset, load_features, sample_episode,
                       save_features, synth_dataset)
from .errors import (CapacityError, ConfigError, DegenerateVectorError,
                     DimensionError, DivergenceError, EmptySetError,
                     NonFiniteError, ParseError, ProtoflowError)
from .gradnet import (GradNetConfig, GradNetParams, gradnet_forward,
                      init_gradnet, load_checkpoint, save_checkpoint)
from .metatrain import TrainConfig, TrainResult, episode_loss, train
from .numerics import Tensor, no_grad
from .odeflow import SolveConfig, SolveResult, rectify, solve
from .protoclassify import (PrototypeState, classify, gda_optimize,
                            init_prototypes, nll_loss, real_prototypes)
from .config import RunConfig

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "CurvePoint", "DegenerateVectorError",
    "DimensionError", "DivergenceError", "EmptySetError", "Episode",
    "EvalProtocol", "EvalReport", "FeatureDataset", "GradNetConfig",
    "GradNetParams", "GradientBiasReport", "NonFiniteError", "ParseError",
    "ProtoflowError", "PrototypeState", "RunConfig", "SolveConfig",
    "SolveResult", "Tensor", "TrainConfig", "TrainResult",
    "classify", "convergence_curve", "episode_loss", "evaluate",
    "gda_optimize", "gradient_bias", "gradnet_forward", "init_gradnet",
    "init_prototypes", "load_checkpoint", "load_features", "nll_loss",
    "no_grad", "prototype_bias", "real_prototypes", "rectify",
    "sample_episode", "save_checkpoint", "save_features", "solve",
    "synth_dataset", "train", "__version__",
]
