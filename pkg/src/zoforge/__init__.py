"""Memory-efficient zeroth-order optimization with seed-replayable trajectories."""

from .estimators import EstimatorConfig, GradRecord, ScaleVector, n_spsa, spsa_projected_grad
from .objectives import DatasetSpec, Quadratic, QuadraticSpec, make_dataset, make_logistic, make_mlp, make_quadratic
from .optimizers import OptimizerConfig, RunConfig, Stage, train
from .paramspace import AdapterSpec, GroupDesc, ParamStore, attach_low_rank_adapter
from .randcore import NoiseStream, derive_step_seed, sample_minibatch, sample_sphere
from .trajectory import decode, encode, replay

__version__ = "0.1.0"
