"""Policy mirror descent with a kernel operator world model."""

from .env import EnvSpec, Transition, TransitionDataset, make_env, reset, rollout, step
from .errors import ConfigError, ContractionError, NumericalError, PolicyError, PowrError, UnsupportedError
from .kernels import Kernel, StateActionKernel, gram, gram_state_action, kernel_eval
from .pmd import PolicyWeights, SoftmaxPolicy, pmd_step, run_pmd
from .worldmodel import QEstimate, WorldModel, estimate_q, eval_q, fit

__version__ = "0.1.0"

__all__ = [
    "EnvSpec", "Transition", "TransitionDataset", "make_env", "reset", "rollout", "step",
    "ConfigError", "ContractionError", "NumericalError", "PolicyError", "PowrError", "UnsupportedError",
    "Kernel", "StateActionKernel", "gram", "gram_state_action", "kernel_eval",
    "PolicyWeights", "SoftmaxPolicy", "pmd_step", "run_pmd",
    "QEstimate", "WorldModel", "estimate_q", "eval_q", "fit",
]
