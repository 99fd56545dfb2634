"""Intermediate supervision and regularisation (ISR) across centralised,
federated and hybrid training, with convergence-bound and saddle-escape
calculators."""
__version__ = "0.1.0"

from .diffcore import ConfigurationError, ContractViolation, Graph, ParamSet, grad_check
from .data import Dataset, gen_classification, gen_gridseg, train_test_split
from .model import NetworkSpec, TapPlan, TappedNetwork, plan_taps
from .isr import ISRObjective
from .trainer import OptimizerConfig, TrainingAborted, train_cl
from .fedsim import FedConfig, ProtocolError, partition, train_fl
from .hybrid import HybridSchedule, train_hybrid
from .theory import TheoryInputs, bound_cl, bound_fl, bound_hybrid, complexity, escape_time
