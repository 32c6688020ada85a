"""Online continual learning over precomputed features with a non-sparse classifier objective."""

from .classifier import AdapterHead, LinearHead, NcmState, forward, ncm_predict, softmax_predict, update_class_means
from .experiment import ExperimentSpec, SyntheticSpec, generate_synthetic, run_experiment
from .losses import LossBreakdown, cross_entropy, max_separation, sparsity_regularizer, targeted_binary_loss
from .memory import AccessPolicy, MemoryBuffer, may_access, sample_for_replay
from .metrics import EvalRecord, RunLog, a_auc, confusion_matrix, evaluate, sparsity_stats
from .pacbayes import BoundInputs, BoundTerms, bound_terms
from .stream import Sample, StreamConfig, TaskSchedule, build_stream, load_dataset, simulate_throughput
from .trainer import RunConfig, TrainerConfig, lite_gate, run, train_step

__version__ = "0.1.0"
