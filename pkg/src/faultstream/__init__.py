"""Condition-robust gearbox fault diagnosis with streaming self-adaptation.

The package splits into six parts: ``nn`` (array-level layers and
optimizers with hand-written backward passes), ``model`` (the three-headed
network and its checkpoint format), ``protobank`` (anchor selection and
class prototypes), ``datagen`` (synthetic vibration data, windowing, and
stream assembly), ``offline``/``online`` (training and the stream
adapters), and ``harness`` (experiments and reports).
"""

from .datagen import FAULT_CLASSES, ConditionProfile, RawRecording, WindowSet
from .harness import ExperimentConfig, default_experiment, run_experiment
from .model import NetworkSpec, init_params, load_checkpoint, save_checkpoint
from .offline import OfflineConfig, train_offline
from .online import (BaselineAdapter, NaiveAdapter, OnlineConfig,
                     ProposedAdapter, make_adapter)
from .protobank import AnchorBank, PrototypeSet, build_anchor_bank, compute_prototypes

__all__ = [
    "FAULT_CLASSES", "ConditionProfile", "RawRecording", "WindowSet",
    "ExperimentConfig", "default_experiment", "run_experiment",
    "NetworkSpec", "init_params", "load_checkpoint", "save_checkpoint",
    "OfflineConfig", "train_offline",
    "BaselineAdapter", "NaiveAdapter", "OnlineConfig", "ProposedAdapter",
    "make_adapter",
    "AnchorBank", "PrototypeSet", "build_anchor_bank", "compute_prototypes",
]

__version__ = "0.1.0"
