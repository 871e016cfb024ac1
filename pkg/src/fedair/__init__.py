"""Federated learning between two clients and a server over a simulated DBPSK radio link."""
from .codec import GapPolicy, encode_params, reassemble
from .config import ExperimentConfig
from .data import PartitionMode, load_mnist, load_mnist_dir, partition
from .experiment import cross_accuracy, run_experiment, sweep
from .kernels import BACKEND
from .model import ModelParams, TrainConfig, evaluate, fed_avg, init_model, train_local
from .phy import ChannelModel, PhyConfig, demodulate, modulate
from .protocol import run_round, run_session

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ChannelModel", "ExperimentConfig", "GapPolicy", "ModelParams", "PartitionMode", "PhyConfig",
    "TrainConfig", "cross_accuracy", "demodulate", "encode_params", "evaluate", "fed_avg", "init_model",
    "load_mnist", "load_mnist_dir", "modulate", "partition", "reassemble", "run_experiment", "run_round",
    "run_session", "sweep", "train_local",
]
