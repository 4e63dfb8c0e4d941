"""Adversarial robustness benchmark for CAN-bus intrusion detectors.

Synthetic CAN traffic, a 77-feature frame encoding, three from-scratch numpy
classifiers (DNN, CNN, LSTM), four gradient-sign evasion attacks, two
adversarial-training defenses, and a transferability harness.
"""

from .canlog import CanFrame, SynthProfile, TrafficClass, parse_log, synthesize, write_log
from .featurize import Dataset, Split, balance, extract_features, split
from .zoo import ModelArchitecture, TrainConfig, TrainedModel, build, train
from .evasion import AttackConfig, AttackKind, craft_dataset, perturb
from .hardening import DefenseConfig, DefenseMode, EpsSchedule, adaptive_online_train, finetune
from .bench import Scenario, TransferMatrix, classify_scenario, evaluate, macro_f1, run_grid

__version__ = "0.1.0"
