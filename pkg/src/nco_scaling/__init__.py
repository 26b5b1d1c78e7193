"""Decoder-only neural TSP constructor with a depth/width scaling-law harness."""

from .autodiff import Tensor, backward
from .decoding import DecodeSpec, RrcConfig, beam_decode, greedy_decode, rrc
from .instances import Dataset, TspInstance, Tour, build_dataset, generate, held_karp, nn_two_opt
from .model import Model, ModelConfig, load_checkpoint, param_count, save_checkpoint
from .scaling import fit_bivariate, fit_power, fit_shifted, flops_per_solution, grid
from .training import TrainConfig, run_training

__version__ = "0.1.0"
