"""Variational memory addressing: a VAE whose latent code includes a
discrete index into an external memory, trained with VIMCO."""
from .data import Dataset, IdxParseError, parse_idx, sample_episode, synth_pattern_corpus
from .distributions import make_rng
from .estimators import (enumerate_bound_gradient, multi_sample_bound, step_gradients, vimco_learning_signal)
from .evaluation import eval_nll, fewshot_classify, gradcheck, inspect_posterior, memory_sweep
from .memory import MemoryBuffer
from .models import BaselineVAE, MemVAEModel, ModelSpec, SoftAttentionModel
from .tensor import Tensor, backward
from .training import TrainConfig, adam_step, train

__version__ = "0.1.0"
