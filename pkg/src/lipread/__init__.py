"""Hybrid CTC/attention lipreading on synthetic video, built on a small numpy autodiff core."""

from .ctc import collapse, ctc_greedy_decode, ctc_loss, ctc_prefix_score
from .data import SynthConfig, cer, corpus_cer, edit_distance, generate_dataset
from .decode import DecodeConfig, joint_decode
from .errors import CheckError, ConfigError, ContractError, NumericalError, ShapeError, TrainingError
from .lm import RnnLM, RnnLmConfig
from .model import ModelConfig, VSRModel
from .objective import HyperParams, LossBreakdown, total_loss
from .tensor import Tensor, no_grad
from .vocab import Vocab

__version__ = "0.1.0"
