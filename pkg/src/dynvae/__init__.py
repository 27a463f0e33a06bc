"""Dynamic variational autoencoders for visual processes.

A VAE whose decoder begins with a linear "dynamic layer" learns a latent
vector-autoregressive process jointly with the image model. The package
also ships the linear dynamic-texture baseline, synthetic data, masks and
evaluation statistics.
"""

from .data import SequenceData, SyntheticSpec, gen_mask, gen_synthetic, load_seq, save_seq
from .errors import DynvaeError
from .metrics import EvalReport, evaluate
from .lds import LdsModel, fit_lds, synthesize_lds
from .model import DvaeModel, TrainConfig, load_model, save_model, synthesize, train
from .tensor import Prng

__version__ = "0.1.0"

__all__ = [
    "DvaeModel",
    "DynvaeError",
    "EvalReport",
    "LdsModel",
    "Prng",
    "SequenceData",
    "SyntheticSpec",
    "TrainConfig",
    "evaluate",
    "fit_lds",
    "gen_mask",
    "gen_synthetic",
    "load_model",
    "load_seq",
    "save_model",
    "save_seq",
    "synthesize",
    "synthesize_lds",
    "train",
]
