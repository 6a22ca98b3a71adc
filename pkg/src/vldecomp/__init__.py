"""Decomposing jointly pre-trained vision-language transformers into shared-weight two-tower encoders."""

from .errors import ConfigError, ContractError, DataFormatError, DimensionError, DivergenceError, VLDecompError
from .inputs import EncoderInput, ImageRecord, InputConfig, PairRecord, TextRecord, synth_dataset
from .model import ModelConfig, VLTransformer, load_checkpoint, save_checkpoint
from .retrieval import EmbeddingIndex, cosine_topk, encode_corpus, evaluate
from .training import PretrainConfig, TrainConfig, pretrain_joint, train_decompose

__version__ = "0.1.0"
