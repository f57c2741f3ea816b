"""Attention-based sequence-to-sequence translation, built on a small numpy autodiff core."""

from .beam import BeamConfig, beam_search, greedy_decode, length_penalty
from .bleu import corpus_bleu
from .bpe import MergeTable, Vocabulary, apply_bpe, debpe, learn_bpe
from .model import AttentionConfig, DecoderConfig, EncoderConfig, ModelConfig, Seq2Seq, count_parameters
from .trainer import Adam, TrainSchedule, select_best_checkpoint, train

__version__ = "0.1.0"
