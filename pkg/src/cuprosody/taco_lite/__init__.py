from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import Utterance, collate, make_utterance, prepare_utterances
from .model import Batch, TacoLite, tacotron_loss
from .synth import SynthesisResult, synthesize
from .train import evaluate, train

__all__ = [
    "Batch", "Checkpoint", "ModelConfig", "SynthesisResult", "TacoLite", "TrainConfig",
    "Utterance", "collate", "evaluate", "load_checkpoint", "make_utterance",
    "prepare_utterances", "save_checkpoint", "synthesize", "tacotron_loss", "train",
]
