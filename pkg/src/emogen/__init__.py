"""Emotion-conditioned symbolic music generation with a relative-attention transformer."""
from .kernels import BACKEND
from .midi import Instrument, MidiFeatures, MidiSong, NoteEvent, read_midi, write_midi
from .model import EmotionRegressor, ModelConfig, RegressorConfig, Transformer, transfer_weights
from .tokenizer import ConditionPair, decode, encode

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Instrument", "MidiFeatures", "MidiSong", "NoteEvent", "read_midi", "write_midi",
    "EmotionRegressor", "ModelConfig", "RegressorConfig", "Transformer", "transfer_weights",
    "ConditionPair", "decode", "encode", "__version__",
]
