"""Semantic compression and transport of 3-D spectrum maps."""
from .errors import GraphStateError, NumericalError, ShapeError, TransportError, ValidationError
from .radiomap import (DESK_GRID, EMPTY_DBM, FULL_GRID, GridSpec, PropagationParams, SampleMask,
                       SpectrumMap, Transmitter, generate_mask, make_record, synthesize_map)
from .codec import Codec, CodecConfig, Predictor
from .channel import ChannelConfig, transmit_indices
from .training import MapSet, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "GraphStateError", "NumericalError", "ShapeError", "TransportError", "ValidationError",
    "DESK_GRID", "EMPTY_DBM", "FULL_GRID", "GridSpec", "PropagationParams", "SampleMask",
    "SpectrumMap", "Transmitter", "generate_mask", "make_record", "synthesize_map",
    "Codec", "CodecConfig", "Predictor", "ChannelConfig", "transmit_indices",
    "MapSet", "TrainConfig",
]
