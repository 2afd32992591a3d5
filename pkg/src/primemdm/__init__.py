"""Partial masking for masked discrete diffusion, at desk scale."""
from .codec import InvalidCode, SubTokenCodec, decode, encode, intermediate_state_count, make_codec
from .schedule import Linear, Polynomial, get_schedule

__all__ = [
    "InvalidCode", "SubTokenCodec", "decode", "encode", "intermediate_state_count",
    "make_codec", "Linear", "Polynomial", "get_schedule",
]
__version__ = "0.1.0"
