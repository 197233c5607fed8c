"""Source-speaker recognition from converted speech with hierarchical VLAD.

Everything runs on numpy: spectrogram front end, a small layer library with
hand-written backward passes, NetVLAD, the four encoder variants, the
pairing protocol around an external voice converter, and training,
evaluation and reporting.
"""
from .errors import HvladError
from .model import VARIANTS, EncoderConfig, build_encoder
from .vlad import VladParams, netvlad_aggregate

__version__ = "0.1.0"

__all__ = ["HvladError", "VARIANTS", "EncoderConfig", "build_encoder", "VladParams",
           "netvlad_aggregate", "__version__"]
