"""Training-free editing of synthetic talking-shape videos.

A small diffusion model is trained once on procedurally generated clips of
a disc avatar whose mouth opening follows the audio envelope. Editing is
then training-free: the source clip is DDIM-inverted, attention tensors of
a source reconstruction branch are recorded, and a target branch re-denoises
the inverted latents under new audio or a new reference frame while selected
query/key tensors are swapped in from the source records.
"""

from .errors import InjectionError, NumericError, TalkingShapesError, ValidationError

__all__ = [
    "TalkingShapesError",
    "ValidationError",
    "NumericError",
    "InjectionError",
]

__version__ = "0.1.0"
