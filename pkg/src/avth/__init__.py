"""Low-bitrate audio-visual talking-head codec.

Keyframes are intra coded, other frames travel as downsampled auxiliary frames,
and the decoder rebuilds targets in two stages: keypoint-driven animation of the
keyframe, then audio-conditioned repainting of the mouth region.
"""

from .config import Config, load_config
from .media import AudioClip, ColorTag, Frame, FrameSequence, read_wav, read_y4m, write_wav, write_y4m
from .pipeline import decode_stream, encode_stream

__all__ = [
    "AudioClip", "ColorTag", "Config", "Frame", "FrameSequence", "decode_stream", "encode_stream",
    "load_config", "read_wav", "read_y4m", "write_wav", "write_y4m",
]
__version__ = "0.1.0"
