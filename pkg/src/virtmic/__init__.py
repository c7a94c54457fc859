"""Neural virtual-microphone estimation and mask-based MVDR beamforming."""

__version__ = "0.1.0"
