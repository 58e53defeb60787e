"""Discrete-token speech enhancement toolkit.

A degraded waveform is encoded by a learned codec, a sequence backbone
(selective state-space or attention) predicts the residual-VQ token indices
of the clean signal, and the frozen codec decoder resynthesizes audio from
those tokens.  The package also ships a statistical spectral-amplitude
baseline, an analytic FLOPs profiler for the backbones, and the DSP needed
to synthesize degraded/clean training pairs.
"""

__version__ = "0.1.0"
