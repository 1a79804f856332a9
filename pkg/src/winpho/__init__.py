"""Contextless windowed phoneme encoder.

Raw 16 kHz waveforms are sliced into short overlapping windows, each
window is encoded independently (convolutional pyramid + window-local
transformer), and per-window frame posteriors are stitched back onto a
global 13.125 ms frame grid with cosine weights. Training couples CTC
with a silence-awareness term; self-supervised pretraining predicts
vector-quantized targets for masked frames.
"""

__version__ = "0.1.0"
