"""Switching-VAE unsupervised audio-visual speech enhancement.

A Markov chain over several pretrained VAE speech models (audio-only and
audio-visual), an NMF noise variance model, and a variational EM loop that
returns model-averaged Wiener estimates of the clean STFT.
"""

__version__ = "0.1.0"
