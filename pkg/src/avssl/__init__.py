"""Audio-visual self-supervision for speech representations: signal frontend, pretext
models and losses, downstream training and the experiment harness."""

__version__ = "0.1.0"
