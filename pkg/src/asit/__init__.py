"""Self-supervised audio spectrogram transformer pretraining at desk scale.

Group-masked corruption of log-mel spectrograms, a student/EMA-teacher
vision transformer pair trained with reconstruction plus local and global
self-distillation, and downstream probing.
"""

__version__ = "0.1.0"
