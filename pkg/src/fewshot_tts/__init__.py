"""Few-shot speaker-adaptive TTS sandbox.

A synthetic multi-speaker corpus with known latent speaker attributes, a toy
multi-speaker FastSpeech 2, a module-selective MAML meta-trainer, multi-task
and speaker-encoding baselines, few-shot cloning, and verification-style
evaluation metrics (similarity, EER/DET, ROC AUC).
"""

__version__ = "0.1.0"
