"""Unsupervised sound-source localization in a synthetic shape-tone world.

Multiple-instance contrastive training of audio/visual encoders on a small
numpy autodiff engine, plus object-guided inference and CIoU/AUC evaluation.
"""

__version__ = "0.1.0"
