"""Two-stage CTR training: cross-modal contrastive alignment of a tabular
tower with a text tower, then supervised fine-tuning of the tabular tower.
"""

__version__ = "0.1.0"
