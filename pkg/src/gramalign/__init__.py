"""Multi-modal entity alignment with graph diffusion, cross-modal attention and a
parallelotope-volume contrastive loss."""

__version__ = "0.1.0"
