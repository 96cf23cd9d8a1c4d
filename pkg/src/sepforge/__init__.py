"""Time-domain speech separation toolkit: attention-augmented dual-path
separator with masking and mapping heads, trained with permutation
invariant training and hierarchical constraint training."""

__version__ = "0.1.0"
