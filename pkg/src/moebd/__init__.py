"""Backdoor attacks, fine-pruning and routing analysis for a patch-based mixture of experts."""

__version__ = "0.1.0"
