"""Desk-scale lab for privileged on-policy self-distillation with adaptive reference masking."""

__version__ = "0.1.0"
