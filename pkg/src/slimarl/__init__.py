"""slimarl: train a high-capacity multi-agent team policy, then distill it
into ultra-lightweight critic-free per-agent policies."""

__version__ = "0.1.0"
