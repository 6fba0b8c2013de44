"""Source-free domain adaptation via alternating causal-factor discovery."""

__version__ = "0.1.0"
