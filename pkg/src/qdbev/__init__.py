"""Progressive quantization-aware training and view-guided distillation for a toy BEV network."""
__version__ = "0.1.0"
