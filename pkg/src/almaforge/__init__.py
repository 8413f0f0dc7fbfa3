"""Two-stage translation fine-tuning (monolingual continued training, then
a small parallel set) on a numpy decoder-only model."""

__version__ = "0.1.0"
