"""Desk-scale training harness: synthetic data, a toy backbone, training
loops, FLOP accounting and CSV reporting."""
