"""Autotuning of loop nests through composable loop-transformation pragmas."""

__version__ = "0.1.0"

DEFAULT_TILE_SIZES = (4, 16, 64, 256, 1024)
