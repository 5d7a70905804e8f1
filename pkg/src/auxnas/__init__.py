"""Multi-task training with removable auxiliary modules and an RL search over them."""

__version__ = "0.1.0"
