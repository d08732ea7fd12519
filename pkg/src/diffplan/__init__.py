"""Diffusion planner pre-trained on sub-optimal multi-task data and fine-tuned per task with RL."""

__version__ = "0.1.0"
