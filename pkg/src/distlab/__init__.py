"""distlab: a small numpy laboratory for teacher training and knowledge distillation
on synthetic mixed-feature data with exact ground truth."""

__version__ = "0.1.0"
