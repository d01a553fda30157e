"""Semi-supervised class-imbalanced volumetric segmentation with an EMA teacher,
progressive imbalance-aware CutMix and frozen foundation-model distillation."""

from .config import TrainConfig, dump_config, parse_config
from .volcore import ClassStats, PhantomSpec, compute_class_stats, generate_phantom, load_volume, store_volume

__version__ = "0.1.0"
