"""Joint x2 super-resolution and small-object detection over a shared windowed-attention encoder."""
from .config import RunConfig
from .encoder import FeaturePyramid, SharedEncoder
from .model import Criterion, SDCoNet
from .query_filter import FilterSchedule, attention_site_count, budget, select_active

__all__ = [
    "RunConfig", "FeaturePyramid", "SharedEncoder", "Criterion", "SDCoNet",
    "FilterSchedule", "attention_site_count", "budget", "select_active",
]
__version__ = "0.1.0"
