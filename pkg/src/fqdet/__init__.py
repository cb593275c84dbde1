"""Query-based two-stage detection head with static top-k matching, on a small numpy autodiff core."""
from .config import RunConfig, load_config
from .head import Detector, FQDetHead, HeadConfig

__all__ = ["RunConfig", "load_config", "Detector", "FQDetHead", "HeadConfig"]
__version__ = "0.1.0"
