"""Modular cross-modal encoder-decoder framework on a small numpy autodiff core."""

from .config import ModuleRegistry, PipelineConfig, load_config, parse_config, render_config
from .pipeline import Pipeline, build_pipeline, default_registry

__all__ = ["ModuleRegistry", "Pipeline", "PipelineConfig", "build_pipeline", "default_registry",
           "load_config", "parse_config", "render_config"]
__version__ = "0.1.0"
