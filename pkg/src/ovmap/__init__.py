"""Open-vocabulary 3D instance mapping and instruction grounding.

Posed RGB-D frames with class-agnostic 2D masks are fused into 3D instances
by a structural-semantic consensus test, instances receive aggregated
multi-view features, and natural-language instructions are grounded to
instances through a two-round language-model dialogue.
"""

from .config import ConfigError, PipelineConfig
from .geometry import VoxelSet
from .merging import Instance3D, run_mapping, run_pipeline
from .scene_io import SceneDataset, load_scene

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Instance3D", "PipelineConfig", "SceneDataset", "VoxelSet",
    "load_scene", "run_mapping", "run_pipeline", "__version__",
]
