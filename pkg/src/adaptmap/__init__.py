"""Quality-adaptive semantic TSDF reconstruction."""
from .policy import LevelSizes, QualityLevel, QualityPolicy, SplitCause
from .semantics import SemanticDistribution, best_label, update_semantics
from .voxel_map import Cell, Transition, VoxelMap, map_memory_bytes

__all__ = [
    "Cell", "LevelSizes", "QualityLevel", "QualityPolicy", "SemanticDistribution", "SplitCause",
    "Transition", "VoxelMap", "best_label", "map_memory_bytes", "update_semantics",
]
