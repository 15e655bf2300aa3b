"""End-to-end helpers shared by the CLI and the tests."""
from __future__ import annotations

import dataclasses

from .curvature import ComplexityConfig
from .integrator import FrameStats, Integrator, IntegratorConfig
from .policy import LevelSizes, QualityLevel, QualityPolicy
from .voxel_map import VoxelMap


def fixed_size_setup(size: float, sizes: LevelSizes, policy: QualityPolicy,
                     config: IntegratorConfig) -> tuple[LevelSizes, QualityPolicy, IntegratorConfig]:
    """Single-resolution mode: one voxel size, never split.

    The truncation band stays tied to the configured coarse size so that a
    fixed run and an adaptive run fuse exactly the same band.
    """
    if not size > 0:
        raise ValueError("fixed size must be positive")
    tau = config.truncation if config.truncation is not None else 2.0 * sizes.coarse
    fixed_policy = dataclasses.replace(policy, label_level={}, default_level=QualityLevel.COARSE,
                                       use_geometry=False)
    return LevelSizes.fixed(size), fixed_policy, dataclasses.replace(config, truncation=tau)


def build_integrator(policy: QualityPolicy, sizes: LevelSizes | None = None, n_labels: int = 40,
                     config: IntegratorConfig | None = None, complexity: ComplexityConfig | None = None,
                     fixed_size: float | None = None, block_size: int = 8) -> Integrator:
    sizes = sizes or LevelSizes()
    config = config or IntegratorConfig()
    if fixed_size is not None:
        sizes, policy, config = fixed_size_setup(fixed_size, sizes, policy, config)
    vmap = VoxelMap(sizes, n_labels, block_size, policy)
    return Integrator(vmap, policy, config, complexity)


def reconstruct(frames, policy: QualityPolicy, **kw) -> tuple[VoxelMap, list[FrameStats]]:
    integ = build_integrator(policy, **kw)
    stats = [integ.integrate_frame(f) for f in frames]
    return integ.map, stats
