"""Quality levels, voxel sizes and the label -> quality policy."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum


class QualityLevel(IntEnum):
    COARSE = 0
    MIDDLE = 1
    FINE = 2

    @classmethod
    def parse(cls, text: str) -> "QualityLevel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown quality level {text!r}") from None


LEVELS = (QualityLevel.COARSE, QualityLevel.MIDDLE, QualityLevel.FINE)


class SplitCause(IntEnum):
    NONE = 0
    SEMANTIC = 1
    GEOMETRIC = 2
    NEIGHBOR = 3


@dataclass(frozen=True)
class LevelSizes:
    """Voxel edge length per quality level, in meters."""

    coarse: float = 0.08
    middle: float = 0.04
    fine: float = 0.01

    def __post_init__(self):
        if not (self.coarse >= self.middle >= self.fine > 0):
            raise ValueError("voxel sizes must satisfy coarse >= middle >= fine > 0")
        for small, big in ((self.middle, self.coarse), (self.fine, self.middle)):
            ratio = big / small
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"voxel size {big} is not an integer multiple of {small}")

    @classmethod
    def fixed(cls, size: float) -> "LevelSizes":
        return cls(size, size, size)

    def size(self, level: int) -> float:
        return (self.coarse, self.middle, self.fine)[level]

    def children_per_axis(self, level: int) -> int:
        return int(round(self.coarse / self.size(level)))

    @property
    def is_fixed(self) -> bool:
        return self.coarse == self.fine


@dataclass
class QualityPolicy:
    label_level: dict[int, QualityLevel] = field(default_factory=dict)
    default_level: QualityLevel = QualityLevel.COARSE
    theta_middle: float = 0.05
    theta_fine: float = 0.1
    merge_confidence: float = 0.95
    use_geometry: bool = False

    def __post_init__(self):
        if not (0 < self.theta_middle < self.theta_fine):
            raise ValueError("thresholds must satisfy 0 < theta_middle < theta_fine")
        if not (0 < self.merge_confidence <= 1):
            raise ValueError("merge_confidence must lie in (0, 1]")

    @classmethod
    def uniform(cls, level: QualityLevel, **kw) -> "QualityPolicy":
        return cls(default_level=level, **kw)

    def semantic_level(self, label: int | None) -> QualityLevel:
        if label is None or label < 0:
            return self.default_level
        return self.label_level.get(label, self.default_level)

    def geometric_level(self, g: float) -> QualityLevel:
        if g >= self.theta_fine:
            return QualityLevel.FINE
        if g >= self.theta_middle:
            return QualityLevel.MIDDLE
        return QualityLevel.COARSE

    def level_table(self, n_labels: int):
        """Array mapping label id -> level, with one extra trailing slot for 'no label'."""
        import numpy as np

        table = np.full(n_labels + 1, int(self.default_level), dtype=np.int8)
        for label, lvl in self.label_level.items():
            if 0 <= label < n_labels:
                table[label] = int(lvl)
        return table

    def canonical_text(self) -> str:
        lines = [f"theta_middle={self.theta_middle!r}", f"theta_fine={self.theta_fine!r}",
                 f"merge_confidence={self.merge_confidence!r}",
                 f"mode={'SG' if self.use_geometry else 'S'}",
                 f"default={self.default_level.name.lower()}"]
        lines += [f"{l},{lvl.name.lower()}" for l, lvl in sorted(self.label_level.items())]
        return "\n".join(lines) + "\n"

    def digest(self) -> int:
        return int.from_bytes(hashlib.sha256(self.canonical_text().encode()).digest()[:8], "little")
