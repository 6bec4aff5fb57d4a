"""Group-of-pictures partitioning: the first frame of each group is its keyframe."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Group:
    keyframe_index: int
    target_indices: tuple[int, ...]

    @property
    def indices(self) -> tuple[int, ...]:
        return (self.keyframe_index,) + self.target_indices

    def __len__(self):
        return 1 + len(self.target_indices)


@dataclass(frozen=True)
class GopPlan:
    gop_size: int
    total_frames: int
    groups: tuple[Group, ...]

    @property
    def keyframes(self) -> list[int]:
        return [g.keyframe_index for g in self.groups]

    def group_of(self, frame_index: int) -> int:
        return frame_index // self.gop_size


def partition(total_frames: int, gop_size: int) -> GopPlan:
    """Split ``total_frames`` into contiguous GOPs; only the last may be short.

    ``total_frames == 0`` yields an empty plan (used for header-only streams).
    """
    if gop_size < 2:
        raise ValueError(f"gop_size must be >= 2, got {gop_size}")
    if total_frames < 0:
        raise ValueError(f"total_frames must be >= 0, got {total_frames}")
    groups = []
    for start in range(0, total_frames, gop_size):
        stop = min(start + gop_size, total_frames)
        groups.append(Group(start, tuple(range(start + 1, stop))))
    return GopPlan(gop_size, total_frames, tuple(groups))
