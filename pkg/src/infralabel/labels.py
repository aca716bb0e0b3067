from __future__ import annotations

from dataclasses import dataclass, field

from .geom import OrientedBox


@dataclass
class LabelSet:
    """All boxes attributed to one (sensor, frame)."""

    frame: int
    sensor_id: str
    boxes: list[OrientedBox] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)
