from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch
from .geometry import Ellipse


@dataclass(frozen=True, eq=False)
class Sample:
    """One training record. Masks are uint8 arrays with values in {0, 1}."""

    image: np.ndarray
    pupil_mask: np.ndarray
    iris_mask: np.ndarray
    ellipse: Ellipse
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DimensionMismatch(f"image must be HxWx3, got {self.image.shape}")
        hw = self.image.shape[:2]
        if self.pupil_mask.shape != hw or self.iris_mask.shape != hw:
            raise DimensionMismatch(
                f"mask shapes {self.pupil_mask.shape}, {self.iris_mask.shape} do not match image {hw}"
            )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def with_(self, **changes) -> Sample:
        return replace(self, **changes)

    def equals(self, other: Sample) -> bool:
        return (
            self.id == other.id
            and self.ellipse == other.ellipse
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.pupil_mask, other.pupil_mask)
            and np.array_equal(self.iris_mask, other.iris_mask)
        )
