"""Measurement conditions: sensor height, beta angle and ground type."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import ParameterError

HEIGHT_RANGE_M = (0.35, 0.62)
BETA_RANGE_DEG = (-8.0, 2.0)

# rounding applied to condition coordinates so grid arithmetic (0.35 + 0.01*i)
# produces hashable, comparable keys
_NDIGITS = 9


class Ground(str, enum.Enum):
    GRAVEL = "gravel"
    ASPHALT = "asphalt"

    @property
    def flag(self) -> float:
        return 1.0 if self is Ground.GRAVEL else 0.0

    @classmethod
    def parse(cls, value: "str | Ground") -> "Ground":
        if isinstance(value, Ground):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ParameterError(f"unknown ground type {value!r}; expected gravel or asphalt") from None


@dataclass(frozen=True, order=True)
class Condition:
    height_m: float
    beta_deg: float
    ground: Ground

    def __post_init__(self):
        object.__setattr__(self, "height_m", round(float(self.height_m), _NDIGITS))
        object.__setattr__(self, "beta_deg", round(float(self.beta_deg), _NDIGITS))
        object.__setattr__(self, "ground", Ground.parse(self.ground))

    @property
    def conformant(self) -> bool:
        lo_h, hi_h = HEIGHT_RANGE_M
        lo_b, hi_b = BETA_RANGE_DEG
        return lo_h - 1e-9 <= self.height_m <= hi_h + 1e-9 and lo_b - 1e-9 <= self.beta_deg <= hi_b + 1e-9

    def require_conformant(self) -> "Condition":
        if not self.conformant:
            raise ParameterError(
                f"condition {self} outside the measured range: height {HEIGHT_RANGE_M} m, "
                f"beta {BETA_RANGE_DEG} deg"
            )
        return self

    def to_dict(self) -> dict:
        return {"height_m": self.height_m, "beta_deg": self.beta_deg, "ground": self.ground.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Condition":
        return cls(d["height_m"], d["beta_deg"], d["ground"])
