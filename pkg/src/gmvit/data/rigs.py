"""Camera rigs: unit direction vectors the views are rendered from."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

RIG_SIZES = {"circle12": 12, "dodeca20": 20}
# groups per rig used by the model: 8 for 12 views, 12 for 20 views
DEFAULT_GROUPS = {"circle12": 8, "dodeca20": 12}


@dataclass(frozen=True)
class CameraRig:
    name: str
    positions: np.ndarray  # (N, 3), unit rows

    @property
    def N(self) -> int:
        return len(self.positions)


def _circle12(elevation_deg: float = 30.0) -> np.ndarray:
    e = math.radians(elevation_deg)
    az = np.radians(30.0 * np.arange(12))
    return np.stack([math.cos(e) * np.cos(az), math.cos(e) * np.sin(az),
                     np.full(12, math.sin(e))], axis=1)


def _dodeca20() -> np.ndarray:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    inv = 1.0 / phi
    verts = [v for v in itertools.product((-1.0, 1.0), repeat=3)]
    for a, b in itertools.product((-1.0, 1.0), repeat=2):
        verts.append((0.0, a * inv, b * phi))
        verts.append((a * inv, b * phi, 0.0))
        verts.append((a * phi, 0.0, b * inv))
    return np.asarray(verts) / math.sqrt(3.0)


def make_rig(name: str) -> CameraRig:
    if name == "circle12":
        pos = _circle12()
    elif name == "dodeca20":
        pos = _dodeca20()
    else:
        raise ValueError(f"unknown camera rig {name!r}; expected one of {sorted(RIG_SIZES)}")
    pos.setflags(write=False)
    return CameraRig(name, pos)
