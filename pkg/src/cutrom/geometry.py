"""Parameterized levelset families, parameter sampling and fluid-sign orientation.

The solid region of the channel case is described by a wavy-wall implicit
function; the immersed-obstacle case uses a moving circle.  Which side of the
zero set is fluid is calibrated at runtime from an anchor point known to lie
in the fluid, and the resulting sign is recorded with the oriented levelset.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import AnchorOnInterface

WAVY_WALL = "wavy_wall"
CYLINDER = "cylinder"

#: wall-shape constants of the wavy-wall family (paper defaults)
WAVY_CONSTANTS = {"k1": 10.0, "k2": 10.0, "k3": -2.0, "k4": -1.0, "k5": 1.0}

ANCHOR_EPS = 1e-12


def wavy_levelset_eval(x, y, theta, constants=None):
    """Evaluate the wavy-wall levelset at (x, y) for wall parameter theta.

    Accepts scalars or numpy arrays.  The function is total: every finite
    input maps to a finite value.
    """
    c = WAVY_CONSTANTS if constants is None else constants
    k1, k2, k3, k4, k5 = (float(c[k]) for k in ("k1", "k2", "k3", "k4", "k5"))
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = np.sqrt(k1) * np.abs(x - k3)
    b = np.sqrt(k2) * np.abs(y - k4)
    cc = np.sqrt(k2) * np.abs(y - k5)
    d = np.exp(-theta) * k1 * (x - k3) ** 2 * theta - 4.0
    f1 = np.abs(a + b - 1.0) + np.abs(a - b - 2.0) + d
    f2 = np.abs(a + cc - 1.0) + np.abs(a - cc - 2.0) + d
    return -(f1 * f2)


def cylinder_levelset_eval(x, y, theta, radius, center_x=-1.5):
    """Signed levelset of a circle of given radius centered at (center_x, theta)."""
    if radius <= 0.0:
        raise ValueError("cylinder radius must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (x - center_x) ** 2 + (y - theta) ** 2 - radius**2


@dataclass(frozen=True)
class LevelsetFamily:
    """One of the two implicit geometry families, with its shape constants."""

    kind: str
    k1: float = 10.0
    k2: float = 10.0
    k3: float = -2.0
    k4: float = -1.0
    k5: float = 1.0
    center_x: float = -1.5
    radius: float = 0.2

    def __post_init__(self):
        if self.kind not in (WAVY_WALL, CYLINDER):
            raise ValueError(f"unknown levelset family {self.kind!r}")
        if self.kind == CYLINDER and self.radius <= 0.0:
            raise ValueError("cylinder radius must be positive")

    @classmethod
    def wavy_wall(cls, constants=None):
        c = WAVY_CONSTANTS if constants is None else constants
        return cls(WAVY_WALL, k1=c["k1"], k2=c["k2"], k3=c["k3"],
                   k4=c["k4"], k5=c["k5"])

    @classmethod
    def cylinder(cls, center_x=-1.5, radius=0.2):
        return cls(CYLINDER, center_x=center_x, radius=radius)

    @property
    def constants(self):
        return {"k1": self.k1, "k2": self.k2, "k3": self.k3,
                "k4": self.k4, "k5": self.k5}

    def evaluate(self, x, y, theta):
        if self.kind == WAVY_WALL:
            return wavy_levelset_eval(x, y, theta, self.constants)
        return cylinder_levelset_eval(x, y, theta, self.radius, self.center_x)

    def default_anchor(self):
        # origin lies in the channel interior for both paper families
        return (0.0, 0.0)


@dataclass(frozen=True)
class OrientedLevelset:
    """Levelset with a calibrated sign: fluid = {sign * phi < 0}."""

    family: LevelsetFamily
    theta: float
    sign: float

    def values(self, x, y):
        return self.sign * self.family.evaluate(x, y, self.theta)

    def __call__(self, x, y):
        return self.values(x, y)


def orient_fluid_sign(family, theta=None, anchor=None):
    """Calibrate the fluid sign of a levelset from a known-fluid anchor point.

    Accepts either a LevelsetFamily (theta required) or an OrientedLevelset
    (re-orientation is idempotent).  Callers must pass an anchor inside the
    fluid; passing a solid-region anchor silently flips the convention.
    """
    if isinstance(family, OrientedLevelset):
        if theta is None:
            theta = family.theta
        family = family.family
    if theta is None:
        raise ValueError("theta is required when orienting a family")
    if anchor is None:
        anchor = family.default_anchor()
    val = float(family.evaluate(anchor[0], anchor[1], theta))
    if abs(val) < ANCHOR_EPS:
        raise AnchorOnInterface(
            f"anchor {anchor} lies on the interface (phi={val:.3e})")
    sign = -1.0 if val > 0.0 else 1.0
    return OrientedLevelset(family=family, theta=float(theta), sign=sign)


@dataclass(frozen=True)
class ParameterSpace:
    """Closed interval of admissible wall parameters."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("parameter space requires lo < hi")

    @classmethod
    def wavy_default(cls):
        return cls(-0.1, 0.5)

    @classmethod
    def cylinder_default(cls):
        return cls(-0.65, 0.65)


class ParameterSample(NamedTuple):
    values: np.ndarray
    sorted_values: np.ndarray


def sample_parameters(space, count, seed):
    """Draw i.i.d. uniform parameters on [lo, hi], reproducible under the seed.

    Returns the draws in sampling order plus a sorted copy for reporting.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    values = space.lo + (space.hi - space.lo) * rng.random(int(count))
    return ParameterSample(values, np.sort(values))
