"""Analytic toy potentials for smoke training and the active-learning study."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import AtomicStructure
from .tensor_core import random_rotation


@dataclass(frozen=True)
class Morse:
    depth: float = 0.5  # eV
    width: float = 1.5  # 1/A
    r0: float = 1.2  # A

    def energy(self, r):
        x = np.exp(-self.width * (np.asarray(r) - self.r0))
        return self.depth * (1 - x) ** 2

    def denergy(self, r):
        x = np.exp(-self.width * (np.asarray(r) - self.r0))
        return 2 * self.depth * self.width * (1 - x) * x


@dataclass(frozen=True)
class TwoRegime:
    """Morse well plus a Gaussian ridge at long range.

    Short bonds (the in-distribution regime) barely feel the ridge, so a
    model fitted there extrapolates badly into the stretched regime.
    """

    morse: Morse = Morse()
    bump_height: float = 0.6
    bump_center: float = 2.3
    bump_width: float = 0.25

    def energy(self, r):
        r = np.asarray(r)
        return self.morse.energy(r) + self.bump_height * np.exp(-((r - self.bump_center) ** 2) / (2 * self.bump_width**2))

    def denergy(self, r):
        r = np.asarray(r)
        g = self.bump_height * np.exp(-((r - self.bump_center) ** 2) / (2 * self.bump_width**2))
        return self.morse.denergy(r) - g * (r - self.bump_center) / self.bump_width**2


def dimer(potential, r: float, rng: np.random.Generator, species=(1, 1), ident=None) -> AtomicStructure:
    """Randomly oriented and placed dimer at separation r with exact labels."""
    axis = random_rotation(rng)[:, 0]
    centre = rng.uniform(-1, 1, size=3)
    pos = np.stack([centre - 0.5 * r * axis, centre + 0.5 * r * axis])
    dv = float(potential.denergy(r))
    # dE/dx_1 = dv * (x_1 - x_0)/r, so F_1 = -dv * axis and F_0 = +dv * axis
    forces = np.stack([dv * axis, -dv * axis])
    info = {} if ident is None else {"id": ident}
    return AtomicStructure(pos, species, energy=float(potential.energy(r)), forces=forces, info=info)


def morse_dataset(n: int, seed: int = 0, r_range=(0.9, 2.2), potential: Morse = Morse()) -> list:
    rng = np.random.default_rng(seed)
    return [dimer(potential, r, rng, ident=f"m{k}") for k, r in enumerate(rng.uniform(*r_range, size=n))]


ID_RANGE = (0.95, 1.7)
OOD_RANGE = (1.9, 2.8)


def two_regime_sets(seed: int, n_train: int = 20, n_pool_id: int = 180, n_pool_ood: int = 20, n_test: int = 100):
    """(train, pool, test): training and most of the pool in the short-bond
    regime, a minority of pool items and all test items stretched."""
    rng = np.random.default_rng(seed)
    pes = TwoRegime()
    train = [dimer(pes, r, rng, ident=f"t{k}") for k, r in enumerate(rng.uniform(*ID_RANGE, n_train))]
    radii = np.concatenate([rng.uniform(*ID_RANGE, n_pool_id), rng.uniform(*OOD_RANGE, n_pool_ood)])
    radii = radii[rng.permutation(len(radii))]
    pool = [dimer(pes, r, rng, ident=f"p{k:04d}") for k, r in enumerate(radii)]
    test = [dimer(pes, r, rng, ident=f"x{k}") for k, r in enumerate(rng.uniform(*OOD_RANGE, n_test))]
    return train, pool, test
