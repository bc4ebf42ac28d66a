"""Closed-form regression targets and uniform sampling.

Feynman variable ranges are not published alongside the equations used
here, so each entry documents its own: magnitudes in [0.5, 2], angles in
[0.1, pi - 0.1], with per-equation narrowing where a formula would hit a
singularity or leave the arcsin domain.
"""

from dataclasses import dataclass
import csv
import math

import numpy as np

from .errors import ConfigError

POS = (0.5, 2.0)
ANGLE = (0.1, math.pi - 0.1)


@dataclass(frozen=True)
class TargetSpec:
    name: str
    variables: tuple
    domain: tuple      # per-coordinate (lo, hi)
    fn: object         # callable taking the columns of X
    formula: str = ""

    @property
    def arity(self):
        return len(self.variables)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        return np.asarray(self.fn(*X.T), dtype=float)


@dataclass
class Dataset:
    inputs: np.ndarray   # (n, d)
    targets: np.ndarray  # (n, 1)
    role: str
    seed: int
    target: str = ""

    def __len__(self):
        return len(self.inputs)

    def to_csv(self, path, variables=None):
        d = self.inputs.shape[1]
        names = list(variables) if variables else [f"x{i}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names + ["y"])
            for xi, yi in zip(self.inputs, self.targets[:, 0]):
                w.writerow([f"{v:.17g}" for v in xi] + [f"{yi:.17g}"])


def _spec(name, variables, domain, fn, formula):
    return TargetSpec(name, tuple(variables), tuple(tuple(d) for d in domain), fn, formula)


_REGISTRY = [
    _spec("sin_x_plus_y2", ["x", "y"], [(-2, 2), (-2, 2)],
          lambda x, y: np.sin(x + y ** 2), "sin(x + y^2)"),
    _spec("exp_sin_pi_x_plus_y2", ["x", "y"], [(-1, 1), (-1, 1)],
          lambda x, y: np.exp(np.sin(np.pi * x) + y ** 2), "exp(sin(pi x) + y^2)"),
    _spec("I.6.20", ["sigma", "theta"], [POS, ANGLE],
          lambda s, t: np.exp(-t ** 2 / (2 * s ** 2)) / np.sqrt(2 * np.pi * s ** 2),
          "exp(-theta^2/(2 sigma^2)) / sqrt(2 pi sigma^2)"),
    _spec("I.6.20b", ["sigma", "theta", "theta1"], [POS, ANGLE, ANGLE],
          lambda s, t, t1: np.exp(-(t - t1) ** 2 / (2 * s ** 2)) / np.sqrt(2 * np.pi * s ** 2),
          "exp(-(theta - theta1)^2/(2 sigma^2)) / sqrt(2 pi sigma^2)"),
    # differences enter squared only; kept away from 0 so the denominator stays bounded
    _spec("I.9.18", ["G", "m1", "m2", "dx", "dy", "dz"], [POS] * 6,
          lambda G, m1, m2, dx, dy, dz: G * m1 * m2 / (dx ** 2 + dy ** 2 + dz ** 2),
          "G m1 m2 / (dx^2 + dy^2 + dz^2)"),
    _spec("I.12.11", ["q", "Ef", "B", "v", "theta"], [POS, POS, POS, POS, ANGLE],
          lambda q, Ef, B, v, t: q * (Ef + B * v * np.sin(t)),
          "q (Ef + B v sin(theta))"),
    _spec("I.16.6", ["u", "v", "c"], [POS, POS, POS],
          lambda u, v, c: u * v / (1 + u * v / c ** 2),
          "u v / (1 + u v / c^2)"),
    _spec("I.18.4", ["m1", "r1", "m2", "r2"], [POS] * 4,
          lambda m1, r1, m2, r2: (m1 * r1 + m2 * r2) / (m1 + m2),
          "(m1 r1 + m2 r2) / (m1 + m2)"),
    # n < 1 keeps n sin(theta2) inside the arcsin domain
    _spec("I.26.2", ["n", "theta2"], [(0.5, 0.9), ANGLE],
          lambda n, t2: np.arcsin(n * np.sin(t2)),
          "arcsin(n sin(theta2))"),
    _spec("I.29.16", ["x1", "x2", "theta1", "theta2"], [POS, POS, ANGLE, ANGLE],
          lambda x1, x2, t1, t2: np.sqrt(x1 ** 2 + x2 ** 2 - 2 * x1 * x2 * np.cos(t1 - t2)),
          "sqrt(x1^2 + x2^2 - 2 x1 x2 cos(theta1 - theta2))"),
    _spec("I.30.3", ["I0", "n", "theta"], [POS, POS, ANGLE],
          lambda I0, n, t: I0 * np.sin(n * t / 2) ** 2 / np.sin(t / 2) ** 2,
          "I0 sin^2(n theta/2) / sin^2(theta/2)"),
    _spec("I.50.26", ["x1", "omega", "t", "alpha"], [POS] * 4,
          lambda x1, w, t, a: x1 * (np.cos(w * t) + a * np.cos(w * t) ** 2),
          "x1 (cos(omega t) + alpha cos^2(omega t))"),
    # n alpha <= 2.25 keeps 1 - n alpha / 3 >= 0.25
    _spec("II.11.27", ["n", "alpha", "epsilon", "Ef"], [(0.5, 1.5), (0.5, 1.5), POS, POS],
          lambda n, a, e, Ef: n * a * e * Ef / (1 - n * a / 3),
          "n alpha epsilon Ef / (1 - n alpha / 3)"),
    _spec("II.35.18", ["n0", "mu", "B", "kb", "T"], [POS] * 5,
          lambda n0, mu, B, kb, T: n0 / (np.exp(mu * B / (kb * T)) + np.exp(-mu * B / (kb * T))),
          "n0 / (exp(mu B/(kb T)) + exp(-mu B/(kb T)))"),
    _spec("III.10.19", ["mu", "Bx", "By", "Bz"], [POS] * 4,
          lambda mu, Bx, By, Bz: mu * np.sqrt(Bx ** 2 + By ** 2 + Bz ** 2),
          "mu sqrt(Bx^2 + By^2 + Bz^2)"),
    _spec("III.17.37", ["beta", "alpha", "theta"], [POS, POS, ANGLE],
          lambda beta, a, t: beta * (1 + a * np.cos(t)),
          "beta (1 + alpha cos(theta))"),
]

FEYNMAN = tuple(t.name for t in _REGISTRY[2:])


def registry():
    return list(_REGISTRY)


def get_target(name):
    for t in _REGISTRY:
        if t.name == name:
            return t
    raise ConfigError(f"unknown target {name!r}")


def sample(spec, n, seed, role="train"):
    """``n`` inputs drawn uniformly from the target's box, targets in closed form."""
    if n < 1:
        raise ConfigError("need at least one sample")
    rng = np.random.default_rng(seed)
    lo = np.array([d[0] for d in spec.domain], dtype=float)
    hi = np.array([d[1] for d in spec.domain], dtype=float)
    X = lo + (hi - lo) * rng.random((n, spec.arity))
    y = spec(X)[:, None]
    return Dataset(X, y, role, seed, spec.name)


def train_test(spec, seed, n_train=1024, n_test=1024):
    """Independent train and test draws for one seed."""
    ss = np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    train = sample(spec, n_train, a, "train")
    test = sample(spec, n_test, b, "test")
    train.seed = test.seed = seed
    return train, test
