"""Random rotation perturbations that turn a ground-truth pose into a training pair.

Random streams use numpy's ``Generator`` over the PCG64 bit generator, which
is portable and reproducible across platforms for a fixed seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rotgeo
from .errors import InvalidArgumentError
from .rotgeo import AxisAngle, UnitQuaternion


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True)
class NoiseConfig:
    """Distribution of the perturbation angle, in degrees.

    ``kind`` is ``"uniform"`` (``a`` = low, ``b`` = high) or ``"normal"``
    (``a`` = mean, ``b`` = standard deviation).
    """

    kind: str = "uniform"
    a: float = 0.0
    b: float = 30.0
    seed: int = 0
    resample: int = 1

    def __post_init__(self):
        if self.kind == "uniform":
            if not (0.0 <= self.a < self.b <= 180.0):
                raise InvalidArgumentError(f"uniform bounds must satisfy 0 <= lo < hi <= 180, got ({self.a}, {self.b})")
        elif self.kind == "normal":
            if self.a < 0 or self.b <= 0:
                raise InvalidArgumentError(f"normal needs mean >= 0 and sd > 0, got ({self.a}, {self.b})")
        else:
            raise InvalidArgumentError(f"unknown noise distribution {self.kind!r}")
        if self.resample < 1:
            raise InvalidArgumentError("resample factor must be >= 1")

    @classmethod
    def uniform(cls, lo_deg: float, hi_deg: float, seed: int = 0, resample: int = 1) -> NoiseConfig:
        return cls("uniform", float(lo_deg), float(hi_deg), seed, resample)

    @classmethod
    def normal(cls, mean_deg: float, sd_deg: float, seed: int = 0, resample: int = 1) -> NoiseConfig:
        return cls("normal", float(mean_deg), float(sd_deg), seed, resample)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> NoiseConfig:
        """Parse ``U(lo,hi)`` / ``N(mean,sd)`` (also ``uniform:lo,hi`` / ``normal:mean,sd``)."""
        t = text.strip().replace(" ", "")
        try:
            if t[:2].upper() in ("U(", "N(") and t.endswith(")"):
                kind = "uniform" if t[0].upper() == "U" else "normal"
                a, b = (float(v) for v in t[2:-1].split(","))
            else:
                name, args = t.split(":", 1)
                kind = {"uniform": "uniform", "u": "uniform", "normal": "normal", "n": "normal"}[name.lower()]
                a, b = (float(v) for v in args.split(","))
        except (ValueError, KeyError) as exc:
            raise InvalidArgumentError(f"cannot parse noise spec {text!r}") from exc
        return cls(kind, a, b, seed)

    def label(self) -> str:
        return f"{'U' if self.kind == 'uniform' else 'N'}({self.a:g},{self.b:g})"

    def draw_degrees(self, rng: np.random.Generator) -> float:
        if self.kind == "uniform":
            deg = rng.uniform(self.a, self.b)
        else:
            deg = rng.normal(self.a, self.b)
        return float(min(max(deg, 0.0), 180.0))


@dataclass(frozen=True)
class NoisePair:
    q_in: UnitQuaternion
    q_label: UnitQuaternion
    q_noise: UnitQuaternion
    angle: float = field(default=0.0)


def noise_axis(alpha: float, s: float) -> np.ndarray:
    r = math.sqrt(max(0.0, 1.0 - s * s))
    return np.array([r * math.cos(alpha), r * math.sin(alpha), s])


def sample_noise_axis(rng: np.random.Generator) -> np.ndarray:
    """Unit axis uniform on the sphere (Archimedes' cylinder projection)."""
    alpha = rng.uniform(0.0, 2.0 * math.pi)
    s = rng.uniform(-1.0, 1.0)
    return noise_axis(alpha, s)


def sample_noise(cfg: NoiseConfig, rng: np.random.Generator) -> AxisAngle:
    axis = sample_noise_axis(rng)
    return AxisAngle(tuple(axis), rotgeo.deg2rad(cfg.draw_degrees(rng)))


def perturb_with(q_gt: UnitQuaternion, noise: AxisAngle) -> NoisePair:
    q_noise = rotgeo.axis_angle_to_quat(noise)
    q_in = rotgeo.quat_mul(q_gt, q_noise)
    q_label = rotgeo.axis_angle_to_quat(AxisAngle(noise.axis, -noise.angle))
    return NoisePair(q_in, q_label.canonical(), q_noise, noise.angle)


def perturb(q_gt: UnitQuaternion, cfg: NoiseConfig, rng: np.random.Generator) -> NoisePair:
    """Rotate ``q_gt`` about a random axis; the label undoes that rotation.

    The label is stored with a non-negative scalar part.
    """
    return perturb_with(q_gt, sample_noise(cfg, rng))


def perturb_batch(q_gts, cfg: NoiseConfig, rng: np.random.Generator) -> list[NoisePair]:
    return [perturb(q, cfg, rng) for q in q_gts]
