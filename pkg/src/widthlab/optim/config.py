"""Optimizer hyperparameters, epsilon policies and the per-role LR schedule."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

from ..constraints import GradientExponents
from ..params import ROLES, LayerRole, OptimizerKind
from ..scalealg import rat


class OptimizerFamily(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"
    ADAM_PS = "adam_ps"
    ADAM_ATAN2 = "adam_atan2"

    @classmethod
    def parse(cls, name: str) -> "OptimizerFamily":
        key = name.strip().lower().replace("-", "_").replace("+", "_")
        aliases = {"adamps": "adam_ps", "adam_parameter_scaling": "adam_ps", "adamatan2": "adam_atan2"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown optimizer kind {name!r}") from None

    @property
    def scaling(self) -> OptimizerKind:
        """Width-scaling regime used by the constraint engine."""
        return {
            OptimizerFamily.SGD: OptimizerKind.SGD,
            OptimizerFamily.ADAM: OptimizerKind.ADAM,
            OptimizerFamily.ADAM_ATAN2: OptimizerKind.ADAM,
            OptimizerFamily.ADAM_PS: OptimizerKind.ADAFACTOR,
        }[self]


class EpsilonMode(str, enum.Enum):
    CONSTANT = "constant"
    PER_LAYER = "per_layer"
    NONE = "none"


@dataclass(frozen=True)
class EpsilonPolicy:
    mode: EpsilonMode = EpsilonMode.CONSTANT
    base_epsilon: float = 1e-9
    base_width: int = 1024
    gradient_exponents: Optional[GradientExponents] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", EpsilonMode(self.mode))
        if self.base_epsilon <= 0:
            raise ValueError("base_epsilon must be positive")
        if self.base_width < 1:
            raise ValueError("base_width must be a positive integer")
        if self.mode is EpsilonMode.PER_LAYER and self.gradient_exponents is None:
            raise ValueError("per-layer epsilon needs gradient exponents")


def per_layer_epsilon(policy: EpsilonPolicy, role: LayerRole, n: int) -> float:
    """base * (n / base_width) ** -g_role, tracking the init gradient scale."""
    if policy.gradient_exponents is None:
        raise ValueError("per-layer epsilon needs gradient exponents")
    g = float(policy.gradient_exponents[role])
    return policy.base_epsilon * (n / policy.base_width) ** (-g)


def epsilon_for(policy: EpsilonPolicy, role: LayerRole, n: int) -> float:
    if policy.mode is EpsilonMode.NONE:
        return 0.0
    if policy.mode is EpsilonMode.CONSTANT:
        return policy.base_epsilon
    return per_layer_epsilon(policy, role, n)


@dataclass(frozen=True)
class OptimizerConfig:
    """Defaults: SGD momentum 0.9; Adam betas 0.9/0.98, eps 1e-9."""

    kind: OptimizerFamily = OptimizerFamily.ADAM
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon_policy: EpsilonPolicy = field(default_factory=EpsilonPolicy)
    atan2_a: float = 1.0
    atan2_b: float = 1.0
    update_clip_rms: Optional[float] = None
    bias_correction: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerFamily(self.kind))
        if not 0 <= self.beta1 < 1:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0 <= self.beta2 < 1:
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if self.atan2_a <= 0 or self.atan2_b <= 0:
            raise ValueError("atan2 constants must be positive")
        if self.update_clip_rms is not None and self.update_clip_rms <= 0:
            raise ValueError("update_clip_rms must be positive")

    @property
    def scaling(self) -> OptimizerKind:
        return self.kind.scaling


class Decay(str, enum.Enum):
    NONE = "none"
    COSINE = "cosine"


@dataclass(frozen=True)
class LearningRateSchedule:
    """eta_role(n, t) = base_lr * gamma_role * (n / base_width) ** -c_role * schedule(t)."""

    base_lr: float
    gamma: tuple = (1.0, 1.0, 1.0)
    c: tuple = (Fraction(0), Fraction(0), Fraction(0))
    base_width: int = 256
    warmup_steps: int = 0
    total_steps: int = 0
    decay: Decay = Decay.NONE

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(rat(x) for x in self.c))
        object.__setattr__(self, "gamma", tuple(float(x) for x in self.gamma))
        object.__setattr__(self, "decay", Decay(self.decay))
        if len(self.c) != 3 or len(self.gamma) != 3:
            raise ValueError("gamma and c need one entry per role (embedding, hidden, readout)")
        if self.base_lr < 0 or any(g <= 0 for g in self.gamma):
            raise ValueError("base_lr must be >= 0 and gamma entries positive")
        if self.base_width < 1 or self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("bad schedule sizes")

    def multiplier(self, t: int) -> float:
        if self.warmup_steps and t < self.warmup_steps:
            return t / self.warmup_steps
        if self.decay is Decay.COSINE and self.total_steps > self.warmup_steps:
            frac = min(1.0, (t - self.warmup_steps) / (self.total_steps - self.warmup_steps))
            return 0.5 * (1.0 + math.cos(math.pi * frac))
        return 1.0

    def role_index(self, role) -> int:
        return ROLES.index(LayerRole(role))

    def effective_lr(self, role: LayerRole, n: int, t: int) -> float:
        i = self.role_index(role)
        return self.base_lr * self.gamma[i] * (n / self.base_width) ** (-float(self.c[i])) * self.multiplier(t)

    def with_base_lr(self, base_lr: float) -> "LearningRateSchedule":
        return replace(self, base_lr=base_lr)


def effective_lr(s: LearningRateSchedule, role: LayerRole, n: int, t: int) -> float:
    return s.effective_lr(role, n, t)

