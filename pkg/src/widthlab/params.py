"""abc-parameterizations at the granularity of layer roles.

Each role carries an exponent triple (a, b, c):

* multiplier ``n**-a`` applied in the forward pass,
* initialization ``W ~ N(0, n**-2b)``,
* learning rate ``eta ∝ n**-c``.

Presets leave ``c`` at zero; learning-rate exponents come from
:func:`widthlab.constraints.max_stable_lr` or are supplied explicitly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

from .scalealg import Rat, format_rat, parse_rat, rat

HALF = Fraction(1, 2)


class LayerRole(str, enum.Enum):
    EMBEDDING = "embedding"
    HIDDEN = "hidden"
    READOUT = "readout"

    @classmethod
    def of_layer(cls, index: int, depth: int) -> "LayerRole":
        """Role of weight matrix ``W_{index}`` (1-based) in a model with ``depth`` = L."""
        if not 1 <= index <= depth + 1:
            raise ValueError(f"layer {index} outside 1..{depth + 1}")
        if index == 1:
            return cls.EMBEDDING
        if index == depth + 1:
            return cls.READOUT
        return cls.HIDDEN


ROLES = (LayerRole.EMBEDDING, LayerRole.HIDDEN, LayerRole.READOUT)


class OptimizerKind(str, enum.Enum):
    """The three width-scaling regimes. Adafactor and Adam+parameter scaling share one."""

    SGD = "sgd"
    ADAM = "adam"
    ADAFACTOR = "adafactor"

    @classmethod
    def parse(cls, name: str) -> "OptimizerKind":
        key = name.strip().lower().replace("-", "").replace("_", "").replace("+", "")
        aliases = {
            "sgd": cls.SGD,
            "adam": cls.ADAM,
            "adamatan2": cls.ADAM,
            "adafactor": cls.ADAFACTOR,
            "adafactorfamily": cls.ADAFACTOR,
            "adamps": cls.ADAFACTOR,
        }
        if key not in aliases:
            raise ValueError(f"unknown optimizer {name!r}")
        return aliases[key]


@dataclass(frozen=True)
class LayerTriple:
    a: Rat = Fraction(0)
    b: Rat = Fraction(0)
    c: Rat = Fraction(0)

    def __post_init__(self):
        for k in ("a", "b", "c"):
            object.__setattr__(self, k, rat(getattr(self, k)))

    def __str__(self):
        return f"({format_rat(self.a)}, {format_rat(self.b)}, {format_rat(self.c)})"


@dataclass(frozen=True)
class Parameterization:
    embedding: LayerTriple
    hidden: LayerTriple
    readout: LayerTriple
    name: Optional[str] = field(default=None, compare=False)

    def triple(self, role: LayerRole) -> LayerTriple:
        return getattr(self, LayerRole(role).value)

    def with_triple(self, role: LayerRole, t: LayerTriple) -> "Parameterization":
        return replace(self, **{LayerRole(role).value: t})

    def with_c(self, c) -> "Parameterization":
        """Replace the learning-rate exponents; ``c`` is (emb, hid, read) or a role mapping."""
        if isinstance(c, dict):
            c = tuple(c[r] for r in ROLES)
        p = self
        for role, cr in zip(ROLES, c):
            p = p.with_triple(role, replace(p.triple(role), c=rat(cr)))
        return p

    @property
    def c(self) -> tuple:
        return tuple(self.triple(r).c for r in ROLES)

    def to_dict(self) -> dict:
        d = {
            r.value: {k: format_rat(getattr(self.triple(r), k)) for k in ("a", "b", "c")}
            for r in ROLES
        }
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Parameterization":
        triples = {}
        for r in ROLES:
            e = d[r.value]
            triples[r.value] = LayerTriple(*(parse_rat(str(e.get(k, "0"))) for k in ("a", "b", "c")))
        return cls(name=d.get("name"), **triples)


_PRESETS = {
    # name: ((a, b) embedding, hidden, readout)
    "standard": ((0, 0), (0, HALF), (0, HALF)),
    "ntk": ((0, 0), (HALF, 0), (HALF, 0)),
    "mup": ((-HALF, HALF), (0, HALF), (HALF, HALF)),
    "mfp": ((0, 0), (HALF, 0), (1, 0)),
}
PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> Parameterization:
    key = name.strip().lower()
    if key not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {', '.join(_PRESETS)}")
    emb, hid, read = (LayerTriple(rat(a), rat(b)) for a, b in _PRESETS[key])
    return Parameterization(emb, hid, read, name=key)


@dataclass(frozen=True)
class InitReport:
    stable_at_init: bool
    violations: tuple = ()  # (role, constraint, lhs)


def check_init_stability(p: Parameterization) -> InitReport:
    """Activations Θ(1) and logits O(1) at initialization."""
    v = []
    s = p.embedding.a + p.embedding.b
    if s != 0:
        v.append((LayerRole.EMBEDDING, "a+b=0", s))
    s = p.hidden.a + p.hidden.b
    if s != HALF:
        v.append((LayerRole.HIDDEN, "a+b=1/2", s))
    s = p.readout.a + p.readout.b
    if s < HALF:
        v.append((LayerRole.READOUT, "a+b>=1/2", s))
    return InitReport(not v, tuple(v))


def describe_violations(report: InitReport) -> str:
    return "; ".join(
        f"{role.value}: {name} violated (a+b = {format_rat(lhs)})" for role, name, lhs in report.violations
    )


_LR_SHIFT = {OptimizerKind.SGD: 2, OptimizerKind.ADAM: 1, OptimizerKind.ADAFACTOR: 0}


def reparameterize(p: Parameterization, role: LayerRole, theta, optimizer: OptimizerKind) -> Parameterization:
    """Move a factor n**theta from the init into the multiplier, correcting c per optimizer."""
    theta = rat(theta)
    t = p.triple(role)
    shift = _LR_SHIFT[OptimizerKind(optimizer)]
    new = LayerTriple(t.a + theta, t.b - theta, t.c - shift * theta)
    return replace(p.with_triple(role, new), name=None)
