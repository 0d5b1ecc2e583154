"""Stability / nontriviality constraints of the alignment-general space, and a solver
for the maximum stable per-role learning-rate exponents.

Every quantity in the system (residuals ``r_l``, the logit terms, Adafactor's
``c >= 0``) is a minimum of affine functions of the three learning-rate
exponents ``(c_emb, c_hid, c_read)``. We keep it in that form (``_Expr``) so the
same structure is evaluated for a report and solved exactly by the greedy
per-role search.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .params import (
    HALF,
    ROLES,
    InitReport,
    LayerRole,
    OptimizerKind,
    Parameterization,
    check_init_stability,
    describe_violations,
)
from .scalealg import Rat, format_rat, parse_rat, rat

__all__ = [
    "AlignmentAssumption",
    "ConstraintReport",
    "GradientExponents",
    "InitStabilityError",
    "OptimizerKind",
    "Regime",
    "classify",
    "gradient_exponents",
    "max_stable_lr",
    "readout_input_floor",
    "training_stability",
    "update_exponents",
]

DEFAULT_DEPTH = 3
_EMB, _HID, _READ = 0, 1, 2


class InitStabilityError(ValueError):
    def __init__(self, report: InitReport):
        self.report = report
        super().__init__("parameterization is not stable at initialization: " + describe_violations(report))


def _require_init_stable(p: Parameterization) -> None:
    rep = check_init_stability(p)
    if not rep.stable_at_init:
        raise InitStabilityError(rep)


@dataclass(frozen=True)
class AlignmentAssumption:
    alpha_hidden: Rat
    alpha_readout: Rat
    omega_hidden: Rat
    omega_readout: Rat
    u_hidden: Rat
    u_readout: Rat
    name: Optional[str] = field(default=None, compare=False)

    FIELDS = ("alpha_hidden", "alpha_readout", "omega_hidden", "omega_readout", "u_hidden", "u_readout")

    def __post_init__(self):
        for k in self.FIELDS:
            v = rat(getattr(self, k))
            if not HALF <= v <= 1:
                raise ValueError(f"{k} = {format_rat(v)} outside [1/2, 1]")
            object.__setattr__(self, k, v)

    @classmethod
    def full_alignment(cls):
        return cls(1, 1, HALF, HALF, 1, 1, name="full")

    @classmethod
    def no_alignment(cls):
        return cls(HALF, HALF, HALF, HALF, HALF, HALF, name="no")

    @classmethod
    def tensor_programs(cls):
        # u is unconstrained there since alpha = 1 dominates it; take u = 1.
        return cls(1, 1, HALF, 1, 1, 1, name="tensor_programs")

    @classmethod
    def named(cls, name: str):
        key = name.strip().lower().replace("-", "_")
        table = {
            "full": cls.full_alignment,
            "full_alignment": cls.full_alignment,
            "no": cls.no_alignment,
            "none": cls.no_alignment,
            "no_alignment": cls.no_alignment,
            "tensor_programs": cls.tensor_programs,
            "tp": cls.tensor_programs,
        }
        if key not in table:
            raise ValueError(f"unknown alignment preset {name!r}")
        return table[key]()

    def to_dict(self) -> dict:
        d = {k: format_rat(getattr(self, k)) for k in self.FIELDS}
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict):
        return cls(*(parse_rat(str(d[k])) for k in cls.FIELDS), name=d.get("name"))


@dataclass(frozen=True)
class GradientExponents:
    embedding: Rat
    hidden: Rat
    readout: Rat

    def __getitem__(self, role) -> Rat:
        return getattr(self, LayerRole(role).value)


def gradient_exponents(p: Parameterization) -> GradientExponents:
    """Negative width exponents of the gradient RMS at initialization."""
    _require_init_stable(p)
    A, B = p.readout.a, p.readout.b
    return GradientExponents(p.embedding.a + A + B, p.hidden.a + A + B, A)


def update_exponents(p: Parameterization, opt: OptimizerKind) -> dict:
    """Negative width exponent of the first update ΔW per role."""
    g = gradient_exponents(p)
    opt = OptimizerKind(opt)
    out = {}
    for role in ROLES:
        t = p.triple(role)
        if opt is OptimizerKind.SGD:
            out[role] = t.c + g[role]
        elif opt is OptimizerKind.ADAM:
            out[role] = t.c
        else:
            out[role] = t.c + t.b
    return out


def readout_input_floor(p: Parameterization, al: AlignmentAssumption) -> Rat:
    """Smallest r_L the logit term W·Δz allows; > 0 means feature learning is impossible."""
    return max(Fraction(0), al.omega_readout - (p.readout.a + p.readout.b))


# --- min-of-affine expressions over (c_emb, c_hid, c_read) ---------------------------
# An _Expr is a tuple of (const, coef) pieces; its value is min over pieces of
# const + coef·c. Pieces with equal coef keep only the smallest const.


def _norm(pieces) -> tuple:
    best = {}
    for k, coef in pieces:
        if coef not in best or k < best[coef]:
            best[coef] = k
    return tuple(sorted(((k, coef) for coef, k in best.items()), key=lambda p: (p[1], p[0])))


def _const(k) -> tuple:
    return ((Fraction(k), (0, 0, 0)),)


def _var(i: int, k=0, scale: int = 1) -> tuple:
    coef = [0, 0, 0]
    coef[i] = scale
    return ((Fraction(k), tuple(coef)),)


def _add(*xs) -> tuple:
    acc = _const(0)
    for x in xs:
        acc = _norm((k1 + k2, tuple(a + b for a, b in zip(c1, c2))) for k1, c1 in acc for k2, c2 in x)
    return acc


def _min(*xs) -> tuple:
    return _norm(p for x in xs for p in x)


def _value(x, c) -> Rat:
    return min(k + sum(ci * v for ci, v in zip(coef, c)) for k, coef in x)


@dataclass
class _System:
    """Named stability terms; ``hidden`` holds one dict of terms per hidden layer."""

    embedding: tuple
    hidden: list
    readout_input: tuple
    logit: dict
    adafactor: list  # per-role c >= 0 terms, empty unless AdafactorFamily


def _build(p: Parameterization, opt: OptimizerKind, al: AlignmentAssumption, depth: int) -> _System:
    if depth < 1:
        raise ValueError("depth (number of non-readout layers L) must be >= 1")
    opt = OptimizerKind(opt)
    e, h, rd = p.embedding, p.hidden, p.readout
    A, B = rd.a, rd.b
    if opt is OptimizerKind.SGD:
        # Readout weights after an update scale like n^-min(b, a+c); earlier-layer
        # gradients pick this up through the readout's a + (weight exponent).
        G = _min(_const(A + B), _var(_READ, 2 * A))
        r1 = _add(G, _var(_EMB, 2 * e.a))
        upd_h = _add(G, _var(_HID, 2 * h.a))
        upd_r = _var(_READ, 2 * A)
    elif opt is OptimizerKind.ADAM:
        r1 = _var(_EMB, e.a)
        upd_h = _var(_HID, h.a)
        upd_r = _var(_READ, A)
    else:
        r1 = _var(_EMB, e.a + e.b)
        upd_h = _var(_HID, h.a + h.b)
        upd_r = _var(_READ, A + B)

    r = r1
    hidden = []
    for _ in range(depth - 1):
        terms = {
            "hidden.dWz": _add(upd_h, _const(-al.alpha_hidden)),
            "hidden.dWdz": _add(upd_h, r, _const(-al.u_hidden)),
            "hidden.Wdz": _add(r, _const(HALF - al.omega_hidden)),
        }
        hidden.append(terms)
        r = _min(*terms.values())

    logit = {
        "logit.Wdz": _add(r, _const(A + B - al.omega_readout)),
        "logit.dWz": _add(upd_r, _const(-al.alpha_readout)),
        "logit.dWdz": _add(upd_r, r, _const(-al.u_readout)),
    }
    ada = [_var(i) for i in range(3)] if opt is OptimizerKind.ADAFACTOR else []
    return _System(r1, hidden, r, logit, ada)


def _pieces(system: _System):
    """All affine pieces that must be >= 0 for stability."""
    yield from system.embedding
    for terms in system.hidden:
        for x in terms.values():
            yield from x
    for x in system.logit.values():
        yield from x
    for x in system.adafactor:
        yield from x


class Regime(str, enum.Enum):
    UNSTABLE = "unstable"
    TRIVIAL = "trivial"
    KERNEL = "kernel"
    FEATURE_LEARNING = "feature_learning"


@dataclass(frozen=True)
class ConstraintReport:
    g: GradientExponents
    r_embedding: Rat
    r_hidden: Optional[Rat]
    r_readout_input: Rat
    logit_margin: Rat
    stable: bool
    nontrivial: bool
    feature_learning: bool
    binding: tuple
    adafactor_extra_ok: bool
    optimizer: OptimizerKind = OptimizerKind.ADAM
    depth: int = DEFAULT_DEPTH
    c: tuple = ()

    @property
    def regime(self) -> Regime:
        if not self.stable:
            return Regime.UNSTABLE
        if not self.nontrivial:
            return Regime.TRIVIAL
        return Regime.FEATURE_LEARNING if self.feature_learning else Regime.KERNEL

    def same_dynamics(self, other: "ConstraintReport") -> bool:
        """Equality of everything that is invariant under reparameterization (not g, not c)."""
        keys = ("r_embedding", "r_hidden", "r_readout_input", "logit_margin", "stable",
                "nontrivial", "feature_learning", "binding", "adafactor_extra_ok")
        return all(getattr(self, k) == getattr(other, k) for k in keys)

    def to_dict(self) -> dict:
        f = lambda x: None if x is None else format_rat(x)  # noqa: E731
        return {
            "optimizer": self.optimizer.value,
            "depth": self.depth,
            "c": {r.value: format_rat(x) for r, x in zip(ROLES, self.c)},
            "g": {r.value: format_rat(self.g[r]) for r in ROLES},
            "r_embedding": f(self.r_embedding),
            "r_hidden": f(self.r_hidden),
            "r_readout_input": f(self.r_readout_input),
            "logit_margin": f(self.logit_margin),
            "stable": self.stable,
            "nontrivial": self.nontrivial,
            "feature_learning": self.feature_learning,
            "adafactor_extra_ok": self.adafactor_extra_ok,
            "regime": self.regime.value,
            "binding": [[name, format_rat(v)] for name, v in self.binding],
        }


def training_stability(
    p: Parameterization,
    opt: OptimizerKind,
    al: AlignmentAssumption,
    depth: int = DEFAULT_DEPTH,
) -> ConstraintReport:
    """Evaluate every stability / nontriviality term at the c stored in ``p``."""
    g = gradient_exponents(p)
    opt = OptimizerKind(opt)
    c = p.c
    sys_ = _build(p, opt, al, depth)

    named = [("embedding.dWx", _value(sys_.embedding, c))]
    hidden_r = []
    for terms in sys_.hidden:
        vals = {k: _value(x, c) for k, x in terms.items()}
        named.extend(vals.items())
        hidden_r.append(min(vals.values()))
    logit = {k: _value(x, c) for k, x in sys_.logit.items()}
    named.extend(logit.items())
    ada_ok = True
    if opt is OptimizerKind.ADAFACTOR:
        named.extend(("adafactor.c_nonneg", ci) for ci in c)
        ada_ok = all(ci >= 0 for ci in c)

    r1 = named[0][1]
    r_L = _value(sys_.readout_input, c)
    margin = min(logit.values())
    stable = r1 >= 0 and all(r >= 0 for r in hidden_r) and margin >= 0 and ada_ok
    nontrivial = any(v == 0 for v in logit.values())
    lo = min(v for _, v in named)
    binding = []
    for name, v in named:
        if v == lo and (name, v) not in binding:
            binding.append((name, v))
    return ConstraintReport(
        g=g,
        r_embedding=r1,
        r_hidden=hidden_r[-1] if hidden_r else None,
        r_readout_input=r_L,
        logit_margin=margin,
        stable=stable,
        nontrivial=nontrivial,
        feature_learning=stable and r_L == 0,
        binding=tuple(binding),
        adafactor_extra_ok=ada_ok,
        optimizer=opt,
        depth=depth,
        c=c,
    )


def max_stable_lr(
    p: Parameterization,
    opt: OptimizerKind,
    al: AlignmentAssumption,
    depth: int = DEFAULT_DEPTH,
):
    """Smallest c per role (largest learning rate) keeping the system stable.

    Roles are solved greedily, each taking the least value allowed by every
    constraint piece whose variables are already fixed. SGD solves the readout
    first, with its update held no larger than its initialization so the
    earlier layers see their initialization-time gradient scale.

    Returns ``(c, report)`` with ``c`` ordered (embedding, hidden, readout).
    """
    _require_init_stable(p)
    opt = OptimizerKind(opt)
    sys_ = _build(p, opt, al, depth)
    pieces = list(_pieces(sys_))
    if opt is OptimizerKind.SGD:
        A, B = p.readout.a, p.readout.b
        pieces += list(_var(_READ, A - B))  # 2A + c_read >= A + B
        order = (_READ, _EMB, _HID)
    else:
        order = (_EMB, _HID, _READ)

    for k, coef in pieces:
        if coef == (0, 0, 0) and k < 0:
            raise ValueError(f"no learning rate can satisfy a constant constraint ({format_rat(k)} >= 0)")

    c = [None, None, None]
    fixed = set()
    for i in order:
        lower = None
        for k, coef in pieces:
            if coef[i] <= 0:
                continue
            if any(coef[j] and j not in fixed and j != i for j in range(3)):
                continue
            rest = k + sum(coef[j] * c[j] for j in fixed)
            bound = -rest / coef[i]
            lower = bound if lower is None else max(lower, bound)
        if lower is None:
            raise ValueError(f"{ROLES[i].value} learning rate is unbounded")
        c[i] = Fraction(lower)
        fixed.add(i)

    solved = p.with_c(tuple(c))
    return tuple(c), training_stability(solved, opt, al, depth)


def classify(p: Parameterization, opt: OptimizerKind, al: AlignmentAssumption, c=None,
             depth: int = DEFAULT_DEPTH) -> Regime:
    if c is not None:
        p = p.with_c(c)
    return training_stability(p, opt, al, depth).regime
