"""Reference table of the four named parameterizations: init variance, multiplier,
init gradient scale and max-stable LR scaling under full / no alignment.

``GOLDEN`` is stored as display text (e.g. "1/√n") rather than recomputed, so that
``widthlab table --check`` does not depend on the solver it is checking.
"""
from __future__ import annotations

from fractions import Fraction

from .constraints import AlignmentAssumption, gradient_exponents, max_stable_lr
from .params import PRESET_NAMES, ROLES, OptimizerKind, preset

COLUMNS = (
    "Init Variance",
    "Multiplier",
    "Gradient",
    "SGD LR Full",
    "Adam LR Full",
    "Adafactor LR Full",
    "SGD LR No",
    "Adam LR No",
    "Adafactor LR No",
)

_LR_COLUMNS = [
    (opt, align)
    for align in ("full", "no")
    for opt in (OptimizerKind.SGD, OptimizerKind.ADAM, OptimizerKind.ADAFACTOR)
]

GOLDEN = {
    ("standard", "embedding"): ("1", "1", "1/√n", "√n", "1", "1", "√n", "1", "1"),
    ("standard", "hidden"): ("1/n", "1", "1/√n", "1/√n", "1/n", "1/√n", "1", "1/√n", "1"),
    ("standard", "readout"): ("1/n", "1", "1", "1/n", "1/n", "1/√n", "1/√n", "1/√n", "1"),
    ("ntk", "embedding"): ("1", "1", "1/√n", "√n", "1", "1", "√n", "1", "1"),
    ("ntk", "hidden"): ("1", "1/√n", "1/n", "√n", "1/√n", "1/√n", "n", "1", "1"),
    ("ntk", "readout"): ("1", "1/√n", "1/√n", "1", "1/√n", "1/√n", "√n", "1", "1"),
    ("mup", "embedding"): ("1/n", "√n", "1/√n", "1", "1/√n", "1", "1", "1/√n", "1"),
    ("mup", "hidden"): ("1/n", "1", "1/n", "1", "1/n", "1/√n", "√n", "1/√n", "1"),
    ("mup", "readout"): ("1/n", "1/√n", "1/√n", "1", "1/√n", "1", "1", "1", "1"),
    ("mfp", "embedding"): ("1", "1", "1/n", "n", "1", "1", "n", "1", "1"),
    ("mfp", "hidden"): ("1", "1/√n", "1/n^1.5", "n", "1/√n", "1/√n", "n^1.5", "1", "1"),
    ("mfp", "readout"): ("1", "1/n", "1/n", "n", "1", "1", "n", "√n", "1"),
}


def n_power(e) -> str:
    """Render n**e the way the table prints it: 1, √n, 1/n, n^1.5, ..."""
    e = Fraction(e)
    if e == 0:
        return "1"
    mag = abs(e)
    if mag == Fraction(1, 2):
        body = "√n"
    elif mag == 1:
        body = "n"
    elif mag.denominator == 1:
        body = f"n^{mag.numerator}"
    else:
        body = f"n^{float(mag):g}"
    return body if e > 0 else f"1/{body}"


def parse_n_power(text: str) -> Fraction:
    """Inverse of :func:`n_power`."""
    s = text.strip()
    if s == "1":
        return Fraction(0)
    sign = 1
    if s.startswith("1/"):
        sign, s = -1, s[2:]
    if s == "√n":
        return sign * Fraction(1, 2)
    if s == "n":
        return Fraction(sign)
    if s.startswith("n^"):
        return sign * Fraction(s[2:])
    raise ValueError(f"cannot parse n-power {text!r}")


def regenerate(depth: int = 3) -> dict:
    """Recompute every cell from the presets and the constraint solver."""
    aligns = {"full": AlignmentAssumption.full_alignment(), "no": AlignmentAssumption.no_alignment()}
    solved = {}
    out = {}
    for name in PRESET_NAMES:
        p = preset(name)
        g = gradient_exponents(p)
        for opt, align in _LR_COLUMNS:
            solved[(opt, align)] = max_stable_lr(p, opt, aligns[align], depth)[0]
        for i, role in enumerate(ROLES):
            t = p.triple(role)
            row = [n_power(-2 * t.b), n_power(-t.a), n_power(-g[role])]
            row += [n_power(-solved[key][i]) for key in _LR_COLUMNS]
            out[(name, role.value)] = tuple(row)
    return out


def compare(table: dict, golden: dict = GOLDEN) -> list:
    """Cells that differ, as (preset, role, column, expected, got)."""
    diffs = []
    for key, expected in golden.items():
        got = table.get(key)
        for col, e, g in zip(COLUMNS, expected, got or ("<missing>",) * len(COLUMNS)):
            if e != g:
                diffs.append((key[0], key[1], col, e, g))
    return diffs


def render(table: dict) -> str:
    head = ("Param", "Layer") + COLUMNS
    rows = [(k[0], k[1]) + v for k, v in table.items()]
    widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
    fmt = lambda r: "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()  # noqa: E731
    lines = [fmt(head), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)
