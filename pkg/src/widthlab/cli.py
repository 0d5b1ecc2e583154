"""Command-line front end: ``widthlab {solve|table|equiv|sweep|coordcheck|lrsweep}``.

Run configs are INI files (``configparser`` dialect). Rationals are written
``p/q``; lists are comma separated. See README for the full key list.

Exit codes: 0 ok, 1 internal or IO error, 2 config error, 3 check failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Optional

from . import reftable
from .constraints import (
    AlignmentAssumption,
    gradient_exponents,
    max_stable_lr,
    training_stability,
)
from .empirics import (
    DEFAULT_WIDTHS,
    QUANTITIES,
    AllDivergedError,
    TrainSpec,
    geometric_grid,
    lr_sweep,
    max_relative_deviation,
    trace_filename,
    twin_losses,
    width_sweep,
)
from .optim import (
    Decay,
    EpsilonMode,
    EpsilonPolicy,
    LearningRateSchedule,
    OptimizerConfig,
    OptimizerFamily,
)
from .params import (
    PRESET_NAMES,
    ROLES,
    LayerRole,
    LayerTriple,
    OptimizerKind,
    Parameterization,
    check_init_stability,
    describe_violations,
    preset,
    reparameterize,
)
from .scalealg import format_rat, parse_rat, rat

SCHEMA = "widthlab-run"
SCHEMA_VERSION = 1

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2, 3

C_MODES = ("solve", "global", "explicit")
ALIGNMENT_FIELDS = ("alpha_hidden", "alpha_readout", "omega_hidden", "omega_readout", "u_hidden", "u_readout")


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class ModelSection:
    d: int = 32
    L: int = 3
    nonlinearity: str = "identity"
    batch_size: int = 32
    widths: tuple = DEFAULT_WIDTHS
    seeds: tuple = (0, 1, 2, 3, 4)
    steps: int = 50
    fit_steps: tuple = (0,)
    lr_grid_min: float = 2.0**-12
    lr_grid_max: float = 2.0**-4
    lr_grid_ratio: float = 2.0**0.5
    tolerance: float = 0.1
    steep_tolerance: float = 0.15


@dataclass(frozen=True)
class RunConfig:
    parameterization: Parameterization = field(default_factory=lambda: preset("standard"))
    preset_name: Optional[str] = "standard"
    c_mode: str = "solve"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: LearningRateSchedule = field(default_factory=lambda: LearningRateSchedule(base_lr=2.0**-7, base_width=128))
    alignment: AlignmentAssumption = field(default_factory=AlignmentAssumption.full_alignment)
    alignment_name: Optional[str] = "full"
    model: ModelSection = field(default_factory=ModelSection)
    output_dir: str = "widthlab_out"

    @property
    def alignment_label(self) -> str:
        return self.alignment_name or "custom"

    @property
    def preset_label(self) -> str:
        return self.preset_name or "custom"


# -- parsing -----------------------------------------------------------------

def _line_index(text: str) -> dict:
    """{(section, key): line number} so errors can point at the offending line."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = i
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m and section:
            out[(section, m.group(1).strip().lower())] = i
    return out


class _Reader:
    def __init__(self, cp: configparser.ConfigParser, lines: dict):
        self.cp, self.lines, self.used = cp, lines, set()

    def line(self, section, key=None):
        return self.lines.get((section, key)) or self.lines.get((section, None))

    def has(self, section, key):
        return self.cp.has_option(section, key)

    def get(self, section, key, conv=str, default=None):
        if not self.cp.has_option(section, key):
            return default
        self.used.add((section, key))
        raw = self.cp.get(section, key).strip()
        try:
            return conv(raw)
        except (ValueError, TypeError, ZeroDivisionError) as e:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {e}", self.line(section, key)) from None

    def fail(self, section, key, msg):
        raise ConfigError(f"[{section}] {key}: {msg}", self.line(section, key))


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _opt_float(s: str):
    return None if s.lower() in ("none", "") else float(s)


def _list(conv):
    def f(s):
        items = [x.strip() for x in s.split(",") if x.strip()]
        if not items:
            raise ValueError("empty list")
        return tuple(conv(x) for x in items)
    return f


def _lr_value(s: str) -> float:
    """Float or a power of two written 2^k."""
    s = s.strip()
    if s.startswith("2^"):
        return 2.0 ** float(s[2:])
    return float(s)


def _triple(s: str) -> LayerTriple:
    parts = [parse_rat(x) for x in s.split(",")]
    if len(parts) != 3:
        raise ValueError("expected 'a, b, c'")
    return LayerTriple(*parts)


_SECTIONS = ("widthlab", "parameterization", "optimizer", "schedule", "alignment", "model", "output")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.option!r} in [{e.section}]", e.lineno) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno) from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("missing section header", e.lineno) from None
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("cannot parse line", line) from None
    r = _Reader(cp, _line_index(text))

    for s in cp.sections():
        if s not in _SECTIONS:
            raise ConfigError(f"unknown section [{s}]", r.line(s))
    if not cp.has_section("widthlab"):
        raise ConfigError("missing [widthlab] section with schema and version", 1)
    schema = r.get("widthlab", "schema", default=None)
    if schema != SCHEMA:
        r.fail("widthlab", "schema", f"expected {SCHEMA!r}, got {schema!r}")
    version = r.get("widthlab", "version", int, default=None)
    if version != SCHEMA_VERSION:
        r.fail("widthlab", "version", f"unsupported schema version {version!r} (this build reads {SCHEMA_VERSION})")

    cfg = RunConfig()

    # parameterization
    sec = "parameterization"
    name = r.get(sec, "preset", default=None)
    explicit = {role: r.get(sec, role.value, _triple) for role in ROLES}
    if name is not None and any(explicit.values()):
        r.fail(sec, "preset", "give either a preset or explicit embedding/hidden/readout triples, not both")
    if name is not None:
        if name.lower() not in PRESET_NAMES:
            r.fail(sec, "preset", f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
        p = preset(name.lower())
        preset_name = name.lower()
    elif all(explicit.values()):
        p = Parameterization(explicit[LayerRole.EMBEDDING], explicit[LayerRole.HIDDEN],
                             explicit[LayerRole.READOUT], name=None)
        preset_name = None
    elif any(explicit.values()):
        missing = [role.value for role, t in explicit.items() if t is None]
        r.fail(sec, missing[0], "explicit parameterization needs all three role triples")
    else:
        p, preset_name = cfg.parameterization, cfg.preset_name
    c_mode = r.get(sec, "c", str.lower, default=cfg.c_mode)
    if c_mode not in C_MODES:
        r.fail(sec, "c", f"expected one of {', '.join(C_MODES)}")

    # optimizer
    sec = "optimizer"
    d = cfg.optimizer
    try:
        kind = r.get(sec, "kind", OptimizerFamily.parse, default=d.kind)
        mode = r.get(sec, "epsilon_mode", EpsilonMode, default=d.epsilon_policy.mode)
        base_eps = r.get(sec, "base_epsilon", float, default=d.epsilon_policy.base_epsilon)
        eps_width = r.get(sec, "epsilon_base_width", int, default=d.epsilon_policy.base_width)
        grads = gradient_exponents(p) if mode is EpsilonMode.PER_LAYER else None
        policy = EpsilonPolicy(mode=mode, base_epsilon=base_eps, base_width=eps_width, gradient_exponents=grads)
        opt = OptimizerConfig(
            kind=kind,
            beta1=r.get(sec, "beta1", float, default=d.beta1),
            beta2=r.get(sec, "beta2", float, default=d.beta2),
            epsilon_policy=policy,
            atan2_a=r.get(sec, "atan2_a", float, default=d.atan2_a),
            atan2_b=r.get(sec, "atan2_b", float, default=d.atan2_b),
            update_clip_rms=r.get(sec, "update_clip_rms", _opt_float, default=d.update_clip_rms),
            bias_correction=r.get(sec, "bias_correction", _bool, default=d.bias_correction),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"[{sec}] {e}", r.line(sec)) from None

    # schedule; c is filled in per command (solve / global / explicit)
    sec = "schedule"
    s = cfg.schedule
    try:
        schedule = LearningRateSchedule(
            base_lr=r.get(sec, "base_lr", _lr_value, default=s.base_lr),
            gamma=r.get(sec, "gamma", _list(float), default=s.gamma),
            c=p.c if c_mode == "explicit" else s.c,
            base_width=r.get(sec, "base_width", int, default=s.base_width),
            warmup_steps=r.get(sec, "warmup_steps", int, default=s.warmup_steps),
            total_steps=r.get(sec, "total_steps", int, default=s.total_steps),
            decay=r.get(sec, "decay", Decay, default=s.decay),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"[{sec}] {e}", r.line(sec)) from None

    # alignment
    sec = "alignment"
    al_name = r.get(sec, "preset", str.lower, default=None)
    fields = {k: r.get(sec, k, parse_rat) for k in ALIGNMENT_FIELDS}
    given = {k: v for k, v in fields.items() if v is not None}
    if al_name is not None and given:
        r.fail(sec, "preset", "give either a named alignment or explicit exponents, not both")
    try:
        if al_name is not None:
            alignment = AlignmentAssumption.named(al_name)
            al_name = alignment.name
        elif given:
            missing = [k for k in ALIGNMENT_FIELDS if k not in given]
            if missing:
                r.fail(sec, missing[0], "explicit alignment needs all six exponents")
            alignment = AlignmentAssumption(**given)
        else:
            alignment, al_name = cfg.alignment, cfg.alignment_name
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"[{sec}] {e}", r.line(sec)) from None

    # model
    sec = "model"
    m = cfg.model
    try:
        model = ModelSection(
            d=r.get(sec, "d", int, default=m.d),
            L=r.get(sec, "L".lower(), int, default=m.L),
            nonlinearity=r.get(sec, "nonlinearity", str.lower, default=m.nonlinearity),
            batch_size=r.get(sec, "batch_size", int, default=m.batch_size),
            widths=r.get(sec, "widths", _list(int), default=m.widths),
            seeds=r.get(sec, "seeds", _list(int), default=m.seeds),
            steps=r.get(sec, "steps", int, default=m.steps),
            fit_steps=r.get(sec, "fit_steps", _list(int), default=m.fit_steps),
            lr_grid_min=r.get(sec, "lr_grid_min", _lr_value, default=m.lr_grid_min),
            lr_grid_max=r.get(sec, "lr_grid_max", _lr_value, default=m.lr_grid_max),
            lr_grid_ratio=r.get(sec, "lr_grid_ratio", _lr_value, default=m.lr_grid_ratio),
            tolerance=r.get(sec, "tolerance", float, default=m.tolerance),
            steep_tolerance=r.get(sec, "steep_tolerance", float, default=m.steep_tolerance),
        )
    except ConfigError:
        raise
    _validate_model(model, r)

    out_dir = r.get("output", "dir", default=cfg.output_dir)

    for section in cp.sections():
        for key in cp.options(section):
            if (section, key) not in r.used:
                raise ConfigError(f"unknown key {key!r} in [{section}]", r.line(section, key))

    return RunConfig(parameterization=p, preset_name=preset_name, c_mode=c_mode, optimizer=opt,
                     schedule=schedule, alignment=alignment, alignment_name=al_name, model=model,
                     output_dir=out_dir)


def _validate_model(m: ModelSection, r: _Reader):
    sec = "model"
    if m.nonlinearity not in ("identity", "relu", "gelu"):
        r.fail(sec, "nonlinearity", "expected identity, relu or gelu")
    if m.d < 1 or m.L < 1 or m.batch_size < 1 or m.steps < 0:
        r.fail(sec, "d", "d, L and batch_size must be positive, steps >= 0")
    if any(w < m.d for w in m.widths):
        r.fail(sec, "widths", f"every width must be >= d = {m.d}")
    if list(m.widths) != sorted(set(m.widths)):
        r.fail(sec, "widths", "widths must be strictly increasing")
    if any(t < 0 or t > m.steps for t in m.fit_steps):
        r.fail(sec, "fit_steps", f"fit steps must lie in [0, steps={m.steps}]")
    if not 0 < m.lr_grid_min < m.lr_grid_max or m.lr_grid_ratio <= 1:
        r.fail(sec, "lr_grid_min", "need 0 < lr_grid_min < lr_grid_max and lr_grid_ratio > 1")
    if m.tolerance <= 0 or m.steep_tolerance <= 0:
        r.fail(sec, "tolerance", "tolerances must be positive")


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _fmt_lr(x: float) -> str:
    k = math.log2(x) if x > 0 else None
    if k is not None and abs(k * 4 - round(k * 4)) < 1e-12 and 2.0 ** (round(k * 4) / 4) == x:
        q = round(k * 4) / 4
        return f"2^{q:g}"
    return _fmt_float(x)


def serialize_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config`: ``parse_config(serialize_config(c)) == c``."""
    lines = ["[widthlab]", f"schema = {SCHEMA}", f"version = {SCHEMA_VERSION}", "", "[parameterization]"]
    if cfg.preset_name is not None:
        lines.append(f"preset = {cfg.preset_name}")
        if cfg.c_mode == "explicit" and any(cfg.parameterization.c):
            raise ValueError("explicit c with a preset parameterization cannot be serialized; use triples")
    else:
        for role in ROLES:
            t = cfg.parameterization.triple(role)
            lines.append(f"{role.value} = {format_rat(t.a)}, {format_rat(t.b)}, {format_rat(t.c)}")
    lines.append(f"c = {cfg.c_mode}")

    o = cfg.optimizer
    lines += [
        "", "[optimizer]", f"kind = {o.kind.value}", f"beta1 = {_fmt_float(o.beta1)}", f"beta2 = {_fmt_float(o.beta2)}",
        f"epsilon_mode = {o.epsilon_policy.mode.value}",
        f"base_epsilon = {_fmt_float(o.epsilon_policy.base_epsilon)}",
        f"epsilon_base_width = {o.epsilon_policy.base_width}",
        f"atan2_a = {_fmt_float(o.atan2_a)}", f"atan2_b = {_fmt_float(o.atan2_b)}",
        f"update_clip_rms = {'none' if o.update_clip_rms is None else _fmt_float(o.update_clip_rms)}",
        f"bias_correction = {'true' if o.bias_correction else 'false'}",
    ]
    s = cfg.schedule
    lines += [
        "", "[schedule]", f"base_lr = {_fmt_lr(s.base_lr)}", "gamma = " + ", ".join(_fmt_float(g) for g in s.gamma),
        f"base_width = {s.base_width}", f"warmup_steps = {s.warmup_steps}", f"total_steps = {s.total_steps}",
        f"decay = {s.decay.value}",
    ]
    lines += ["", "[alignment]"]
    if cfg.alignment_name is not None:
        lines.append(f"preset = {cfg.alignment_name}")
    else:
        lines += [f"{k} = {format_rat(getattr(cfg.alignment, k))}" for k in ALIGNMENT_FIELDS]
    m = cfg.model
    lines += [
        "", "[model]", f"d = {m.d}", f"L = {m.L}", f"nonlinearity = {m.nonlinearity}", f"batch_size = {m.batch_size}",
        "widths = " + ", ".join(map(str, m.widths)), "seeds = " + ", ".join(map(str, m.seeds)),
        f"steps = {m.steps}", "fit_steps = " + ", ".join(map(str, m.fit_steps)),
        f"lr_grid_min = {_fmt_lr(m.lr_grid_min)}", f"lr_grid_max = {_fmt_lr(m.lr_grid_max)}",
        f"lr_grid_ratio = {_fmt_lr(m.lr_grid_ratio)}",
        f"tolerance = {_fmt_float(m.tolerance)}", f"steep_tolerance = {_fmt_float(m.steep_tolerance)}",
        "", "[output]", f"dir = {cfg.output_dir}", "",
    ]
    return "\n".join(lines)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        return parse_config(f.read())


# -- helpers -------------------------------------------------------------------

def _require_stable(p: Parameterization):
    rep = check_init_stability(p)
    if not rep.stable_at_init:
        raise ConfigError("parameterization is not stable at initialization: " + describe_violations(rep))


def resolve_c(cfg: RunConfig):
    """(c triple, report) for the configured c mode."""
    p = cfg.parameterization
    _require_stable(p)
    opt = cfg.optimizer.scaling
    if cfg.c_mode == "solve":
        return max_stable_lr(p, opt, cfg.alignment, cfg.model.L)
    c = p.c if cfg.c_mode == "explicit" else (rat(0),) * 3
    return c, training_stability(p.with_c(c), opt, cfg.alignment, cfg.model.L)


def _lr_text(c) -> str:
    return reftable.n_power(-c)


def _train_spec(cfg: RunConfig, c) -> TrainSpec:
    m = cfg.model
    return TrainSpec(
        p=cfg.parameterization.with_c(c),
        optimizer=cfg.optimizer,
        schedule=replace(cfg.schedule, c=tuple(c)),
        steps=m.steps,
        d=m.d,
        L=m.L,
        nonlinearity=m.nonlinearity,
        batch_size=m.batch_size,
    )


def _out_dir(args, cfg: RunConfig) -> str:
    path = args.out or cfg.output_dir
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path: str, doc: dict):
    doc = dict(doc)
    doc["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _apply_overrides(args, cfg: RunConfig) -> RunConfig:
    m = cfg.model
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        m = replace(m, seeds=tuple(range(args.seeds)))
    if getattr(args, "widths", None):
        try:
            widths = tuple(int(x) for x in args.widths.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"--widths: cannot parse {args.widths!r}") from None
        if list(widths) != sorted(set(widths)) or not widths:
            raise ConfigError("--widths must be strictly increasing")
        if any(w < m.d for w in widths):
            raise ConfigError(f"--widths: every width must be >= d = {m.d}")
        m = replace(m, widths=widths)
    return replace(cfg, model=m)


def _align_rows(rows) -> list:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return ["  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip() for r in rows]


# -- commands ------------------------------------------------------------------

def cmd_solve(args) -> int:
    if args.matrix:
        return _solve_matrix(args)
    cfg = load_config(args.config)
    c, rep = resolve_c(cfg)
    g = gradient_exponents(cfg.parameterization)
    print(f"parameterization: {cfg.preset_label}  optimizer: {cfg.optimizer.scaling.value}  "
          f"alignment: {cfg.alignment_label}  c: {cfg.c_mode}")
    for role, ci in zip(ROLES, c):
        print(f"{role.value}: c={format_rat(ci)} (lr ~ {_lr_text(ci)})  grad ~ {reftable.n_power(-g[role])}")
    print(f"regime: {rep.regime.value}")
    print("binding: " + ", ".join(f"{n}={format_rat(v)}" for n, v in rep.binding))
    if args.out or args.config:
        doc = {
            "parameterization": cfg.parameterization.with_c(c).to_dict(),
            "optimizer": cfg.optimizer.scaling.value,
            "alignment": cfg.alignment.to_dict(),
            "c": {role.value: format_rat(ci) for role, ci in zip(ROLES, c)},
            "lr_scaling": {role.value: _lr_text(ci) for role, ci in zip(ROLES, c)},
            "report": rep.to_dict(),
        }
        _write_json(os.path.join(_out_dir(args, cfg), "solve.json"), doc)
    return EXIT_OK


def _solve_matrix(args) -> int:
    rows = [("preset", "optimizer", "alignment", "embedding", "hidden", "readout", "regime")]
    doc = []
    for name in PRESET_NAMES:
        p = preset(name)
        for align in ("full", "no"):
            al = AlignmentAssumption.named(align)
            for opt in OptimizerKind:
                c, rep = max_stable_lr(p, opt, al)
                rows.append((name, opt.value, align, *(_lr_text(x) for x in c), rep.regime.value))
                doc.append({"preset": name, "optimizer": opt.value, "alignment": align,
                            "c": [format_rat(x) for x in c], "regime": rep.regime.value})
    print("\n".join(_align_rows(rows)))
    if args.out:
        _write_json(os.path.join(_out_dir(args, RunConfig()), "solve_matrix.json"), {"rows": doc})
    return EXIT_OK


def cmd_table(args, golden=None) -> int:
    golden = reftable.GOLDEN if golden is None else golden
    tab = reftable.regenerate()
    print(reftable.render(tab))
    if args.check:
        diffs = reftable.compare(tab, golden)
        if diffs:
            print(f"\n{len(diffs)} cell(s) differ from the embedded reference:")
            for name, role, col, want, got in diffs:
                print(f"  {name}/{role} [{col}]: expected {want}, got {got}")
            return EXIT_CHECK
        print("\nall cells match the embedded reference")
    return EXIT_OK


def _parse_thetas(items) -> dict:
    if not items:
        return {LayerRole.HIDDEN: rat(1, 2), LayerRole.READOUT: rat(1, 2)}
    out = {}
    for item in items:
        for part in item.split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise ConfigError(f"--theta expects role=value, got {part!r}")
            role, val = part.split("=", 1)
            try:
                out[LayerRole(role.strip().lower())] = parse_rat(val.strip())
            except ValueError as e:
                raise ConfigError(f"--theta {part!r}: {e}") from None
    return out


def cmd_equiv(args) -> int:
    cfg = load_config(args.config)
    thetas = _parse_thetas(args.theta)
    opt = cfg.optimizer.scaling
    c, _ = resolve_c(cfg)
    p = cfg.parameterization.with_c(c)
    q = p
    for role, theta in thetas.items():
        q = reparameterize(q, role, theta, opt)
    before = training_stability(p, opt, cfg.alignment, cfg.model.L)
    after = training_stability(q, opt, cfg.alignment, cfg.model.L)
    same = before.same_dynamics(after)
    print("theta: " + ", ".join(f"{r.value}={format_rat(t)}" for r, t in thetas.items()))
    for role in ROLES:
        print(f"{role.value}: {p.triple(role)} -> {q.triple(role)}")
    print(f"reports identical: {'yes' if same else 'no'}")
    ok = same
    if args.empirical:
        n = args.width
        sched = replace(cfg.schedule, c=tuple(c), base_width=1)
        if cfg.schedule.base_width != 1:
            print("note: twin check uses base_width = 1 so the LR correction is exact")
        a, b = twin_losses(p, {r.value: t for r, t in thetas.items()}, cfg.optimizer, sched, n,
                           args.steps, seed=cfg.model.seeds[0], d=cfg.model.d, L=cfg.model.L,
                           batch_size=cfg.model.batch_size)
        dev = max_relative_deviation(a, b)
        print(f"empirical max rel. dev: {dev:.3g} over {len(a) - 1} steps at n={n}")
        ok = ok and dev <= args.tolerance
    return EXIT_OK if ok else EXIT_CHECK


def _write_traces(res, cfg: RunConfig, out: str):
    for (n, s), tr in sorted(res.traces.items()):
        tr.write_csv(os.path.join(out, trace_filename(cfg.preset_label, cfg.optimizer.kind.value,
                                                      cfg.alignment_label, n, s)))


def _print_checks(checks, label_fn) -> bool:
    ok = True
    for ch in checks:
        verdict = "PASS" if ch.ok else "FAIL"
        ok = ok and ch.ok
        print(f"{label_fn(ch)}: predicted {ch.predicted:g}, measured {ch.measured:.3f} "
              f"within ±{ch.tolerance:g}: {verdict}")
    return ok


def _tolerances(cfg: RunConfig, spec: TrainSpec) -> dict:
    from .empirics import predicted_exponents

    m = cfg.model
    return {k: (m.steep_tolerance if abs(v) > 1 else m.tolerance) for k, v in predicted_exponents(spec.p, m.L).items()}


def _sweep(args, quantities, fit_steps, name: str) -> int:
    cfg = _apply_overrides(args, load_config(args.config))
    c, _ = resolve_c(cfg)
    spec = _train_spec(cfg, c)
    if name == "coordcheck":
        spec = replace(spec, steps=min(spec.steps, max(fit_steps)))
    try:
        res = width_sweep(spec, cfg.model.widths, cfg.model.seeds, quantities=quantities, fit_steps=fit_steps,
                          tolerance=cfg.model.tolerance, tolerances=_tolerances(cfg, spec))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = _out_dir(args, cfg)
    _write_traces(res, cfg, out)
    doc = res.to_dict()
    doc["config"]["alignment"] = cfg.alignment_label
    _write_json(os.path.join(out, f"{name}.json"), doc)

    roles = spec.shape(cfg.model.widths[0]).roles
    label = {"grad_rms": "grad", "act_rms": "activation"}
    ok = _print_checks(res.checks, lambda ch: f"{ch.role} (layer {ch.layer}) {label.get(ch.quantity, ch.quantity)} exponent")
    for (q, layer, t), f in sorted(res.fits.items()):
        if q == "alignment":
            means = res.means[(q, layer, t)]
            print(f"alignment layer {layer} ({roles[layer - 1].value}) step {t}: "
                  + ", ".join(f"n={n}: {v:.3f}" for n, v in zip(res.widths, means)))
        elif q not in ("grad_rms", "act_rms") or t != 0:
            print(f"{q} layer {layer} step {t}: fitted exponent {f.exponent:.3f}")
    if res.diverged:
        print("diverged runs: " + ", ".join(f"n={n} seed={s} step={t}" for n, s, t in res.diverged))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    return _sweep(args, QUANTITIES, cfg.model.fit_steps, "sweep")


def cmd_coordcheck(args) -> int:
    return _sweep(args, ("grad_rms", "act_rms"), (0,), "coordcheck")


def cmd_lrsweep(args) -> int:
    cfg = _apply_overrides(args, load_config(args.config))
    m = cfg.model
    if len(m.widths) < 3:
        raise ConfigError(f"lrsweep needs at least 3 widths to fit, got {len(m.widths)}")
    c, _ = resolve_c(cfg)
    spec = _train_spec(cfg, c)
    grid = geometric_grid(m.lr_grid_min, m.lr_grid_max, m.lr_grid_ratio)
    try:
        res = lr_sweep(spec, m.widths, grid, m.seeds)
    except AllDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = _out_dir(args, cfg)
    doc = res.to_dict()
    doc["config"] = {"preset": cfg.preset_label, "optimizer": cfg.optimizer.kind.value,
                     "alignment": cfg.alignment_label, "c": [format_rat(x) for x in c], "steps": m.steps,
                     "seeds": list(m.seeds)}
    _write_json(os.path.join(out, "lrsweep.json"), doc)
    for n in res.widths:
        print(f"n={n}: optimal base lr {_fmt_lr(res.optimal[n])}")
    print(f"optimal base lr exponent: {res.fit.exponent:.3f} (residual {res.fit.residual_rms:.3f})")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="widthlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, empirical=False):
        p.add_argument("--config", help="INI run config")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        if empirical:
            p.add_argument("--seeds", type=int, help="use seeds 0..N-1")
            p.add_argument("--widths", help="comma-separated widths")

    p = sub.add_parser("solve", help="max-stable LR exponents and regime")
    common(p)
    p.add_argument("--matrix", action="store_true", help="all presets x optimizers x {full, no} alignment")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("table", help="regenerate the reference parameterization table")
    p.add_argument("--check", action="store_true", help="compare against the embedded reference")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("equiv", help="reparameterization equivalence check")
    common(p)
    p.add_argument("--theta", action="append", help="role=p/q shifts, e.g. hidden=1/2,readout=1/2")
    p.add_argument("--empirical", action="store_true", help="also train both twins and compare losses")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_equiv)

    for name, func, help_ in (
        ("sweep", cmd_sweep, "instrumented width sweep with power-law fits"),
        ("coordcheck", cmd_coordcheck, "init-time exponent check against predictions"),
        ("lrsweep", cmd_lrsweep, "optimal base LR per width and its width exponent"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p, empirical=True)
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
