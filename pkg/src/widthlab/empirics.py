"""Instrumented numpy MLPs for checking width-scaling exponents empirically.

The model is a plain dense stack: an embedding layer d -> n, L-1 hidden layers
n -> n and a readout n -> d. Each layer multiplies its output by n**-a and is
initialised with std n**-b, where (a, b) come from the layer's role in a
:class:`~widthlab.params.Parameterization`. Training is full-batch on a fixed
synthetic Gaussian regression batch so that every quantity is a deterministic
function of (config, seed).

Alignment ratio bound (Cauchy-Schwarz). For W with fan-in k and fan-out m and a
single input z, each output entry obeys |(Wz)_i| <= |W_i|_2 |z|_2, so
|Wz|_2 <= |W|_F |z|_2. In RMS terms |Wz|_RMS <= sqrt(k) |W|_RMS |z|_RMS, hence
A = log_k(|Wz|_RMS / (|W|_RMS |z|_RMS)) <= 1/2 + log_k(sqrt(k)) = 1 for any
shape. For a batch, apply the bound per column and sum the squares. Equality
needs every row of W parallel to z.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .constraints import gradient_exponents
from .optim import (
    LearningRateSchedule,
    NonFiniteGradientError,
    OptimizerConfig,
    init_state,
    step as optim_step,
)
from .params import LayerRole, Parameterization, reparameterize
from .scalealg import PowerLawFit, fit_power_law, format_rat, rat, rms_norm

NONLINEARITIES = ("identity", "relu", "gelu")
QUANTITIES = (
    "act_rms",
    "param_rms",
    "grad_rms",
    "update_rms",
    "param_delta_rms",
    "act_delta_rms",
    "alignment",
)
DEFAULT_WIDTHS = (128, 256, 512, 1024, 2048)

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelShape:
    n: int
    d: int = 32
    L: int = 3
    nonlinearity: str = "identity"

    def __post_init__(self):
        if self.d < 1 or self.n < self.d:
            raise ValueError(f"need n >= d >= 1, got n={self.n}, d={self.d}")
        if self.L < 1:
            raise ValueError(f"need L >= 1, got {self.L}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}")

    @property
    def layer_dims(self) -> list:
        """(fan_out, fan_in) for layers 1..L+1."""
        return [(self.n, self.d)] + [(self.n, self.n)] * (self.L - 1) + [(self.d, self.n)]

    @property
    def roles(self) -> list:
        return [LayerRole.of_layer(i, self.L) for i in range(1, self.L + 2)]


def _act(x, kind):
    if kind == "identity":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3)))


def _act_grad(x, kind):
    if kind == "identity":
        return np.ones_like(x)
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)


@dataclass
class Model:
    shape: ModelShape
    p: Parameterization
    weights: list
    multipliers: list
    init_stds: list = field(default_factory=list)

    @property
    def roles(self) -> list:
        return self.shape.roles

    @property
    def names(self) -> list:
        return [f"W{i + 1}" for i in range(len(self.weights))]

    def forward(self, x):
        """Returns (activations, pre-activations). activations[0] is the input,
        activations[l] the output of layer l; the last entry is the logits."""
        acts, pres = [x], []
        last = len(self.weights) - 1
        for i, (W, mult) in enumerate(zip(self.weights, self.multipliers)):
            h = mult * (acts[-1] @ W.T)
            pres.append(h)
            acts.append(h if i == last else _act(h, self.shape.nonlinearity))
        return acts, pres

    def loss_and_grads(self, x, y):
        """Squared error 0.5*|logits - y|^2 summed over outputs, averaged over the batch."""
        acts, pres = self.forward(x)
        err = acts[-1] - y
        loss = 0.5 * float(np.sum(err * err)) / x.shape[0]
        grads = [None] * len(self.weights)
        delta = err / x.shape[0]
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                delta = delta * _act_grad(pres[i], self.shape.nonlinearity)
            grads[i] = self.multipliers[i] * (delta.T @ acts[i])
            if i:
                delta = self.multipliers[i] * (delta @ self.weights[i])
        return loss, grads, acts

    def logits(self, x):
        return self.forward(x)[0][-1]


def init_model(p: Parameterization, shape: ModelShape, seed: int) -> Model:
    """W_l = n**-b * N(0, 1) draws; the standard-normal draws depend only on (shape, seed),
    so reparameterized twins share them exactly."""
    rng = np.random.default_rng(seed)
    n = shape.n
    weights, mults, stds = [], [], []
    for (fan_out, fan_in), role in zip(shape.layer_dims, shape.roles):
        t = p.triple(role)
        std = float(n) ** (-float(t.b))
        W = rng.standard_normal((fan_out, fan_in))
        W *= std
        weights.append(W)
        stds.append(std)
        mults.append(float(n) ** (-float(t.a)))
    return Model(shape=shape, p=p, weights=weights, multipliers=mults, init_stds=stds)


def synth_batch(d: int, batch_size: int, seed: int):
    """Gaussian inputs and regression targets, both N(0, 1)."""
    rng = np.random.default_rng([seed, 0x5EED])
    x = rng.standard_normal((batch_size, d))
    y = rng.standard_normal((batch_size, d))
    return x, y


def alignment_ratio(W, z) -> float:
    """log_{fan-in}(|Wz|_RMS / (|W|_RMS |z|_RMS)); z is a vector or a (batch, fan-in) array."""
    W = np.asarray(W, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    fan_in = W.shape[1]
    if z.shape[-1] != fan_in:
        raise ValueError(f"fan-in {fan_in} does not match input length {z.shape[-1]}")
    if fan_in < 2:
        raise ValueError("alignment ratio needs fan-in >= 2 (log base)")
    wn, zn = rms_norm(W), rms_norm(z)
    if wn == 0 or zn == 0:
        raise ValueError("alignment ratio undefined for zero-norm W or z")
    out = z @ W.T
    on = rms_norm(out)
    if on == 0:
        return -math.inf
    return math.log(on / (wn * zn)) / math.log(fan_in)


def default_record_steps(T: int) -> list:
    steps, k = {0, T}, 1
    while k <= T:
        for m in (1, 2, 5):
            if m * k <= T:
                steps.add(m * k)
        k *= 10
    return sorted(steps)


@dataclass
class ScaleTrace:
    width: int
    seed: int
    records: list = field(default_factory=list)  # (step, layer, role, quantity, value)
    losses: list = field(default_factory=list)  # loss at every evaluated step 0..T
    diverged: bool = False
    diverged_step: Optional[int] = None

    def value(self, step: int, layer: int, quantity: str) -> float:
        for s, l, _, q, v in self.records:
            if s == step and l == layer and q == quantity:
                return v
        raise KeyError((step, layer, quantity))

    def series(self, layer: int, quantity: str) -> list:
        return [(s, v) for s, l, _, q, v in self.records if l == layer and q == quantity]

    @property
    def steps(self) -> list:
        return sorted({r[0] for r in self.records})

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses and not self.diverged else math.inf

    def rows(self):
        yield from self.records
        for t, loss in enumerate(self.losses):
            yield (t, 0, "model", "loss", loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "layer", "role", "quantity", "value"])
            for s, l, role, q, v in self.rows():
                w.writerow([s, l, role, q, repr(float(v))])
            if self.diverged:
                w.writerow([self.diverged_step, 0, "model", "diverged", 1])


def trace_filename(preset: str, optimizer: str, alignment: str, width: int, seed: int) -> str:
    return f"{preset}_{optimizer}_{alignment}_n{width}_s{seed}.csv"


@dataclass(frozen=True)
class TrainSpec:
    """Everything a single instrumented run needs besides (width, seed)."""

    p: Parameterization
    optimizer: OptimizerConfig
    schedule: LearningRateSchedule
    steps: int
    d: int = 32
    L: int = 3
    nonlinearity: str = "identity"
    batch_size: int = 32
    record_steps: Optional[tuple] = None
    data_seed: Optional[int] = None  # None: reuse the run seed

    def shape(self, n: int) -> ModelShape:
        return ModelShape(n=n, d=self.d, L=self.L, nonlinearity=self.nonlinearity)


def train_instrumented(model: Model, cfg: OptimizerConfig, schedule: LearningRateSchedule, steps: int,
                       batch, record_steps: Optional[Sequence[int]] = None, seed: int = 0) -> ScaleTrace:
    """Full-batch training on ``batch = (x, y)`` for ``steps`` updates.

    Step t evaluates the model after t updates; records at t include the update
    that produced W^t (zero at t = 0). Non-finite loss or gradients stop the run
    and mark the trace as diverged.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    record = set(default_record_steps(steps) if record_steps is None else record_steps)
    if any(s < 0 or s > steps for s in record):
        raise ValueError(f"record_steps must lie in [0, {steps}]")
    x, y = batch
    n = model.shape.n
    roles, names = model.roles, model.names
    trace = ScaleTrace(width=n, seed=seed)
    state = init_state(model.weights, cfg, init_scale=model.init_stds)
    w0 = [W.copy() for W in model.weights]
    acts0 = None
    last = [np.zeros_like(W) for W in model.weights]

    with np.errstate(all="ignore"):
        for t in range(steps + 1):
            loss, grads, acts = model.loss_and_grads(x, y)
            if acts0 is None:
                acts0 = acts
            if not math.isfinite(loss):
                trace.diverged, trace.diverged_step = True, t
                break
            trace.losses.append(loss)
            if t in record:
                for i, W in enumerate(model.weights):
                    role = roles[i].value
                    layer = i + 1
                    vals = (
                        ("act_rms", rms_norm(acts[layer])),
                        ("param_rms", rms_norm(W)),
                        ("grad_rms", rms_norm(grads[i])),
                        ("update_rms", rms_norm(last[i])),
                        ("param_delta_rms", rms_norm(W - w0[i])),
                        ("act_delta_rms", rms_norm(acts[layer] - acts0[layer])),
                        ("alignment", alignment_ratio(W, acts[i])),
                    )
                    trace.records.extend((t, layer, role, q, v) for q, v in vals)
            if t == steps:
                break
            try:
                _, state, last = optim_step(model.weights, grads, state, cfg, schedule, n, roles,
                                            t=t + 1, names=names)
            except NonFiniteGradientError:
                trace.diverged, trace.diverged_step = True, t
                break
    return trace


def run_one(spec: TrainSpec, n: int, seed: int) -> ScaleTrace:
    model = init_model(spec.p, spec.shape(n), seed)
    batch = synth_batch(spec.d, spec.batch_size, seed if spec.data_seed is None else spec.data_seed)
    return train_instrumented(model, spec.optimizer, spec.schedule, spec.steps, batch,
                              record_steps=spec.record_steps, seed=seed)


def _threads(requested: Optional[int]) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("WIDTHLAB_THREADS", "")
    return max(1, int(env)) if env.strip() else 1


def run_grid(spec: TrainSpec, widths: Sequence[int], seeds: Sequence[int], threads: Optional[int] = None) -> dict:
    """{(width, seed): ScaleTrace}. Order of execution does not affect results."""
    jobs = [(n, s) for n in widths for s in seeds]
    k = _threads(threads)
    if k == 1:
        out = [run_one(spec, n, s) for n, s in jobs]
    else:
        with ThreadPoolExecutor(max_workers=k) as ex:
            out = list(ex.map(lambda job: run_one(spec, *job), jobs))
    return dict(zip(jobs, out))


# Init-time predictions from the constraint engine: quantity -> width exponent per role.
def predicted_exponents(p: Parameterization, L: int) -> dict:
    """{(quantity, layer): exponent} for t = 0 RMS quantities."""
    g = gradient_exponents(p)
    out = {}
    roles = ModelShape(n=1, d=1, L=L).roles
    for i, role in enumerate(roles):
        layer = i + 1
        out[("grad_rms", layer)] = float(-g[role])
        if role is LayerRole.READOUT:
            t = p.readout
            out[("act_rms", layer)] = float(rat(1, 2) - t.a - t.b)
        else:
            out[("act_rms", layer)] = 0.0
    return out


@dataclass
class ExponentCheck:
    quantity: str
    layer: int
    role: str
    step: int
    predicted: float
    measured: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return abs(self.measured - self.predicted) <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "quantity": self.quantity, "layer": self.layer, "role": self.role, "step": self.step,
            "predicted": self.predicted, "measured": self.measured, "tolerance": self.tolerance,
            "pass": self.ok,
        }


@dataclass
class SweepResult:
    widths: list
    seeds: list
    means: dict  # (quantity, layer, step) -> [mean over seeds per width]
    fits: dict  # (quantity, layer, step) -> PowerLawFit
    checks: list
    diverged: list  # (width, seed, step)
    config: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict, repr=False)

    def fit(self, quantity: str, layer: int, step: int = 0) -> PowerLawFit:
        return self.fits[(quantity, layer, step)]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "widths": list(self.widths),
            "seeds": list(self.seeds),
            "diverged": [list(x) for x in self.diverged],
            "runs": [
                {"width": n, "seed": s, "diverged": tr.diverged, "final_loss": tr.losses[-1] if tr.losses else None}
                for (n, s), tr in sorted(self.traces.items())
            ],
            "means": [
                {"quantity": q, "layer": l, "step": t, "values": v} for (q, l, t), v in sorted(self.means.items())
            ],
            "fits": [
                {"quantity": q, "layer": l, "step": t, **f.to_dict()} for (q, l, t), f in sorted(self.fits.items())
            ],
            "checks": [c.to_dict() for c in self.checks],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _check_widths(widths, minimum=3):
    widths = list(widths)
    if len(widths) < minimum:
        raise ValueError(f"need at least {minimum} widths for a fit, got {len(widths)}")
    if any(b <= a for a, b in zip(widths, widths[1:])):
        raise ValueError("widths must be strictly increasing")
    return widths


def width_sweep(spec: TrainSpec, widths: Sequence[int], seeds: Sequence[int],
                quantities: Sequence[str] = ("grad_rms", "act_rms"), fit_steps: Sequence[int] = (0,),
                tolerance: float = 0.1, tolerances: Optional[dict] = None,
                threads: Optional[int] = None) -> SweepResult:
    """Run every (width, seed), average selected quantities over seeds and fit
    power laws in width. Diverged runs are dropped from the averages."""
    widths = _check_widths(widths)
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    for q in quantities:
        if q not in QUANTITIES:
            raise ValueError(f"unknown quantity {q!r}")
    record = tuple(sorted(set(fit_steps) | set(spec.record_steps or ())))
    spec = replace(spec, record_steps=record)
    traces = run_grid(spec, widths, seeds, threads)

    diverged = [(n, s, tr.diverged_step) for (n, s), tr in traces.items() if tr.diverged]
    roles = spec.shape(widths[0]).roles
    means, fits = {}, {}
    for q in quantities:
        for layer in range(1, len(roles) + 1):
            for t in fit_steps:
                per_width = []
                for n in widths:
                    vals = [traces[(n, s)].value(t, layer, q) for s in seeds
                            if not (traces[(n, s)].diverged and traces[(n, s)].diverged_step <= t)]
                    per_width.append(float(np.mean(vals)) if vals else math.nan)
                means[(q, layer, t)] = per_width
                pts = [(n, v) for n, v in zip(widths, per_width) if math.isfinite(v) and v > 0]
                if len(pts) >= 2:
                    fits[(q, layer, t)] = fit_power_law(pts)

    checks = []
    tolerances = tolerances or {}
    if 0 in fit_steps:
        for (q, layer), pred in predicted_exponents(spec.p, spec.L).items():
            f = fits.get((q, layer, 0))
            if q in quantities and f is not None:
                tol = tolerances.get((q, layer), tolerance)
                checks.append(ExponentCheck(q, layer, roles[layer - 1].value, 0, pred, f.exponent, tol))

    config = {
        "parameterization": spec.p.to_dict(),
        "optimizer": spec.optimizer.kind.value,
        "steps": spec.steps,
        "d": spec.d,
        "L": spec.L,
        "nonlinearity": spec.nonlinearity,
        "batch_size": spec.batch_size,
        "c": [format_rat(c) for c in spec.schedule.c],
        "base_lr": spec.schedule.base_lr,
    }
    return SweepResult(widths=widths, seeds=seeds, means=means, fits=fits, checks=checks,
                       diverged=diverged, config=config, traces=traces)


class AllDivergedError(RuntimeError):
    def __init__(self, width: int):
        self.width = width
        super().__init__(f"every base learning rate diverged at width {width}")


@dataclass
class LRSweepResult:
    widths: list
    base_lrs: list
    final_losses: dict  # width -> [mean final loss per base lr, inf if diverged]
    optimal: dict  # width -> base lr
    fit: PowerLawFit

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "base_lrs": self.base_lrs,
            "final_losses": {str(n): [None if not math.isfinite(v) else v for v in vs]
                             for n, vs in self.final_losses.items()},
            "optimal": {str(n): b for n, b in self.optimal.items()},
            "fit": self.fit.to_dict(),
        }


def geometric_grid(lo: float, hi: float, ratio: float = 2**0.5) -> list:
    k = int(round(math.log(hi / lo) / math.log(ratio)))
    return [lo * ratio**i for i in range(k + 1)]


def _is_geometric(grid) -> bool:
    r = [b / a for a, b in zip(grid, grid[1:])]
    return all(x > 1 for x in r) and max(r) - min(r) <= 1e-9 * max(r)


def lr_sweep(spec: TrainSpec, widths: Sequence[int], base_lrs: Sequence[float], seeds: Sequence[int],
             threads: Optional[int] = None) -> LRSweepResult:
    """Per width, the base LR with the lowest mean final training loss; a base LR
    counts as diverged if any seed diverges. Ties go to the smaller base LR."""
    widths = _check_widths(widths)
    base_lrs = sorted(float(b) for b in base_lrs)
    if len(base_lrs) < 5 or not _is_geometric(base_lrs):
        raise ValueError("base LR grid needs >= 5 geometrically spaced points")
    seeds = list(seeds)
    spec = replace(spec, record_steps=(spec.steps,))

    jobs = [(n, b, s) for n in widths for b in base_lrs for s in seeds]

    def run(job):
        n, b, s = job
        return run_one(replace(spec, schedule=spec.schedule.with_base_lr(b)), n, s)

    k = _threads(threads)
    if k == 1:
        traces = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=k) as ex:
            traces = list(ex.map(run, jobs))
    by_job = dict(zip(jobs, traces))

    finals, optimal = {}, {}
    for n in widths:
        row = []
        for b in base_lrs:
            runs = [by_job[(n, b, s)] for s in seeds]
            losses = [tr.final_loss for tr in runs]
            row.append(float(np.mean(losses)) if all(math.isfinite(v) for v in losses) else math.inf)
        finals[n] = row
        best = None
        for b, v in zip(base_lrs, row):
            if math.isfinite(v) and (best is None or v < best[1]):
                best = (b, v)
        if best is None:
            raise AllDivergedError(n)
        optimal[n] = best[0]
    fit = fit_power_law([(n, optimal[n]) for n in widths])
    return LRSweepResult(widths=widths, base_lrs=base_lrs, final_losses=finals, optimal=optimal, fit=fit)


def twin_losses(p: Parameterization, thetas: dict, cfg: OptimizerConfig, schedule: LearningRateSchedule,
                n: int, steps: int, seed: int = 0, d: int = 32, L: int = 3, batch_size: int = 32):
    """Train p and its reparameterization (theta per role) from shared draws.

    The twin's schedule uses the shifted c; ``schedule.base_width`` should be 1
    so that (n/b)**shift equals n**shift exactly. Returns (losses, twin_losses).
    """
    q = p.with_c(schedule.c)
    for role, theta in thetas.items():
        q = reparameterize(q, LayerRole(role), theta, cfg.scaling)
    twin_schedule = replace(schedule, c=q.c)
    shape = ModelShape(n=n, d=d, L=L)
    batch = synth_batch(d, batch_size, seed)
    a = train_instrumented(init_model(p, shape, seed), cfg, schedule, steps, batch, record_steps=(), seed=seed)
    b = train_instrumented(init_model(q, shape, seed), cfg, twin_schedule, steps, batch, record_steps=(), seed=seed)
    return a.losses, b.losses


def max_relative_deviation(xs, ys) -> float:
    xs, ys = np.asarray(xs), np.asarray(ys)
    if xs.shape != ys.shape:
        return math.inf
    denom = np.maximum(np.abs(xs), np.finfo(float).tiny)
    return float(np.max(np.abs(xs - ys) / denom)) if xs.size else 0.0
