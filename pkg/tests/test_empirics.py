import csv
import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from widthlab.empirics import (
    AllDivergedError,
    ModelShape,
    TrainSpec,
    alignment_ratio,
    default_record_steps,
    geometric_grid,
    init_model,
    lr_sweep,
    max_relative_deviation,
    run_grid,
    synth_batch,
    trace_filename,
    train_instrumented,
    twin_losses,
    width_sweep,
)
from widthlab.optim import LearningRateSchedule, OptimizerConfig
from widthlab.params import LayerRole, preset, reparameterize
from widthlab.scalealg import rms_norm

H = F(1, 2)


def spec_for(name="standard", steps=0, beta=0.0, c=(0, 0, 0), kind="adam", **kw):
    return TrainSpec(p=preset(name), optimizer=OptimizerConfig(kind=kind),
                     schedule=LearningRateSchedule(base_lr=beta, c=c, base_width=128), steps=steps, **kw)


def test_shape_validation():
    with pytest.raises(ValueError):
        ModelShape(n=16, d=32)
    with pytest.raises(ValueError):
        ModelShape(n=64, L=0)
    with pytest.raises(ValueError):
        ModelShape(n=64, nonlinearity="tanh")
    s = ModelShape(n=64, d=8, L=3)
    assert s.layer_dims == [(64, 8), (64, 64), (64, 64), (8, 64)]
    assert [r.value for r in s.roles] == ["embedding", "hidden", "hidden", "readout"]


def test_init_rms_standard_hidden():
    # sample RMS of n^2 = 1M N(0, 1/n) entries; relative sd ~ 1/sqrt(2 n^2) = 7e-4
    n = 1024
    for seed in range(10):
        m = init_model(preset("standard"), ModelShape(n=n), seed)
        assert abs(rms_norm(m.weights[1]) / n**-0.5 - 1) <= 0.02


def test_init_rms_unit():
    m = init_model(preset("ntk"), ModelShape(n=512), 0)
    assert abs(rms_norm(m.weights[1]) - 1) <= 0.02


def test_init_deterministic():
    a = init_model(preset("mup"), ModelShape(n=64), 3)
    b = init_model(preset("mup"), ModelShape(n=64), 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    c = init_model(preset("mup"), ModelShape(n=64), 4)
    assert not np.array_equal(a.weights[1], c.weights[1])


def test_synth_batch():
    x, y = synth_batch(32, 32, 0)
    assert 0.8 <= rms_norm(x) <= 1.2 and x.shape == (32, 32)
    x2, y2 = synth_batch(32, 32, 0)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    x1, y1 = synth_batch(1, 1, 5)
    assert x1.shape == (1, 1) and y1.shape == (1, 1)


@pytest.mark.parametrize("d,batch", [(16, 16), (32, 32), (64, 4), (256, 1)])
def test_synth_batch_rms_band(d, batch):
    for seed in range(100):
        assert 0.8 <= rms_norm(synth_batch(d, batch, seed)[0]) <= 1.2


def _chi2_outside_band(k, lo=0.8, hi=1.2):
    # P(chi2_k < lo^2 k) + P(chi2_k > hi^2 k), even k, via the Poisson-sum form of the CDF
    def cdf(x):
        h = x / 2
        return 1 - sum(math.exp(-h) * h**j / math.factorial(j) for j in range(k // 2))
    return cdf(lo * lo * k) + 1 - cdf(hi * hi * k)


def test_synth_batch_rms_band_at_64_entries():
    # with only 64 entries the band is a ~2.3% tail event, not a guarantee
    p = _chi2_outside_band(64)
    assert 0.02 < p < 0.03
    miss = np.mean([not 0.8 <= rms_norm(synth_batch(8, 8, s)[0]) <= 1.2 for s in range(2000)])
    assert abs(miss - p) <= 4 * math.sqrt(p * (1 - p) / 2000)


def test_alignment_identity():
    n = 64
    z = np.random.default_rng(0).standard_normal(n)
    assert alignment_ratio(np.eye(n), z) == pytest.approx(0.5, abs=1e-12)


def test_alignment_all_ones():
    assert alignment_ratio(np.ones((10, 10)), np.ones(10)) == pytest.approx(1.0, abs=1e-12)


def test_alignment_random_gaussian():
    rng = np.random.default_rng(0)
    n = 1024
    A = alignment_ratio(rng.standard_normal((n, n)), rng.standard_normal(n))
    assert 0.45 <= A <= 0.55


def test_alignment_errors():
    with pytest.raises(ValueError):
        alignment_ratio(np.ones((3, 4)), np.ones(3))
    with pytest.raises(ValueError):
        alignment_ratio(np.ones((3, 4)), np.zeros(4))


@given(st.integers(2, 40), st.integers(1, 40), st.integers(1, 5), st.integers(0, 2**31 - 1), st.booleans())
def test_alignment_at_most_one(fan_in, fan_out, batch, seed, rank_one):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((batch, fan_in))
    if rank_one:
        W = np.outer(rng.standard_normal(fan_out), z[0])
    else:
        W = rng.standard_normal((fan_out, fan_in))
    assert alignment_ratio(W, z) <= 1 + 1e-9


def test_default_record_steps():
    assert default_record_steps(50) == [0, 1, 2, 5, 10, 20, 50]
    assert default_record_steps(0) == [0]
    assert default_record_steps(7) == [0, 1, 2, 5, 7]


def _train(name="standard", n=64, beta=1e-2, steps=5, kind="adam", c=(0, 1, 1), d=8, record=None, seed=0):
    m = init_model(preset(name), ModelShape(n=n, d=d), seed)
    sched = LearningRateSchedule(base_lr=beta, c=c, base_width=64)
    return train_instrumented(m, OptimizerConfig(kind=kind), sched, steps, synth_batch(d, 16, seed),
                              record_steps=record, seed=seed)


def test_zero_lr_leaves_everything_constant():
    for kind in ("sgd", "adam", "adam_ps", "adam_atan2"):
        tr = _train(beta=0.0, steps=6, kind=kind, record=range(7))
        for t in range(1, 7):
            for layer in range(1, 5):
                for q in ("param_delta_rms", "act_delta_rms", "update_rms"):
                    assert tr.value(t, layer, q) == 0.0
                for q in ("alignment", "param_rms", "act_rms", "grad_rms"):
                    assert tr.value(t, layer, q) == tr.value(0, layer, q)
        assert len(set(tr.losses)) == 1


def test_trace_records_every_requested_step():
    tr = _train(steps=5, record=[0, 2, 5])
    assert tr.steps == [0, 2, 5]
    assert len(tr.losses) == 6
    assert all(v >= 0 for s, l, r, q, v in tr.records if q != "alignment")
    assert tr.value(0, 2, "update_rms") == 0.0 and tr.value(2, 2, "update_rms") > 0


def test_record_steps_validated():
    with pytest.raises(ValueError):
        _train(steps=3, record=[4])


def test_divergence_marks_trace():
    tr = _train(kind="sgd", beta=1e6, c=(0, 0, 0), steps=40)
    assert tr.diverged and tr.diverged_step is not None
    assert math.isinf(tr.final_loss)


@pytest.mark.parametrize("name", ["standard", "ntk", "mup", "mfp"])
def test_step0_hidden_alignment(name):
    for n in (512, 1024):
        tr = _train(name=name, n=n, d=32, steps=0, record=[0])
        for layer in (2, 3):
            assert 0.45 <= tr.value(0, layer, "alignment") <= 0.55


@pytest.fixture(scope="module")
def adam_fullalign_traces():
    # standard + Adam at the full-alignment solution c = (0, 1, 1); beta = 2^-7 is near
    # the optimum of a coarse sweep, d = 8 keeps finite-width corrections small
    spec = spec_for(steps=50, beta=2.0**-7, c=(0, 1, 1), d=8, record_steps=(50,))
    return run_grid(spec, [256, 1024], range(3))


def _slope(traces, layer, ratio):
    v = [np.mean([ratio(traces[(n, s)], layer) for s in range(3)]) for n in (256, 1024)]
    return math.log(v[1] / v[0]) / math.log(4), v


def test_hidden_activation_change_flat_in_width(adam_fullalign_traces):
    for layer in (2, 3):
        slope, v = _slope(adam_fullalign_traces, layer,
                          lambda tr, l: tr.value(50, l, "act_delta_rms"))
        assert abs(slope) <= 0.1
        assert all(0 < x < 10 for x in v)


@pytest.mark.xfail(strict=True, reason="hidden dW ~ n^-1 against W ~ n^-1/2 gives slope -1/2; see ledger")
def test_hidden_relative_weight_change_flat_in_width(adam_fullalign_traces):
    for layer in (2, 3):
        slope, v = _slope(adam_fullalign_traces, layer,
                          lambda tr, l: tr.value(50, l, "param_delta_rms") / tr.value(50, l, "param_rms"))
        assert all(x < 10 for x in v)
        assert abs(slope) <= 0.1


def test_width_sweep_standard_readout_gradient():
    res = width_sweep(spec_for(d=8), [128, 256, 512, 1024, 2048], range(5))
    assert abs(res.fit("grad_rms", 4).exponent) <= 0.1
    for layer in (1, 2, 3):
        assert abs(res.fit("act_rms", layer).exponent) <= 0.1
    assert all(c.ok for c in res.checks)


def test_width_sweep_mfp_hidden_gradient():
    res = width_sweep(spec_for("mfp", d=8), [128, 256, 512, 1024, 2048], range(5))
    assert abs(res.fit("grad_rms", 2).exponent + 1.5) <= 0.15


def test_width_sweep_preconditions():
    with pytest.raises(ValueError):
        width_sweep(spec_for(), [128, 256], [0])
    with pytest.raises(ValueError):
        width_sweep(spec_for(), [256, 128, 512], [0])
    with pytest.raises(ValueError):
        width_sweep(spec_for(), [64, 128, 256], [0], quantities=("bogus",))


def test_width_sweep_excludes_diverged_runs():
    spec = spec_for(kind="sgd", beta=2e3, steps=30, c=(0, 0, 0), d=8)
    res = width_sweep(spec, [32, 64, 128], [0, 1], fit_steps=(0, 30))
    assert res.diverged
    # step 0 happens before any update, so every run contributes there
    assert all(math.isfinite(v) for v in res.means[("grad_rms", 1, 0)])


def test_sweep_serial_equals_parallel():
    spec = spec_for(steps=3, beta=1e-2, c=(0, 1, 1), d=8)
    a = width_sweep(spec, [32, 64, 128], [0, 1, 2], quantities=("grad_rms", "alignment"), fit_steps=(0, 3),
                    threads=1)
    b = width_sweep(spec, [32, 64, 128], [0, 1, 2], quantities=("grad_rms", "alignment"), fit_steps=(0, 3),
                    threads=3)
    assert a.to_dict() == b.to_dict()


def test_forward_equivalence_under_reparameterization():
    shape = ModelShape(n=256)
    x, _ = synth_batch(32, 8, 0)
    for base, roles in (("standard", (LayerRole.HIDDEN, LayerRole.READOUT)),
                        ("mup", (LayerRole.EMBEDDING, LayerRole.HIDDEN, LayerRole.READOUT))):
        p = preset(base)
        q = p
        for r in roles:
            q = reparameterize(q, r, H, "adam")
        a = init_model(p, shape, 1).logits(x)
        b = init_model(q, shape, 1).logits(x)
        assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(a))


def test_training_equivalence_standard_ntk_sgd():
    sched = LearningRateSchedule(base_lr=3e-3, c=(-H, H, 1), base_width=1)
    a, b = twin_losses(preset("standard"), {"hidden": H, "readout": H}, OptimizerConfig(kind="sgd"), sched, 256, 20)
    assert len(a) == len(b) == 21 and a[-1] < a[0]
    assert max_relative_deviation(a, b) <= 1e-6


def test_lr_sweep_needs_three_widths_and_grid():
    grid = geometric_grid(2.0**-10, 2.0**-6)
    with pytest.raises(ValueError):
        lr_sweep(spec_for(steps=2), [64], grid, [0])
    with pytest.raises(ValueError):
        lr_sweep(spec_for(steps=2), [32, 64, 128], [1e-3, 2e-3, 5e-3], [0])
    with pytest.raises(ValueError):
        lr_sweep(spec_for(steps=2), [32, 64, 128], [1, 2, 3, 4, 5], [0])


def test_lr_sweep_all_diverged_names_width():
    grid = geometric_grid(1e8, 1e12, 10.0)
    with pytest.raises(AllDivergedError) as e:
        lr_sweep(spec_for(kind="sgd", steps=20, d=8), [16, 32, 64], grid, [0])
    assert e.value.width == 16


def test_lr_sweep_picks_argmin_and_fits():
    grid = geometric_grid(2.0**-9, 2.0**-5)
    res = lr_sweep(spec_for(steps=10, c=(0, 1, 1), d=8), [32, 64, 128], grid, [0])
    for n in res.widths:
        row = res.final_losses[n]
        assert res.optimal[n] == grid[int(np.argmin(row))]
    assert res.fit.n_points == 3


def test_geometric_grid():
    g = geometric_grid(2.0**-4, 2.0**-2)
    assert len(g) == 5 and g[0] == 2.0**-4 and g[-1] == pytest.approx(2.0**-2)


def test_trace_csv(tmp_path):
    tr = _train(steps=2, record=[0, 2])
    path = tmp_path / trace_filename("standard", "adam", "full", 64, 0)
    tr.write_csv(path)
    assert path.name == "standard_adam_full_n64_s0.csv"
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "layer", "role", "quantity", "value"]
    quantities = {r[3] for r in rows[1:]}
    assert {"act_rms", "grad_rms", "alignment", "loss", "param_delta_rms", "act_delta_rms"} <= quantities
    assert sum(1 for r in rows[1:] if r[3] == "loss") == 3


def test_nonlinearities_run():
    for nl in ("relu", "gelu"):
        m = init_model(preset("mup"), ModelShape(n=64, d=8, nonlinearity=nl), 0)
        tr = train_instrumented(m, OptimizerConfig(), LearningRateSchedule(base_lr=1e-2), 3, synth_batch(8, 8, 0))
        assert not tr.diverged and tr.losses[-1] < tr.losses[0]


def test_gelu_gradient_matches_finite_difference():
    m = init_model(preset("standard"), ModelShape(n=16, d=4, L=2, nonlinearity="gelu"), 0)
    x, y = synth_batch(4, 3, 0)
    _, grads, _ = m.loss_and_grads(x, y)
    W = m.weights[1]
    eps = 1e-6
    for (i, j) in [(0, 0), (3, 7), (15, 2)]:
        W[i, j] += eps
        lp = m.loss_and_grads(x, y)[0]
        W[i, j] -= 2 * eps
        lm = m.loss_and_grads(x, y)[0]
        W[i, j] += eps
        assert grads[1][i, j] == pytest.approx((lp - lm) / (2 * eps), rel=1e-5, abs=1e-9)
