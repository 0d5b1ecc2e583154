from fractions import Fraction as F

import pytest
from hypothesis import given
from hypothesis import strategies as st

from widthlab.params import (
    PRESET_NAMES,
    ROLES,
    LayerRole,
    LayerTriple,
    OptimizerKind,
    Parameterization,
    check_init_stability,
    preset,
    reparameterize,
)

H = F(1, 2)
halves = st.integers(-4, 4).map(lambda k: F(k, 2))
quarters = st.integers(-8, 8).map(lambda k: F(k, 4))


def _ab(p, role):
    t = p.triple(role)
    return (t.a, t.b)


def test_preset_values():
    assert _ab(preset("standard"), LayerRole.HIDDEN) == (0, H)
    assert _ab(preset("mfp"), LayerRole.READOUT) == (1, 0)
    assert _ab(preset("mup"), LayerRole.EMBEDDING) == (-H, H)
    assert _ab(preset("ntk"), LayerRole.READOUT) == (H, 0)
    assert preset("mup").c == (0, 0, 0)


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset("sp2")


def test_layer_roles():
    assert [LayerRole.of_layer(i, 3) for i in (1, 2, 3, 4)] == [
        LayerRole.EMBEDDING, LayerRole.HIDDEN, LayerRole.HIDDEN, LayerRole.READOUT]
    with pytest.raises(ValueError):
        LayerRole.of_layer(5, 3)


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_stable_at_init(name):
    rep = check_init_stability(preset(name))
    assert rep.stable_at_init and rep.violations == ()


def test_embedding_violation_reported():
    p = preset("standard").with_triple(LayerRole.EMBEDDING, LayerTriple(0, H))
    rep = check_init_stability(p)
    assert not rep.stable_at_init
    assert rep.violations == ((LayerRole.EMBEDDING, "a+b=0", H),)


def test_readout_inequality_ok():
    p = preset("standard").with_triple(LayerRole.READOUT, LayerTriple(0, 1))
    assert check_init_stability(p).stable_at_init


def test_reparam_standard_hidden_sgd():
    p = preset("standard").with_c((0, H, 0))
    q = reparameterize(p, LayerRole.HIDDEN, H, OptimizerKind.SGD)
    assert q.hidden == LayerTriple(H, 0, -H)


def test_reparam_identity():
    p = preset("mup").with_c((1, 2, 3))
    for opt in OptimizerKind:
        assert reparameterize(p, LayerRole.READOUT, 0, opt) == p


def test_reparam_mup_readout_adafactor():
    p = preset("mup").with_c((0, 0, F(1, 3)))
    q = reparameterize(p, LayerRole.READOUT, H, OptimizerKind.ADAFACTOR)
    assert q.readout == LayerTriple(1, 0, F(1, 3))
    assert _ab(q, LayerRole.READOUT) == _ab(preset("mfp"), LayerRole.READOUT)


def test_standard_maps_to_ntk():
    q = preset("standard")
    for role in (LayerRole.HIDDEN, LayerRole.READOUT):
        q = reparameterize(q, role, H, OptimizerKind.ADAM)
    assert all(_ab(q, r) == _ab(preset("ntk"), r) for r in ROLES)


def test_mup_maps_to_mfp():
    # hidden needs the same shift: muP hidden is (0, 1/2), MFP hidden (1/2, 0)
    q = preset("mup")
    assert _ab(q, LayerRole.HIDDEN) != _ab(preset("mfp"), LayerRole.HIDDEN)
    for role in ROLES:
        q = reparameterize(q, role, H, OptimizerKind.SGD)
    assert all(_ab(q, r) == _ab(preset("mfp"), r) for r in ROLES)


triples = st.builds(LayerTriple, halves, halves, halves)
params = st.builds(Parameterization, triples, triples, triples)


@given(params, st.sampled_from(ROLES), quarters, quarters, st.sampled_from(list(OptimizerKind)))
def test_reparam_group_action(p, role, t1, t2, opt):
    two = reparameterize(reparameterize(p, role, t1, opt), role, t2, opt)
    assert two == reparameterize(p, role, t1 + t2, opt)
    assert reparameterize(reparameterize(p, role, t1, opt), role, -t1, opt) == p


@given(params, st.sampled_from(ROLES), quarters, st.sampled_from(list(OptimizerKind)))
def test_init_stability_invariant_under_reparam(p, role, theta, opt):
    assert check_init_stability(p) == check_init_stability(reparameterize(p, role, theta, opt))


def test_dict_roundtrip():
    p = preset("mup").with_c((F(-1, 2), 1, F(3, 4)))
    assert Parameterization.from_dict(p.to_dict()) == p


def test_optimizer_aliases():
    assert OptimizerKind.parse("AdamPS") is OptimizerKind.ADAFACTOR
    assert OptimizerKind.parse("adam-atan2") is OptimizerKind.ADAM
    with pytest.raises(ValueError):
        OptimizerKind.parse("lion")
