import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from udfvr.evaluation import verify_naive_bias
from udfvr.fields import AnalyticScene, Disk, Ray, builtin_scene
from udfvr.rendering import (
    FAMILIES,
    DensityFamily,
    RaySampleSet,
    alpha_compose,
    alpha_compose_sigma,
    composite_color,
    dump_profile,
    naive_neus_weights,
    point_weights,
    render_ray,
    sigma_r,
    tau_r_continuous,
)

D = torch.float64


def line_samples(t, psi, grad_dir=None):
    t = torch.as_tensor(t, dtype=D)
    psi = torch.as_tensor(psi, dtype=D)
    o = torch.zeros(3, dtype=D)
    v = torch.tensor([0.0, 0.0, 1.0], dtype=D)
    g = None
    if grad_dir is not None:
        g = torch.zeros(len(t), 3, dtype=D)
        g[:, 2] = torch.as_tensor(grad_dir, dtype=D)
    return RaySampleSet(t, psi, o, v, g)


# --- sigma_r ---------------------------------------------------------------


@pytest.mark.parametrize("kind", FAMILIES)
@pytest.mark.parametrize("r", [1e-2, 1.0, 1e4])
def test_sigma_zero_at_zero(kind, r):
    assert float(sigma_r(DensityFamily(kind, r), torch.zeros(1, dtype=D))) == 0.0


def test_sigma_rational_half():
    assert float(DensityFamily("rational", 1.0)(torch.tensor(1.0, dtype=D))) == 0.5


def test_sigma_exp_large():
    v = float(DensityFamily("exp", 1.0)(torch.tensor(20.0, dtype=D)))
    assert v == pytest.approx(1 - math.exp(-20), rel=0, abs=1e-15)
    grid = DensityFamily("exp", 1.0)(torch.linspace(0, 20, 200, dtype=D))
    assert bool((torch.diff(grid) > 0).all())


def test_sigma_rejects_negative():
    with pytest.raises(ValueError):
        sigma_r(DensityFamily(), torch.tensor([-1e-3], dtype=D))


def test_family_validation():
    with pytest.raises(ValueError):
        DensityFamily("cubic", 1.0)
    with pytest.raises(ValueError):
        DensityFamily("rational", 0.0)


@pytest.mark.parametrize("kind", FAMILIES)
def test_derivatives_match_autograd(kind):
    d = torch.logspace(-4, 2, 50, dtype=D).requires_grad_(True)
    fam = DensityFamily(kind, 3.0)
    (g,) = torch.autograd.grad(fam(d).sum(), d, create_graph=True)
    (h,) = torch.autograd.grad(g.sum(), d)
    torch.testing.assert_close(g, fam.derivative(d), rtol=1e-12, atol=1e-14)
    torch.testing.assert_close(h, fam.second_derivative(d), rtol=1e-10, atol=1e-14)


# --- alpha compositing -----------------------------------------------------


def test_alpha_direct_formula():
    prof = alpha_compose_sigma(torch.tensor([0.4, 0.2], dtype=D))
    assert float(prof.alpha[0]) == pytest.approx(0.5)


def test_constant_bin_is_transparent():
    prof = alpha_compose(torch.tensor([0.3, 0.3], dtype=D), DensityFamily("rational", 1.0))
    assert float(prof.alpha[0]) == 0.0
    prof = alpha_compose(torch.tensor([0.0, 0.0], dtype=D), DensityFamily("rational", 1.0))
    assert float(prof.alpha[0]) == 0.0


def test_telescoping_closed_form():
    psi = torch.linspace(1.0, 0.1, 65, dtype=D)
    prof = alpha_compose(psi, DensityFamily("rational", 1.0))
    expected = (0.1 / 1.1) / 0.5
    assert float(prof.trans_end) == pytest.approx(expected, rel=1e-13)


@settings(max_examples=150, deadline=None)
@given(
    psi=st.lists(st.floats(0.0, 3.0), min_size=2, max_size=80),
    kind=st.sampled_from(FAMILIES),
    r=st.floats(1e-2, 1e4),
)
def test_profile_invariants(psi, kind, r):
    prof = alpha_compose(torch.tensor(psi, dtype=D), DensityFamily(kind, r))
    assert bool(((prof.alpha >= 0) & (prof.alpha <= 1)).all())
    assert bool((torch.diff(prof.trans) <= 0).all())
    assert bool((prof.weights >= 0).all())
    assert -1e-12 <= float(prof.acc) <= 1 + 1e-12
    assert float(prof.acc + prof.trans_end) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    start=st.floats(0.05, 2.0),
    frac=st.floats(0.01, 0.95),
    n=st.integers(2, 600),
    kind=st.sampled_from(FAMILIES),
    r=st.floats(1e-1, 1e3),
)
def test_telescoping_any_bin_count(start, frac, n, kind, r):
    fam = DensityFamily(kind, r)
    psi = torch.linspace(start, start * frac, n, dtype=D)
    expected = fam(psi[-1:]) / fam(psi[:1])
    assert float(alpha_compose(psi, fam).trans_end) == pytest.approx(float(expected), rel=1e-12)


# --- render_ray ------------------------------------------------------------


def disk_field(scene):
    def f(pts):
        d, g = scene.eval(pts.reshape(-1, 3).numpy())
        return torch.from_numpy(d).reshape(pts.shape[:-1]), torch.from_numpy(g).reshape(pts.shape)

    return f


def test_uniform_color_opaque_scene():
    scene = builtin_scene("disk")
    t = torch.linspace(1.0, 3.0, 513, dtype=D)
    s = RaySampleSet(t, t.clone(), torch.tensor([0.01, 0.0, -2.0], dtype=D), torch.tensor([0.0, 0, 1], dtype=D))
    red = lambda p, v: torch.tensor([1.0, 0.0, 0.0], dtype=D).expand_as(p)
    c, prof, acc = render_ray(disk_field(scene), red, s, DensityFamily("rational", 1e4))
    assert float(acc) > 0.999
    torch.testing.assert_close(c / acc, torch.tensor([1.0, 0.0, 0.0], dtype=D))


def test_empty_scene_shows_background():
    far = AnalyticScene((Disk((0, 0, 50.0), (0, 0, 1), 0.5),))
    t = torch.linspace(1.0, 3.0, 129, dtype=D)
    s = RaySampleSet(t, t.clone(), torch.tensor([0.0, 0.0, -2.0], dtype=D), torch.tensor([0.0, 0, 1], dtype=D))
    bg = torch.tensor([0.2, 0.4, 0.6], dtype=D)
    white = lambda p, v: torch.ones_like(p)
    c, _, acc = render_ray(disk_field(far), white, s, DensityFamily("rational", 1.0), background=bg)
    assert float(acc) < 0.05
    torch.testing.assert_close(c, bg, atol=0.05, rtol=0)


def test_color_converges_to_first_hit():
    scene = builtin_scene("two-planes")
    o = torch.tensor([0.02, 0.01, -2.0], dtype=D)
    v = torch.tensor([0.0, 0.0, 1.0], dtype=D)
    # the crossing itself is a node, otherwise the straddling bin leaks sigma(psi_min)
    t = torch.from_numpy(np.union1d(np.linspace(1.0, 3.0, 2**14 - 1), [2.0]))
    s = RaySampleSet(t, t.clone(), o, v)
    color = lambda p, _v: torch.where(p[..., 2:3] < 0.25, torch.tensor([1.0, 0, 0], dtype=D), torch.tensor([0, 0, 1.0], dtype=D))
    c, prof, _ = render_ray(disk_field(scene), color, s, DensityFamily("rational", 1e4))
    assert float(c[0]) > 0.99
    # mass within delta of the hit from the closed form sigma(delta)/sigma(psi(t_near))
    fam = DensityFamily("rational", 1e4)
    i = int(torch.searchsorted(t, torch.tensor(2.0 - 0.01, dtype=D)))
    closed = 1 - float(fam(torch.tensor(2.0 - float(t[i]), dtype=D)) / fam(torch.tensor(1.0, dtype=D)))
    assert float(prof.mass_between(0, i)) == pytest.approx(closed, rel=1e-12)
    assert 1 - float(prof.trans[i]) < 0.01


def test_color_placement_modes():
    prof = alpha_compose_sigma(torch.tensor([1.0, 0.5, 0.25], dtype=D))
    cols = torch.tensor([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]], dtype=D)
    left = composite_color(prof, cols, placement="left")
    mid = composite_color(prof, cols, placement="midpoint")
    torch.testing.assert_close(left, torch.tensor([0.5, 0.25, 0.0], dtype=D))
    torch.testing.assert_close(mid, torch.tensor([0.25, 0.375, 0.125], dtype=D))
    with pytest.raises(ValueError):
        composite_color(prof, cols, placement="right")


def test_sample_set_validation():
    with pytest.raises(ValueError):
        line_samples([0.0], [1.0])
    with pytest.raises(ValueError):
        line_samples([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        line_samples([0.0, 1.0], [1.0, -1.0])


# --- tau_r -----------------------------------------------------------------


def test_tau_linear_descent():
    s = line_samples([0.0, 0.5], [1.0, 0.5], grad_dir=[-1.0, -1.0])
    tau, valid = tau_r_continuous(s, DensityFamily("rational", 1.0))
    assert float(tau[0]) == pytest.approx(0.5)
    assert bool(valid.all())


def test_tau_constant_segment():
    s = line_samples([0.0, 1.0], [0.4, 0.4], grad_dir=[0.0, 0.0])
    tau, _ = tau_r_continuous(s, DensityFamily("rational", 1.0))
    assert float(tau.abs().max()) == 0.0


def test_tau_zero_distance_node_is_skipped():
    s = line_samples([0.0, 1.0], [1.0, 0.0], grad_dir=[-1.0, -1.0])
    tau, valid = tau_r_continuous(s, DensityFamily("rational", 1.0))
    assert valid.tolist() == [True, False] and float(tau[1]) == 0.0


@pytest.mark.parametrize("kind", FAMILIES)
@pytest.mark.parametrize("r", [0.5, 5.0, 50.0])
def test_tau_integral_matches_log_antiderivative(kind, r):
    fam = DensityFamily(kind, r)
    a, b = 0.9, 0.05

    def tau(t):
        s = line_samples([t, t + 1e-9], [a - (a - b) * t, a - (a - b) * t], grad_dir=[-(a - b), -(a - b)])
        return float(tau_r_continuous(s, fam)[0][0])

    val, _ = integrate.quad(tau, 0.0, 1.0, epsabs=1e-12, epsrel=1e-12)
    closed = math.log(float(fam(torch.tensor(a, dtype=D)))) - math.log(float(fam(torch.tensor(b, dtype=D))))
    assert abs(val - closed) < 1e-6


def test_point_weights_peak_at_surface():
    scene = builtin_scene("disk")
    o = torch.tensor([0.0, 0.0, -2.0], dtype=D)
    v = torch.tensor([0.0, 0.0, 1.0], dtype=D)
    t = torch.linspace(1.0, 3.0, 1001, dtype=D)
    d, g = disk_field(scene)(o + t[:, None] * v)
    w = point_weights(RaySampleSet(t, d, o, v, g), DensityFamily("rational", 100.0))
    assert abs(float(t[int(torch.argmax(w))]) - 2.0) < 2.5e-3


# --- naive comparator ------------------------------------------------------


def test_naive_limits_two_planes():
    rep = verify_naive_bias(builtin_scene("two-planes"), Ray([0.013, 0.007, -2.0], [0, 0, 1], 1.0, 3.0))
    last = rep.rows[-1]
    assert last["before_t0l"] < 0.02
    assert last["through_t0"] == pytest.approx(0.5, abs=0.02)
    assert last["beyond_t1"] == pytest.approx(0.25, abs=0.03)
    assert rep.passed


def test_naive_cascade_three_surfaces():
    scene = AnalyticScene(tuple(Disk((0, 0, z), (0, 0, 1), 0.5) for z in (0.0, 0.3, 0.6)), name="three")
    rep = verify_naive_bias(scene, Ray([0.01, 0.02, -2.0], [0, 0, 1], 1.0, 3.0))
    last = rep.rows[-1]
    assert last["beyond_t0"] == pytest.approx(0.5, abs=0.02)
    assert last["beyond_t1"] == pytest.approx(0.25, abs=0.03)
    assert last["beyond_t2"] == pytest.approx(0.125, abs=0.03)


def test_naive_weights_nonnegative_increasing_distance():
    psi = torch.linspace(0.0, 1.0, 50, dtype=D)
    prof = naive_neus_weights(psi, 100.0)
    assert float(prof.acc) == 0.0


def test_dump_profile(tmp_path):
    psi = torch.linspace(1.0, 0.1, 9, dtype=D)
    fam = DensityFamily("rational", 1.0)
    prof = alpha_compose(psi, fam)
    dump_profile(tmp_path / "p.tsv", torch.arange(9.0), psi, fam(psi), prof)
    rows = (tmp_path / "p.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["t", "psi", "sigma", "alpha", "T", "w"]
    assert len(rows) == 9
