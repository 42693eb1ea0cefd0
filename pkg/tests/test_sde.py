import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdelab.sde import (
    ChainKind,
    DiscreteSchedule,
    ParameterError,
    SdeKind,
    build_sde,
    ddpm_schedule,
    kernel_match_report,
    simulate_discrete_chain,
    smld_schedule,
    variance_trajectory,
)

mpmath.mp.dps = 40


@pytest.fixture(params=["VE", "VP", "SubVP"])
def sde(request):
    return build_sde(request.param)


def test_defaults():
    vp = build_sde("VP")
    assert (vp.beta_min, vp.beta_max) == (0.1, 20.0)
    assert vp.eps_train == 1e-5 and vp.eps_sample == 1e-3
    ve = build_sde("VE", sigma_max=None)
    assert (ve.sigma_min, ve.sigma_max) == (0.01, 50.0)
    assert ve.eps_sample == 1e-5
    t = np.linspace(0, 1, 11)
    np.testing.assert_allclose(vp.beta(t), 0.1 + t * 19.9, rtol=1e-15)


@pytest.mark.parametrize(
    "kind, params, field",
    [
        ("VP", {"beta_min": 5, "beta_max": 1}, "beta_max"),
        ("VE", {"sigma_min": 2.0, "sigma_max": 1.0}, "sigma_max"),
        ("VE", {"sigma_min": -1.0}, "sigma_min"),
        ("SubVP", {"eps_train": 0.0}, "eps_train"),
        ("VP", {"eps_sample": 1.5}, "eps_sample"),
    ],
)
def test_rejects_bad_parameters(kind, params, field):
    with pytest.raises(ParameterError) as info:
        build_sde(kind, **params)
    assert info.value.field == field


def test_kind_parsing():
    assert build_sde("sub-vp").kind is SdeKind.SUBVP
    with pytest.raises(ValueError):
        build_sde("VX")


def test_drift():
    ve, vp, sub = build_sde("VE"), build_sde("VP"), build_sde("SubVP")
    np.testing.assert_array_equal(ve.drift(np.array([3.0, -1.0]), 0.5), [0.0, 0.0])
    np.testing.assert_allclose(vp.drift(np.array([1.0, 0.0]), 0.0), [-0.05, 0.0], rtol=1e-15)
    rng = np.random.default_rng(0)
    x, t = rng.normal(size=(50, 3)), rng.uniform(0, 1, 50)
    np.testing.assert_array_equal(sub.drift(x, t), vp.drift(x, t))


def test_diffusion_values():
    vp, ve, sub = build_sde("VP"), build_sde("VE"), build_sde("SubVP")
    assert vp.diffusion(1.0) == pytest.approx(float(mpmath.sqrt(20)), rel=1e-14)
    expected_ve = 50 * mpmath.sqrt(2 * mpmath.log(5000))  # 206.3636740...
    assert ve.diffusion(1.0) == pytest.approx(float(expected_ve), rel=1e-13)
    assert sub.diffusion(1e-12) < 1e-6
    assert sub.diffusion(0.0) == 0.0


def test_diffusion_matches_derivative_of_variance(sde):
    # g(t)^2 = d/dt var(x_t | x_0) + beta(t) var for affine drift; check by finite differences.
    t = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    var = lambda u: sde.perturbation_kernel(u)[1] ** 2
    dvar = (var(t + h) - var(t - h)) / (2 * h)
    decay = 0.0 if sde.kind is SdeKind.VE else sde.beta(t)
    np.testing.assert_allclose(sde.diffusion(t) ** 2, dvar + decay * var(t), rtol=1e-6)


def test_kernel_values():
    vp, sub = build_sde("VP"), build_sde("SubVP")
    m, s = vp.perturbation_kernel(0.0)
    assert (m, s) == (1.0, 0.0)
    m, s = vp.perturbation_kernel(1.0)
    assert m == pytest.approx(float(mpmath.exp(-5.025)), rel=1e-13)
    assert s == pytest.approx(float(mpmath.sqrt(1 - mpmath.exp(-10.05))), rel=1e-14)
    _, s_sub = sub.perturbation_kernel(1.0)
    assert s_sub == pytest.approx(float(1 - mpmath.exp(-10.05)), rel=1e-14)
    assert s_sub <= s


def test_kernel_precision_near_zero():
    vp = build_sde("VP")
    t = 1e-9
    _, s = vp.perturbation_kernel(t)
    ib = mpmath.mpf(0.1) * t + mpmath.mpf(t) ** 2 * mpmath.mpf(19.9) / 2
    assert s == pytest.approx(float(mpmath.sqrt(-mpmath.expm1(-ib))), rel=1e-12)


def test_ve_clamps_below_eps():
    ve = build_sde("VE")
    assert ve.perturbation_kernel(0.0)[1] == ve.perturbation_kernel(ve.eps_train)[1]
    assert ve.perturbation_kernel(0.0)[1] == pytest.approx(0.01, rel=1e-4)
    with pytest.raises(ValueError):
        ve.perturbation_kernel(-0.1)
    with pytest.raises(ValueError):
        ve.perturbation_kernel(1.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-5, 1.0), st.floats(1e-5, 1.0), st.sampled_from(["VE", "VP", "SubVP"]))
def test_std_monotone_and_subvp_bounded(t1, t2, kind):
    t1, t2 = sorted((t1, t2))
    sde = build_sde(kind)
    assert sde.perturbation_kernel(t1)[1] <= sde.perturbation_kernel(t2)[1]
    if kind != "VE":
        assert build_sde("SubVP").perturbation_kernel(t1)[1] <= build_sde("VP").perturbation_kernel(t1)[1]


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0), st.sampled_from(["VE", "VP", "SubVP"]))
def test_kernel_semigroup(a, b, kind):
    s, t = sorted((a, b))
    sde = build_sde(kind)
    m_s, std_s = sde.perturbation_kernel(s)
    m_st, var_st = sde.transition_kernel(s, t)
    m_t, std_t = sde.perturbation_kernel(t)
    assert m_s * m_st == pytest.approx(m_t, rel=1e-12)
    composed = m_st**2 * std_s**2 + var_st
    if kind == "VE":
        # both kernels start from sigma(eps) rather than 0
        composed = std_s**2 + var_st
    assert composed == pytest.approx(std_t**2, rel=1e-12, abs=1e-300)


def test_variance_trajectory():
    vp, sub = build_sde("VP"), build_sde("SubVP")
    t = np.linspace(0, 1, 101)
    np.testing.assert_allclose(variance_trajectory(vp, 1.0, t), 1.0, atol=1e-12, rtol=0)
    assert variance_trajectory(sub, 1.0, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert variance_trajectory(sub, 1.0, 0.5) <= variance_trajectory(vp, 1.0, 0.5)
    with pytest.raises(ValueError):
        variance_trajectory(build_sde("VE"), 1.0, 0.5)


@pytest.mark.parametrize("kind", ["VP", "SubVP"])
@pytest.mark.parametrize("sigma0_sq", [0.0, 0.3, 1.0, 4.0])
def test_variance_trajectory_equals_kernel_push_forward(kind, sigma0_sq):
    sde = build_sde(kind)
    t = np.linspace(0, 1, 21)
    m, s = sde.perturbation_kernel(t)
    np.testing.assert_allclose(variance_trajectory(sde, sigma0_sq, t), m * m * sigma0_sq + s * s, rtol=1e-12, atol=1e-15)
    assert abs(variance_trajectory(sde, sigma0_sq, 1.0) - 1.0) < 1e-4 * max(1.0, sigma0_sq)


def test_subvp_variance_below_vp_everywhere():
    t = np.linspace(0, 1, 101)
    for v0 in (0.0, 0.5, 1.0, 3.0):
        assert np.all(variance_trajectory(build_sde("SubVP"), v0, t) <= variance_trajectory(build_sde("VP"), v0, t) + 1e-15)


def test_schedules():
    sm = smld_schedule(10)
    assert sm.values[0] == pytest.approx(0.01) and sm.values[-1] == pytest.approx(50.0)
    ratios = sm.values[1:] / sm.values[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)
    dd = ddpm_schedule(100)
    np.testing.assert_allclose(np.diff(dd.values), np.diff(dd.values)[0], rtol=1e-10)
    assert dd.values[0] == pytest.approx(0.1 / 100)
    assert dd.values[-1] == pytest.approx(20.0 / 100)
    with pytest.raises(ParameterError):
        ddpm_schedule(10)  # last beta would be 2
    assert np.all(np.diff(dd.alphas) < 0) and np.all((dd.alphas > 0) & (dd.alphas < 1))
    with pytest.raises(AttributeError):
        sm.alphas
    with pytest.raises(ParameterError):
        DiscreteSchedule(ChainKind.DDPM, [0.5, 1.2], [0.5, 1.0])
    with pytest.raises(ParameterError):
        DiscreteSchedule(ChainKind.SMLD, [2.0, 1.0], [0.5, 1.0])


def test_nearest_index():
    sched = DiscreteSchedule(ChainKind.DDPM, [0.1, 0.2, 0.3, 0.4], [0.25, 0.5, 0.75, 1.0])
    np.testing.assert_array_equal(sched.nearest_index([0.0, 0.26, 0.6, 0.99, 1.0]), [0, 0, 1, 3, 3])
    assert int(smld_schedule(1).nearest_index(0.3)) == 0


def test_smld_chain_marginal_variance():
    rng = np.random.default_rng(1)
    sched = smld_schedule(1000)
    n = 100_000
    xN = simulate_discrete_chain(sched, np.zeros(n), rng, final_only=True)
    var = xN.var(ddof=1)
    se = sched.values[-1] ** 2 * np.sqrt(2 / (n - 1))
    assert abs(var - sched.values[-1] ** 2) < 3 * se


def test_ddpm_chain_degenerate_and_mean():
    rng = np.random.default_rng(2)
    tiny = DiscreteSchedule(ChainKind.DDPM, np.full(50, 1e-14), np.arange(1, 51) / 50)
    x0 = np.array([1.5, -2.0])
    np.testing.assert_allclose(simulate_discrete_chain(tiny, x0, rng)[-1], x0, atol=1e-5)

    sched = ddpm_schedule(1000)
    n = 100_000
    xN = simulate_discrete_chain(sched, np.ones(n), rng, final_only=True)
    # E[x_N] = sqrt(alpha_N) x0 for x0 = 1
    assert abs(xN.mean() - np.sqrt(sched.alphas[-1])) < 4 / np.sqrt(n)
    assert np.sqrt(sched.alphas[-1]) == pytest.approx(build_sde("VP").perturbation_kernel(1.0)[0], abs=1e-3)


def test_chain_trajectory_shape():
    rng = np.random.default_rng(0)
    traj = simulate_discrete_chain(smld_schedule(7), np.zeros((3, 2)), rng)
    assert traj.shape == (7, 3, 2)


def test_kernel_match_report():
    ve = kernel_match_report(build_sde("VE"), 1000)
    vp = kernel_match_report(build_sde("VP"), 1000)
    assert ve.max_rel_std < 1e-2 and ve.max_pointwise_rel_std < 1e-2
    assert vp.max_rel_mean_coeff < 1e-2 and vp.max_rel_std < 1e-2
    assert len(kernel_match_report(build_sde("VE"), 2).rows()) == 2
    with pytest.raises(ValueError):
        kernel_match_report(build_sde("SubVP"), 10)
    with pytest.raises(ParameterError):
        kernel_match_report(build_sde("VP"), 1)


@pytest.mark.parametrize("kind", ["VE", "VP"])
def test_kernel_match_first_order_convergence(kind):
    sde = build_sde(kind)
    a, b = kernel_match_report(sde, 1000), kernel_match_report(sde, 2000)
    for attr in ("max_rel_std", "max_pointwise_rel_std") + (("max_rel_mean_coeff",) if kind == "VP" else ()):
        ratio = getattr(a, attr) / getattr(b, attr)
        assert 2 / 1.5 <= ratio <= 2 * 1.5, (attr, ratio)
