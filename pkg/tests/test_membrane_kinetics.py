"""Membrane flux laws and transporter kinetics against closed forms and a
fine-step RK4 oracle."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tissueflow.errors import DomainError, ParameterError, StateError
from tissueflow.membrane_kinetics import (
    MembraneCoefficients,
    TransporterParams,
    TransporterState,
    kedem_fluxes,
    membrane_solute_exchange,
    membrane_water_flux,
    michaelis_menten_efflux,
    quasi_stationary_flux,
    step_transporters,
    transporter_rhs,
    velocity_cutoff,
)

rate = st.floats(0.0, 10.0)
conc = st.floats(0.0, 10.0)


def rk4_trajectory(state, c_I, c_II, rho_I, rho_II, params, t_end, nsteps):
    """Reference integrator for the transporter ODE system (plain floats so
    a million steps stay cheap)."""
    yf, yb = float(np.asarray(state.theta_f)), float(np.asarray(state.theta_b))
    alpha = float(params.alpha(c_I, c_II, rho_I, rho_II))
    beta, gf, gb = params.beta, params.gamma_f, params.gamma_b
    rp, ts = params.r_plus, params.theta_star
    dt = t_end / nsteps

    def f(a, b):
        ex = alpha * a - beta * b
        return rp * max(0.0, ts - a) - ex - gf * a, ex - gb * b

    for _ in range(nsteps):
        k1f, k1b = f(yf, yb)
        k2f, k2b = f(yf + dt / 2 * k1f, yb + dt / 2 * k1b)
        k3f, k3b = f(yf + dt / 2 * k2f, yb + dt / 2 * k2b)
        k4f, k4b = f(yf + dt * k3f, yb + dt * k3b)
        yf += dt / 6 * (k1f + 2 * k2f + 2 * k3f + k4f)
        yb += dt / 6 * (k1b + 2 * k2b + 2 * k3b + k4b)
    return np.array([yf, yb])


# ---------------------------------------------------------------------------
# velocity cutoff


def test_cutoff_examples():
    assert velocity_cutoff(np.array([0.5, -0.3]), 1.0).tolist() == [0.5, -0.3]
    assert velocity_cutoff(np.array([3.0, -2.0]), 1.0).tolist() == [1.0, -1.0]
    with pytest.raises(ParameterError):
        velocity_cutoff(np.zeros(2), 0.0)


def test_cutoff_idempotent_1000_draws():
    rng = np.random.default_rng(42)
    xi = rng.normal(scale=3.0, size=(1000, 2))
    once = velocity_cutoff(xi, 1.0)
    assert np.array_equal(velocity_cutoff(once, 1.0), once)


@given(
    st.lists(st.floats(-50, 50), min_size=2, max_size=2),
    st.lists(st.floats(-50, 50), min_size=2, max_size=2),
    st.floats(0.1, 10),
)
@settings(max_examples=100, deadline=None)
def test_cutoff_nonexpansive(xi, zeta, M):
    a = velocity_cutoff(np.array(xi), M)
    b = velocity_cutoff(np.array(zeta), M)
    assert np.abs(a - b).max() <= np.abs(np.array(xi) - np.array(zeta)).max() + 1e-15


# ---------------------------------------------------------------------------
# membrane fluxes


def test_kedem_examples():
    base = MembraneCoefficients()
    assert kedem_fluxes(0.0, 0.0, base) == (0.0, 0.0)

    nonreflecting = MembraneCoefficients(sigma=0.0)
    _, mixture = kedem_fluxes(2.0, -1.0, nonreflecting)
    assert mixture == 0.0

    unit = MembraneCoefficients(sigma=1.0, thickness=1.0, D=1.0, G=0.0, Dw=1.0, Gw=1.0, rho=1.0)
    solute, mixture = kedem_fluxes(2.0, 1.0, unit)
    assert solute == -2.0 and mixture == 1.0


def test_membrane_coefficient_validation():
    with pytest.raises(ParameterError):
        MembraneCoefficients(sigma=1.5)
    with pytest.raises(ParameterError):
        MembraneCoefficients(thickness=0.0)
    with pytest.raises(ParameterError):
        MembraneCoefficients(D=-1.0)
    # barodiffusion G may take either sign
    MembraneCoefficients(G=-2.0)


def test_kedem_derived_permeabilities():
    m = MembraneCoefficients(sigma=0.5, thickness=0.2, Dw=3.0, Gw=4.0)
    assert m.kappa == pytest.approx(0.5 * 4.0 / 0.2)
    assert m.delta == pytest.approx(0.5 * 3.0 / 0.2)


def test_water_flux_signs():
    assert membrane_water_flux(0.0, 0.0, 0.0, 0.0, 0.0) == 0.0
    # pressure deficit on the Darcy side pulls water out of the cell
    assert membrane_water_flux(0.0, -1.0, 0.0, kappa=2.0, delta=1.0) > 0
    # concentration deficit on the Darcy side drives water into the cell
    assert membrane_water_flux(0.0, 0.0, -1.0, kappa=2.0, delta=1.0) < 0
    assert membrane_water_flux(0.5, 0.25, 2.0, kappa=2.0, delta=3.0) == pytest.approx(
        3.0 * 2.0 - 2.0 * 0.75
    )


def test_solute_exchange_examples():
    assert membrane_solute_exchange(0.0, 0.0, 0.0, 0.0, 0.0) == 0.0
    assert membrane_solute_exchange(2.0, 3.0, 6.0, 1.0, 1.0) == 0.0  # balance
    assert membrane_solute_exchange(1.0, 1.0, 3.0, 2.0, 1.0) == 1.0


# ---------------------------------------------------------------------------
# transporter ODEs


def test_rhs_conserves_total_without_decay():
    params = TransporterParams("a", k1=2.0, k2=1.0, k3=0.5, k4=0.25)
    df, db = transporter_rhs(TransporterState(1.0, 2.0), 1.0, 3.0, 1.0, 1.0, params)
    assert df + db == pytest.approx(0.0, abs=1e-15)


def test_rhs_steady_state_ratio():
    params = TransporterParams("a", k1=2.0, k2=1.0, k3=0.5, k4=0.25)
    alpha = float(params.alpha(1.0, 3.0, 1.0, 1.0))
    theta_f = 1.2
    theta_b = alpha * theta_f / params.beta
    df, db = transporter_rhs(
        TransporterState(theta_f, theta_b), 1.0, 3.0, 1.0, 1.0, params
    )
    assert df == pytest.approx(0.0, abs=1e-14)
    assert db == pytest.approx(0.0, abs=1e-14)


def test_rhs_rejects_negative_concentration():
    params = TransporterParams("a", k1=1.0, k2=1.0, k3=1.0)
    with pytest.raises(DomainError):
        transporter_rhs(TransporterState(1.0, 0.0), -0.5, 0.0, 1.0, 1.0, params)


def test_step_no_dynamics():
    params = TransporterParams("a")
    out = step_transporters(TransporterState(1.0, 0.0), 0.0, 0.0, 1.0, 1.0, params, 1.0)
    assert (out.theta_f, out.theta_b) == (1.0, 0.0)


def test_step_implicit_binding_limit():
    # pure binding, huge dt: everything ends up bound
    params = TransporterParams("a", k1=1.0)
    out = step_transporters(
        TransporterState(1.0, 0.0), 1.0, 0.0, 1.0, 1.0, params, 1e12
    )
    assert out.theta_f == pytest.approx(0.0, abs=1e-10)
    assert out.theta_b == pytest.approx(1.0, abs=1e-10)


def test_single_step_against_fine_rk4():
    # one backward-Euler step at dt = 2e-5; the local error O(dt^2) sits
    # below the 1e-8 relative tolerance against an effectively exact oracle
    params = TransporterParams("a", k1=2.0, k2=1.0, k3=0.5, k4=0.25, gamma_f=0.1,
                               gamma_b=0.2, r_plus=0.3, theta_star=2.0)
    state = TransporterState(1.0, 0.5)
    dt = 2e-5
    stepped = step_transporters(state, 1.0, 3.0, 1.0, 1.0, params, dt)
    exact = rk4_trajectory(state, 1.0, 3.0, 1.0, 1.0, params, dt, 1000)
    scale = max(abs(exact[0]), abs(exact[1]))
    assert abs(stepped.theta_f - exact[0]) / scale < 1e-8
    assert abs(stepped.theta_b - exact[1]) / scale < 1e-8


def test_trajectory_against_rk4_oracle():
    # 1000 backward-Euler steps over [0,1] vs an RK4 oracle at 10^6 steps
    # (1000 substeps per checkpoint); slow kinetics keep the first-order
    # global error under 1e-6 across the whole path, fast kinetics are
    # covered by the long-time test below
    params = TransporterParams("a", k1=0.01, k2=0.005, k3=0.005, k4=0.0025)
    state = TransporterState(1.0, 0.25)
    nsteps, t_end = 1000, 1.0
    dt = t_end / nsteps
    worst = 0.0
    ref = TransporterState(1.0, 0.25)
    for _ in range(nsteps):
        state = step_transporters(state, 2.0, 1.0, 1.0, 1.0, params, dt)
        fine = rk4_trajectory(ref, 2.0, 1.0, 1.0, 1.0, params, dt, 1000)
        ref = TransporterState(fine[0], fine[1])
        worst = max(worst, abs(state.theta_f - ref.theta_f),
                    abs(state.theta_b - ref.theta_b))
    assert worst < 1e-6


def test_total_conserved_per_step():
    params = TransporterParams("a", k1=2.0, k2=1.0, k3=0.5, k4=0.25)
    state = TransporterState(1.0, 0.5)
    total = state.theta0
    for _ in range(1000):
        state = step_transporters(state, 1.0, 3.0, 1.0, 1.0, params, 0.01)
        assert abs(state.theta0 - total) < 1e-12
        total = state.theta0
    assert abs(state.theta0 - 1.5) < 1e-9


@given(
    k1=rate, k2=rate, k3=rate, k4=rate,
    gf=st.floats(0, 2), gb=st.floats(0, 2),
    tf=conc, tb=conc, cI=conc, cII=conc,
    dt=st.floats(1e-6, 1e3),
)
@settings(max_examples=120, deadline=None)
def test_step_preserves_nonnegativity(k1, k2, k3, k4, gf, gb, tf, tb, cI, cII, dt):
    params = TransporterParams("a", k1=k1, k2=k2, k3=k3, k4=k4,
                               gamma_f=gf, gamma_b=gb, r_plus=0.5, theta_star=1.0)
    out = step_transporters(TransporterState(tf, tb), cI, cII, 1.0, 1.0, params, dt)
    assert out.theta_f >= 0.0 and out.theta_b >= 0.0


def test_step_vectorized_over_nodes():
    params = TransporterParams("a", k1=1.0, k2=0.5, k3=0.5)
    state = TransporterState(np.ones(4), np.zeros(4))
    c = np.array([0.0, 1.0, 2.0, 3.0])
    out = step_transporters(state, c, 0.0, 1.0, 1.0, params, 0.1)
    assert out.theta_f.shape == (4,)
    assert out.theta_f[0] == 1.0  # no substrate, no binding
    assert np.all(np.diff(out.theta_f) < 0)  # more substrate binds more


# ---------------------------------------------------------------------------
# quasi-stationary reduction and Michaelis-Menten


def test_qs_examples():
    flux, _ = quasi_stationary_flux(2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    assert flux == pytest.approx(0.0, abs=1e-15)

    flux, theta_f = quasi_stationary_flux(1.0, 0.0, 1.0, 1.0, 3.0, 1.0, 1.0, 1.0, 0.0)
    assert theta_f == pytest.approx(2.0)
    assert flux == pytest.approx(1.0)

    with pytest.raises(ParameterError):
        quasi_stationary_flux(1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0)


def test_qs_matches_longtime_ode():
    # frozen concentrations, run to 50 relaxation times: theta_f settles on
    # the quasi-stationary value
    params = TransporterParams("a", k1=2.0, k2=1.5, k3=0.5, k4=0.25)
    cI, cII = 1.0, 3.0
    alpha = float(params.alpha(cI, cII, 1.0, 1.0))
    relax = 1.0 / (alpha + params.beta)
    state = TransporterState(1.0, 0.5)
    t_end, nsteps = 50 * relax, 5000
    for _ in range(nsteps):
        state = step_transporters(state, cI, cII, 1.0, 1.0, params, t_end / nsteps)
    _, theta_f = quasi_stationary_flux(
        cI, cII, 1.0, 1.0, state.theta0, params.k1, params.k2, params.k3, params.k4
    )
    assert abs(state.theta_f - theta_f) < 1e-8


def test_mm_examples():
    assert michaelis_menten_efflux(0.0, 1.0, 2.0, 1.0, 1.0, 1.0) == 0.0
    # saturation limit
    big = michaelis_menten_efflux(1e14, 1.0, 2.0, 1.0, 1.0, 3.0)
    assert big == pytest.approx(3.0 * 2.0, rel=1e-10)


def test_mm_monotone_and_bounded():
    c = np.linspace(0, 50, 200)
    eff = michaelis_menten_efflux(c, 1.0, 2.0, 1.5, 0.5, 3.0)
    assert np.all(np.diff(eff) >= 0)
    assert np.all(eff <= 3.0 * 2.0 + 1e-15)


def test_mm_equals_qs_with_k4_zero_1000_draws():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        k1, k2, k3 = rng.uniform(0.01, 5.0, 3)
        cI, rhoI, theta0 = rng.uniform(0.0, 10.0, 3)
        qs, _ = quasi_stationary_flux(cI, 0.0, rhoI, 1.0, theta0, k1, k2, k3, 0.0)
        mm = michaelis_menten_efflux(cI, rhoI, theta0, k1, k2, k3)
        assert abs(qs - mm) <= 1e-12 * max(1.0, abs(mm))


# ---------------------------------------------------------------------------
# parameter/state validation


def test_params_validation():
    with pytest.raises(ParameterError):
        TransporterParams("a", k1=-1.0)
    with pytest.raises(ParameterError):
        TransporterParams("x")


def test_state_validation():
    with pytest.raises(StateError):
        TransporterState(-0.1, 0.0)
    with pytest.raises(StateError):
        TransporterState(np.ones(3), np.ones(4))
