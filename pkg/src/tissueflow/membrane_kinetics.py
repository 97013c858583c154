"""Interface physics: membrane fluxes, transporter kinetics, velocity cutoff.

All operations are pure and vectorized; scalar arguments give scalars,
arrays give arrays. Jumps [.] are (Darcy value - Stokes value) and interface
normals point from the Stokes side into the Darcy side throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError, StateError

__all__ = [
    "MembraneCoefficients",
    "TransporterParams",
    "TransporterState",
    "velocity_cutoff",
    "kedem_fluxes",
    "membrane_water_flux",
    "transporter_rhs",
    "step_transporters",
    "quasi_stationary_flux",
    "michaelis_menten_efflux",
    "membrane_solute_exchange",
]


@dataclass(frozen=True)
class MembraneCoefficients:
    """One membrane's transport coefficients.

    `sigma` is the reflection coefficient (0 = nonreflecting), `thickness`
    the membrane thickness. `D` and `G` are the solute diffusion and
    (signed) barodiffusion coefficients; `Dw` and `Gw` the solvent
    concentration and pressure coefficients. The derived osmotic
    permeabilities are kappa = sigma*Gw/thickness and
    delta = sigma*Dw/thickness."""

    sigma: float = 1.0
    thickness: float = 1.0
    D: float = 1.0
    G: float = 0.0
    Dw: float = 1.0
    Gw: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ParameterError(f"reflection coefficient {self.sigma} not in [0,1]")
        if self.thickness <= 0.0:
            raise ParameterError(f"membrane thickness {self.thickness} must be > 0")
        for name in ("D", "Dw", "Gw", "rho"):
            if getattr(self, name) <= 0.0:
                raise ParameterError(f"coefficient {name} must be > 0")

    @property
    def kappa(self) -> float:
        return self.sigma * self.Gw / self.thickness

    @property
    def delta(self) -> float:
        return self.sigma * self.Dw / self.thickness


@dataclass(frozen=True)
class TransporterParams:
    """Rate constants for one transporter pool on side `side` in {a, s}.

    k1: binding of substrate from compartment I; k2: unbinding back to I;
    k3: release into compartment II; k4: binding from II (reverse route).
    gamma_f, gamma_b are decay rates of the free and bound pools. The
    aggregated reaction coefficients are alpha = k1*rho_I*c_I + k4*rho_II*c_II
    and beta = k2 + k3. Regulation R(t, x, theta_f) produces free
    transporters; the default drives theta_f toward `theta_star` at rate
    `r_plus` and is identically zero when r_plus = 0."""

    side: str = "a"
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    gamma_f: float = 0.0
    gamma_b: float = 0.0
    r_plus: float = 0.0
    theta_star: float = 0.0
    regulation: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.side not in ("a", "s"):
            raise ParameterError(f"side must be 'a' or 's', got {self.side!r}")
        for name in ("k1", "k2", "k3", "k4", "gamma_f", "gamma_b", "r_plus"):
            if getattr(self, name) < 0.0:
                raise ParameterError(f"rate {name} must be non-negative")

    def alpha(self, c_I, c_II, rho_I=1.0, rho_II=1.0):
        return self.k1 * rho_I * np.asarray(c_I) + self.k4 * rho_II * np.asarray(c_II)

    @property
    def beta(self) -> float:
        return self.k2 + self.k3

    def R(self, t, x, theta_f):
        if self.regulation is not None:
            return self.regulation(t, x, theta_f)
        return self.r_plus * np.maximum(0.0, self.theta_star - np.asarray(theta_f))


@dataclass(frozen=True)
class TransporterState:
    """Free and bound surface concentrations; scalars or per-point arrays."""

    theta_f: object
    theta_b: object

    def __post_init__(self):
        tf = np.asarray(self.theta_f, dtype=float)
        tb = np.asarray(self.theta_b, dtype=float)
        if tf.shape != tb.shape:
            raise StateError("theta_f and theta_b must have the same shape")
        if np.any(tf < 0.0) or np.any(tb < 0.0):
            raise StateError("transporter concentrations must be non-negative")
        object.__setattr__(self, "theta_f", tf if tf.ndim else float(tf))
        object.__setattr__(self, "theta_b", tb if tb.ndim else float(tb))

    @property
    def theta0(self):
        return self.theta_f + self.theta_b


def velocity_cutoff(xi, M):
    """Componentwise cutoff H_M: identity up to speed M, saturation beyond.
    Non-expansive and idempotent."""
    if M <= 0.0:
        raise ParameterError(f"cutoff bound M={M} must be > 0")
    return np.clip(np.asarray(xi, dtype=float), -M, M)


def kedem_fluxes(jump_c, jump_p, coeffs: MembraneCoefficients):
    """Membrane solute and mixture fluxes from concentration and pressure
    jumps: solute flux -(rho/h)(D[c] + G[p]), mixture flux
    (rho/h) sigma (Dw[c] - Gw[p])."""
    if coeffs.thickness <= 0.0:
        raise ParameterError("membrane thickness must be > 0")
    scale = coeffs.rho / coeffs.thickness
    jc = np.asarray(jump_c, dtype=float)
    jp = np.asarray(jump_p, dtype=float)
    solute = -scale * (coeffs.D * jc + coeffs.G * jp)
    mixture = scale * coeffs.sigma * (coeffs.Dw * jc - coeffs.Gw * jp)
    return solute, mixture


def membrane_water_flux(stress_nn, jump_p, jump_c, kappa, delta):
    """Normal water velocity through an osmotic membrane:
    v.n = delta*[c] - kappa*(stress_nn + [p]). A concentration excess on the
    Darcy side ([c] > 0) draws water across; a pressure excess pushes it
    back."""
    return delta * np.asarray(jump_c, dtype=float) - kappa * (
        np.asarray(stress_nn, dtype=float) + np.asarray(jump_p, dtype=float)
    )


def _check_concentrations(*cs):
    for c in cs:
        if np.any(np.asarray(c) < 0.0):
            raise DomainError("concentrations must be non-negative")


def transporter_rhs(
    state: TransporterState, c_I, c_II, rho_I, rho_II, params: TransporterParams,
    t=0.0, x=None,
):
    """Right-hand side of the free/bound transporter ODE system:
    dtheta_f = R - alpha*theta_f + beta*theta_b - gamma_f*theta_f,
    dtheta_b = alpha*theta_f - beta*theta_b - gamma_b*theta_b."""
    _check_concentrations(c_I, c_II)
    alpha = params.alpha(c_I, c_II, rho_I, rho_II)
    beta = params.beta
    exchange = alpha * state.theta_f - beta * state.theta_b
    df = params.R(t, x, state.theta_f) - exchange - params.gamma_f * state.theta_f
    db = exchange - params.gamma_b * state.theta_b
    return df, db


def step_transporters(
    state: TransporterState, c_I, c_II, rho_I, rho_II, params: TransporterParams,
    dt, t=0.0, x=None,
) -> TransporterState:
    """One backward-Euler step on the linear reaction matrix with R evaluated
    explicitly at the old state.

    The implicit matrix I + dt*(reaction + decay) is an M-matrix for
    non-negative rates, so its inverse is entrywise non-negative and the step
    preserves non-negativity for any dt. With R = 0 and no decay the two
    equations telescope on theta_f + theta_b, conserving the total exactly.
    """
    if dt <= 0.0:
        raise ParameterError(f"dt={dt} must be > 0")
    _check_concentrations(c_I, c_II)
    alpha = params.alpha(c_I, c_II, rho_I, rho_II)
    beta = params.beta
    a11 = 1.0 + dt * (alpha + params.gamma_f)
    a12 = -dt * beta
    a21 = -dt * alpha
    a22 = 1.0 + dt * (beta + params.gamma_b)
    det = a11 * a22 - a12 * a21
    rf = state.theta_f + dt * params.R(t, x, state.theta_f)
    rb = state.theta_b
    return TransporterState(
        theta_f=(a22 * rf - a12 * rb) / det,
        theta_b=(a11 * rb - a21 * rf) / det,
    )


def quasi_stationary_flux(c_I, c_II, rho_I, rho_II, theta0, k1, k2, k3, k4):
    """Net active flux and free-pool size when the transporter kinetics are
    fast relative to the flow: theta_f = beta/(beta + alpha) * theta0 with
    alpha = k1 rho_I c_I + k4 rho_II c_II, beta = k2 + k3, and
    a.n = (k1 k3 rho_I c_I - k2 k4 rho_II c_II)/beta * theta_f."""
    beta = k2 + k3
    if beta <= 0.0:
        raise ParameterError("quasi-stationary reduction requires k2 + k3 > 0")
    _check_concentrations(c_I, c_II)
    alpha = k1 * rho_I * np.asarray(c_I) + k4 * rho_II * np.asarray(c_II)
    theta_f = beta / (beta + alpha) * theta0
    flux = (k1 * k3 * rho_I * np.asarray(c_I) - k2 * k4 * rho_II * np.asarray(c_II)) / beta * theta_f
    return flux, theta_f


def michaelis_menten_efflux(c_I, rho_I, theta0, k1, k2, k3):
    """Saturating efflux: the k4 = 0 quasi-stationary reduction,
    a.n = rho_I c_I k1 k3 / (k2 + k3 + k1 rho_I c_I) * theta0. Non-decreasing
    in c_I and bounded by k3*theta0."""
    s = k1 * rho_I * np.asarray(c_I, dtype=float)
    denom = k2 + k3 + s
    if np.any(denom <= 0.0):
        raise ParameterError("Michaelis-Menten denominator must be positive")
    return s * k3 / denom * theta0


def membrane_solute_exchange(c_l, theta_f_l, theta_b_other, alpha_l, beta_other):
    """Net solute gain of compartment l through protein-mediated transport:
    release from the other side's bound pool minus binding from this side,
    beta_{l-1} theta_{b,l-1} - alpha_l c_l theta_{f,l}."""
    return (
        np.asarray(beta_other) * np.asarray(theta_b_other)
        - np.asarray(alpha_l) * np.asarray(c_l) * np.asarray(theta_f_l)
    )
