"""Uplink-aided joint estimator sharing one sparsity profile across two views.

Downlink view: ``y = X A(beta) w + n`` with noise precision ``alpha``.
Uplink view: ``h_bar_ls = A_u(beta) w_bar + e`` with residual precision
``alpha_bar``, where ``A_u`` uses the uplink wavelength.  The weights are
independent but share the precision vector::

    w     ~ CN(0, diag(gamma)^-1)
    w_bar ~ CN(0, diag(gamma * tau)^-1)

so a component pruned in one view is pruned in both.  ``tau`` absorbs the
gain mismatch between the two bands and carries a flat prior.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from ._ops import mm
from .offgrid_refine import (
    Estimate,
    RefineConfig,
    TraceRow,
    _column_gradient,
    _projected_armijo,
    beta_step_fixed,
)
from .sbl_core import (
    GAMMA_MAX,
    Hyperpriors,
    NumericalError,
    OffGridDictionary,
    Posterior,
    SblState,
    compute_posterior,
    gamma_log_prior,
    gaussian_log_marginal,
    refit_on_support,
    residual_energy,
    second_moment_diag,
    select_support,
)

__all__ = [
    "JointState",
    "JointPosterior",
    "assemble_uplink_dictionary",
    "compute_joint_posterior",
    "update_alpha_d",
    "update_alpha_u",
    "update_gamma_joint",
    "update_tau",
    "joint_log_evidence",
    "joint_surrogate",
    "joint_beta_gradient",
    "joint_support",
    "estimate_uplink_aided",
    "TAU_MIN",
    "TAU_MAX",
]

TAU_MIN = 1e-12
TAU_MAX = 1e12


@dataclass(frozen=True, eq=False)
class JointState:
    """Hyperparameters of both views plus their two posteriors."""

    alpha: float
    alpha_bar: float
    gamma: np.ndarray
    tau: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    mu_bar: np.ndarray
    sigma_bar: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        if not (self.alpha > 0 and self.alpha_bar > 0):
            raise ValueError("noise precisions must be positive")
        if np.any(~(self.gamma > 0)) or np.any(~(self.tau > 0)):
            raise ValueError("gamma and tau must be positive element-wise")

    @classmethod
    def initial(cls, n_grid: int) -> "JointState":
        zeros = np.zeros(n_grid, dtype=complex)
        eye = np.eye(n_grid, dtype=complex)
        return cls(alpha=1.0, alpha_bar=1.0, gamma=np.ones(n_grid), tau=np.ones(n_grid),
                   beta=np.zeros(n_grid), mu=zeros, sigma=eye, mu_bar=zeros.copy(),
                   sigma_bar=eye.copy())

    @property
    def uplink_precision(self) -> np.ndarray:
        return self.gamma * self.tau

    def downlink_view(self) -> SblState:
        """The downlink half as a single-view state (for channel extraction)."""
        return SblState(alpha=self.alpha, gamma=self.gamma, beta=self.beta, mu=self.mu,
                        sigma=self.sigma, iteration=self.iteration)


class JointPosterior(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray
    mu_bar: np.ndarray
    sigma_bar: np.ndarray


def assemble_uplink_dictionary(dictionary: OffGridDictionary, beta, wl_uplink: float) -> np.ndarray:
    """Uplink steering matrix at the refined angles; no pilot mixing."""
    return dictionary.with_wavelength(wl_uplink).steering(beta)


def _matrices(y, X, dictionary, beta, wl_uplink):
    _, Phi = dictionary.assemble(X, beta)
    Phi_bar = assemble_uplink_dictionary(dictionary, beta, wl_uplink)
    return Phi, Phi_bar


def compute_joint_posterior(y, X, h_bar_ls, state: JointState, dictionary: OffGridDictionary,
                            wl_uplink: float) -> JointPosterior:
    """Both Gaussian posteriors; they factorize given the hyperparameters."""
    Phi, Phi_bar = _matrices(y, np.asarray(X), dictionary, state.beta, wl_uplink)
    down = compute_posterior(y, Phi, state.alpha, state.gamma)
    up = compute_posterior(h_bar_ls, Phi_bar, state.alpha_bar, state.uplink_precision)
    return JointPosterior(down.mu, down.sigma, up.mu, up.sigma)


def update_alpha_d(state: JointState, y, Phi, priors: Hyperpriors) -> float:
    """``(T + a) / (b + eta_d)``."""
    eta = residual_energy(y, Phi, state.mu, state.sigma)
    if eta < -1e-12:
        raise NumericalError(f"negative residual energy eta_d = {eta}")
    return (Phi.shape[0] + priors.a) / (priors.b + max(eta, 0.0))


def update_alpha_u(state: JointState, h_bar_ls, Phi_bar, priors: Hyperpriors) -> float:
    """``(N + a) / (b + eta_u)`` with the uplink residual ``||h_bar_ls - Phi_bar mu_bar||^2``."""
    eta = residual_energy(h_bar_ls, Phi_bar, state.mu_bar, state.sigma_bar)
    if eta < -1e-12:
        raise NumericalError(f"negative residual energy eta_u = {eta}")
    return (Phi_bar.shape[0] + priors.a) / (priors.b + max(eta, 0.0))


def update_gamma_joint(state: JointState, priors: Hyperpriors) -> np.ndarray:
    """``(a + 2) / (b + Xi_d[l, l] + tau_l Xi_u[l, l])``."""
    xi_d = second_moment_diag(state.mu, state.sigma)
    xi_u = second_moment_diag(state.mu_bar, state.sigma_bar)
    return np.minimum((priors.a + 2.0) / (priors.b + xi_d + state.tau * xi_u), GAMMA_MAX)


def update_tau(state: JointState) -> np.ndarray:
    """``1 / (gamma_l Xi_u[l, l])``, clamped to ``[TAU_MIN, TAU_MAX]``."""
    xi_u = second_moment_diag(state.mu_bar, state.sigma_bar)
    with np.errstate(divide="ignore"):
        tau = 1.0 / (state.gamma * xi_u)
    return np.clip(tau, TAU_MIN, TAU_MAX)


def joint_log_evidence(y, Phi, h_bar_ls, Phi_bar, state: JointState, priors: Hyperpriors) -> float:
    """Sum of both marginal log-likelihoods plus Gamma log-priors on alpha, alpha_bar, gamma."""
    return (gaussian_log_marginal(y, Phi, state.alpha, state.gamma)
            + gaussian_log_marginal(h_bar_ls, Phi_bar, state.alpha_bar, state.uplink_precision)
            + gamma_log_prior(state.alpha, priors)
            + gamma_log_prior(state.alpha_bar, priors)
            + gamma_log_prior(state.gamma, priors))


def joint_surrogate(y, X, h_bar_ls, state: JointState, dictionary: OffGridDictionary,
                    wl_uplink: float, beta=None) -> float:
    """Downlink plus uplink surrogate at ``beta`` with both posteriors held fixed."""
    beta = state.beta if beta is None else beta
    Phi, Phi_bar = _matrices(y, np.asarray(X), dictionary, beta, wl_uplink)
    return (-state.alpha * residual_energy(y, Phi, state.mu, state.sigma)
            - state.alpha_bar * residual_energy(h_bar_ls, Phi_bar, state.mu_bar, state.sigma_bar))


def joint_beta_gradient(state: JointState, y, X, h_bar_ls, dictionary: OffGridDictionary,
                        wl_uplink: float, include_uplink: bool = True,
                        matrices: tuple | None = None) -> np.ndarray:
    """Gradient of :func:`joint_surrogate` with respect to ``beta``.

    ``include_uplink=False`` drops the uplink pair, leaving the single-view
    gradient.  ``matrices`` may carry ``(A, Phi, Phi_bar)`` at the current
    angles.
    """
    X = np.asarray(X)
    L = dictionary.n_grid
    if state.mu.shape != (L,) or state.mu_bar.shape != (L,):
        raise ValueError(f"stale posterior: state has {state.mu.shape[0]} components, "
                         f"dictionary has {L}")
    if matrices is None:
        A, Phi = dictionary.assemble(X, state.beta)
        Phi_bar = assemble_uplink_dictionary(dictionary, state.beta, wl_uplink)
    else:
        A, Phi, Phi_bar = matrices
    dA = dictionary.deriv_theta(state.beta, steering=A)
    zeta = _column_gradient(y, Phi, mm(X, dA), state.mu, state.sigma, state.alpha)
    if include_uplink:
        dA_u = dictionary.with_wavelength(wl_uplink).deriv_theta(state.beta, steering=Phi_bar)
        zeta = zeta + _column_gradient(h_bar_ls, Phi_bar, dA_u, state.mu_bar, state.sigma_bar,
                                       state.alpha_bar)
    return zeta


def joint_support(state: JointState, threshold: float, uplink_threshold: float,
                  cap: int, uplink_floor: float = 0.0) -> np.ndarray:
    """Union of the strong components of the downlink and uplink posteriors.

    Each view is thresholded relative to its own strongest component; an
    uplink component must also carry at least ``uplink_floor`` power.  If
    the union exceeds ``cap``, uplink-only components are dropped weakest
    first.
    """
    down = select_support(np.abs(state.mu) ** 2, threshold, cap)
    p_up = np.abs(state.mu_bar) ** 2
    if not p_up.max() > 0:
        return down
    extra = np.flatnonzero((p_up >= uplink_threshold * p_up.max()) & (p_up >= uplink_floor))
    extra = np.setdiff1d(extra, down)
    room = max(cap - down.size, 0)
    if extra.size > room:
        extra = extra[np.argsort(p_up[extra], kind="stable")[::-1][:room]]
    return np.union1d(down, extra)


def _with_down(state: JointState, post: Posterior) -> JointState:
    return replace(state, mu=post.mu, sigma=post.sigma)


def _with_up(state: JointState, post: Posterior) -> JointState:
    return replace(state, mu_bar=post.mu, sigma_bar=post.sigma)


def estimate_uplink_aided(y: np.ndarray, X, h_bar_ls: np.ndarray, dictionary: OffGridDictionary,
                          uplink_wavelength: float, priors: Hyperpriors | None = None,
                          cfg: RefineConfig | None = None,
                          uplink_support_threshold: float = 1e-2,
                          uplink_min_snr: float = 10.0) -> Estimate:
    """Downlink channel estimate aided by an uplink LS channel estimate.

    Parameters
    ----------
    y : ndarray, shape (T,)
        Downlink received pilots.
    X : array_like, shape (T, N)
    h_bar_ls : ndarray, shape (N,)
        Least-squares uplink channel of the same user.
    dictionary : OffGridDictionary
        Downlink dictionary; its grid is shared with the uplink view.
    uplink_wavelength : float
    uplink_support_threshold : float
        Relative power above which an uplink component joins the support.
    uplink_min_snr : float
        An uplink-only component also needs ``|mu_bar_l|^2 * N`` at least
        this many times the uplink noise variance ``1 / alpha_bar``, so a
        noise-only uplink adds nothing.

    Returns
    -------
    Estimate
        Downlink channel fitted on :func:`joint_support`, the final
        :class:`JointState` and the trace.
    """
    priors = priors or Hyperpriors()
    cfg = cfg or RefineConfig()
    X = np.asarray(X)
    y = np.asarray(y)
    h_bar_ls = np.asarray(h_bar_ls).ravel()
    if h_bar_ls.shape[0] != X.shape[1]:
        raise ValueError(f"uplink estimate has {h_bar_ls.shape[0]} entries, array has {X.shape[1]}")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"pilot matrix has {X.shape[0]} rows but y has {y.shape[0]} entries")
    if not 0.0 < uplink_support_threshold <= 1.0:
        raise ValueError("uplink_support_threshold must lie in (0, 1]")
    if not uplink_min_snr >= 0:
        raise ValueError("uplink_min_snr must be non-negative")
    L = dictionary.n_grid
    r = dictionary.r_theta
    lo, hi = dictionary.offset_limits(cfg.beta_clip)
    up_dict = dictionary.with_wavelength(uplink_wavelength)

    state = JointState.initial(L)
    A, Phi = dictionary.assemble(X, state.beta)
    Phi_bar = up_dict.steering(state.beta)

    def down(st):
        return _with_down(st, compute_posterior(y, Phi, st.alpha, st.gamma))

    def up(st):
        return _with_up(st, compute_posterior(h_bar_ls, Phi_bar, st.alpha_bar, st.uplink_precision))

    trace: list[TraceRow] = []
    prev = None
    it = 0
    try:
        state = up(down(state))
        for it in range(cfg.max_iters):
            state = down(replace(state, alpha=update_alpha_d(state, y, Phi, priors)))
            state = up(replace(state, alpha_bar=update_alpha_u(state, h_bar_ls, Phi_bar, priors)))
            state = up(down(replace(state, gamma=update_gamma_joint(state, priors))))
            state = up(replace(state, tau=update_tau(state)))

            beta_move = 0.0
            if cfg.refine_beta:
                zeta = joint_beta_gradient(state, y, X, h_bar_ls, dictionary, uplink_wavelength,
                                           matrices=(A, Phi, Phi_bar))
                if cfg.step_mode == "fixed":
                    beta = beta_step_fixed(state.downlink_view(), zeta, r, cfg, (lo, hi))
                else:
                    g = np.where(state.gamma >= GAMMA_MAX, 0.0, zeta)
                    gmax = float(np.max(np.abs(g)))

                    def objective(b, st=state):
                        return joint_surrogate(y, X, h_bar_ls, st, dictionary, uplink_wavelength, b)

                    beta = _projected_armijo(objective, state.beta, g,
                                             r / gmax if gmax > 0 else 0.0, lo, hi, cfg).x
                beta_move = float(np.max(np.abs(beta - state.beta)))
                state = replace(state, beta=beta)
                A, Phi = dictionary.assemble(X, beta)
                Phi_bar = up_dict.steering(beta)
                state = up(down(state))

            state = replace(state, iteration=it + 1)
            ev = joint_log_evidence(y, Phi, h_bar_ls, Phi_bar, state, priors)
            p = np.abs(state.mu) ** 2
            n_active = int(np.sum(p >= cfg.support_threshold * p.max())) if p.max() > 0 else 0
            trace.append(TraceRow(it + 1, ev, beta_move, n_active))
            if prev is not None and abs(ev - prev) <= cfg.evidence_tol * abs(prev):
                break
            prev = ev
    except NumericalError as exc:
        raise NumericalError(f"iteration {it + 1}: {exc}") from exc

    floor = uplink_min_snr / (state.alpha_bar * X.shape[1])
    omega = joint_support(state, cfg.support_threshold, uplink_support_threshold,
                          cap=X.shape[0], uplink_floor=floor)
    h = refit_on_support(dictionary.steering_at(omega, state.beta), X, y)
    return Estimate(h=h, support=omega, state=state, trace=trace)
