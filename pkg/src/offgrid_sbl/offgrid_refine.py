"""Off-grid refinement and the block majorization-minimization estimators.

Each outer iteration refreshes the hyperparameters one block at a time and
recomputes the posterior after every block::

    alpha -> posterior -> gamma -> posterior -> beta -> posterior [-> phi -> posterior]

The ``beta`` (and elevation ``phi``) block takes a single ascent step on the
surrogate ``U = -alpha ||y - Phi mu||^2 - alpha tr(Phi Sigma Phi^H)``, which
lower-bounds the log-evidence up to a constant.  A projected Armijo step on
``U`` therefore never decreases the evidence; the fixed sign step does not
carry that guarantee but is cheaper.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ._ops import mm
from .sbl_core import (
    GAMMA_MAX,
    Hyperpriors,
    NumericalError,
    OffGridDictionary,
    SblState,
    compute_posterior,
    extract_channel,
    initial_state,
    log_evidence,
    residual_energy,
    update_alpha,
    update_gamma,
)

__all__ = [
    "RefineConfig",
    "TraceRow",
    "Estimate",
    "surrogate_objective",
    "beta_gradient",
    "phi_gradient",
    "beta_step_fixed",
    "beta_step_linesearch",
    "phi_step",
    "estimate_offgrid_linear",
    "estimate_offgrid_2d",
    "write_trace",
]

_STEP_MODES = ("fixed", "line_search")
_PHI_INITS = ("random", "equispaced", "zero")


@dataclass(frozen=True)
class RefineConfig:
    """Iteration and step-size settings shared by the off-grid estimators.

    Attributes
    ----------
    step_mode : {"fixed", "line_search"}
        ``fixed`` moves each offset by ``r_theta / 100`` in the gradient sign
        direction; ``line_search`` takes a projected Armijo step.
    rho : float
        Decay of the elevation step, in (0, 1).
    max_iters : int
        Hard cap on outer iterations.
    evidence_tol : float
        Stop once the relative change of the log-evidence drops below this.
    beta_clip : float
        Bound on each offset as a fraction of the gap to the neighbouring
        grid point; ``0.5`` keeps every angle inside its own cell.
    """

    step_mode: str = "fixed"
    rho: float = 0.95
    max_iters: int = 200
    evidence_tol: float = 1e-6
    beta_clip: float = 0.5
    ls_shrink: float = 0.5
    ls_c: float = 1e-4
    ls_min_step: float = 1e-12
    support_threshold: float = 1e-3
    refine_beta: bool = True
    refine_phi: bool = True
    phi_init: str = "random"

    def __post_init__(self):
        if self.step_mode not in _STEP_MODES:
            raise ValueError(f"step_mode must be one of {_STEP_MODES}, got {self.step_mode!r}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.evidence_tol < 0:
            raise ValueError("evidence_tol must be non-negative")
        if not self.beta_clip > 0:
            raise ValueError("beta_clip must be positive")
        if not 0.0 < self.ls_shrink < 1.0:
            raise ValueError("ls_shrink must lie in (0, 1)")
        if not 0.0 < self.ls_c < 1.0:
            raise ValueError("ls_c must lie in (0, 1)")
        if self.phi_init not in _PHI_INITS:
            raise ValueError(f"phi_init must be one of {_PHI_INITS}, got {self.phi_init!r}")
        if not 0.0 < self.support_threshold <= 1.0:
            raise ValueError("support_threshold must lie in (0, 1]")


class TraceRow(NamedTuple):
    iteration: int
    evidence: float
    max_beta_step: float
    n_active: int


class Estimate(NamedTuple):
    h: np.ndarray
    support: np.ndarray
    state: SblState
    trace: list


def write_trace(trace: Sequence[TraceRow], path: str | os.PathLike) -> None:
    """Write trace rows as CSV with a header line."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TraceRow._fields)
        for row in trace:
            w.writerow([row.iteration, repr(float(row.evidence)), repr(float(row.max_beta_step)),
                        row.n_active])


def surrogate_objective(y: np.ndarray, Phi: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                        alpha: float) -> float:
    """``-alpha (||y - Phi mu||^2 + tr(Phi Sigma Phi^H))`` with ``mu, Sigma`` held fixed."""
    return -alpha * residual_energy(y, Phi, mu, sigma)


def _check_current(state: SblState, L: int) -> None:
    if state.mu.shape != (L,) or state.sigma.shape != (L, L) or state.beta.shape != (L,):
        raise ValueError(
            f"stale posterior: state has {state.mu.shape[0]} components, dictionary has {L}")


def _column_gradient(y, Phi, dPhi, mu, sigma, alpha) -> np.ndarray:
    """Per-column derivative of the surrogate given ``dPhi[:, l] = d Phi[:, l] / d x_l``."""
    r = y - Phi @ mu
    G = r[:, None] * mu.conj()[None, :] - mm(Phi, sigma)
    return 2.0 * alpha * np.sum(dPhi.conj() * G, axis=0).real


def beta_gradient(state: SblState, y: np.ndarray, X, dictionary: OffGridDictionary,
                  matrices: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Derivative of the surrogate with respect to each azimuth offset.

    ``matrices`` may carry ``(A, Phi)`` already assembled at the state's
    angles to save rebuilding them.
    """
    X = np.asarray(X)
    _check_current(state, dictionary.n_grid)
    A, Phi = matrices if matrices is not None else dictionary.assemble(X, state.beta, state.phi_hat)
    dPhi = mm(X, dictionary.deriv_theta(state.beta, state.phi_hat, steering=A))
    return _column_gradient(y, Phi, dPhi, state.mu, state.sigma, state.alpha)


def phi_gradient(state: SblState, y: np.ndarray, X, dictionary: OffGridDictionary,
                 matrices: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Derivative of the surrogate with respect to each elevation estimate."""
    if state.phi_hat is None:
        raise ValueError("phi_gradient needs a state with elevation estimates")
    X = np.asarray(X)
    _check_current(state, dictionary.n_grid)
    _, Phi = matrices if matrices is not None else dictionary.assemble(X, state.beta, state.phi_hat)
    dPhi = mm(X, dictionary.deriv_phi(state.beta, state.phi_hat))
    return _column_gradient(y, Phi, dPhi, state.mu, state.sigma, state.alpha)


def _frozen(state: SblState) -> np.ndarray:
    return state.gamma >= GAMMA_MAX


def _limits(r_theta: float, cfg: RefineConfig, limits):
    if limits is None:
        lim = cfg.beta_clip * r_theta
        return -lim, lim
    return limits


def beta_step_fixed(state: SblState, zeta: np.ndarray, r_theta: float,
                    cfg: RefineConfig | None = None, limits=None) -> np.ndarray:
    """Move every offset by ``r_theta / 100`` toward increasing surrogate.

    Offsets are clipped to ``limits = (lo, hi)`` when given (see
    :meth:`OffGridDictionary.offset_limits`), else to ``+-beta_clip * r_theta``.
    """
    cfg = cfg or RefineConfig()
    step = (r_theta / 100.0) * np.sign(zeta)
    step[_frozen(state)] = 0.0
    lo, hi = _limits(r_theta, cfg, limits)
    return np.clip(state.beta + step, lo, hi)


class LineSearchResult(NamedTuple):
    x: np.ndarray
    step: float
    stalled: bool


def _projected_armijo(objective: Callable[[np.ndarray], float], x: np.ndarray, grad: np.ndarray,
                      delta0: float, lo, hi, cfg: RefineConfig) -> LineSearchResult:
    if not np.any(grad):
        return LineSearchResult(x.copy(), 0.0, False)
    f0 = objective(x)
    gmax = float(np.max(np.abs(grad)))
    delta = delta0
    while delta * gmax >= cfg.ls_min_step:
        cand = np.clip(x + delta * grad, lo, hi)
        move = cand - x
        if np.any(move) and objective(cand) >= f0 + cfg.ls_c * float(grad @ move):
            return LineSearchResult(cand, delta, False)
        delta *= cfg.ls_shrink
    return LineSearchResult(x.copy(), 0.0, True)


def beta_step_linesearch(state: SblState, zeta: np.ndarray,
                         objective: Callable[[np.ndarray], float], r_theta: float,
                         cfg: RefineConfig | None = None, limits=None) -> LineSearchResult:
    """Projected backtracking ascent on ``objective`` starting from ``r_theta / max|zeta|``.

    Accepts the first step with ``U(beta') >= U(beta) + c zeta . (beta' - beta)``;
    when the trial step length falls below ``cfg.ls_min_step`` the offsets are
    returned unchanged with ``stalled=True``.
    """
    cfg = cfg or RefineConfig()
    g = np.where(_frozen(state), 0.0, zeta)
    lo, hi = _limits(r_theta, cfg, limits)
    gmax = float(np.max(np.abs(g))) if g.size else 0.0
    delta0 = r_theta / gmax if gmax > 0 else 0.0
    return _projected_armijo(objective, state.beta, g, delta0, lo, hi, cfg)


def phi_step_size(iteration: int, rho: float) -> float:
    return (math.pi / 36.0) * max(rho ** iteration, 1e-3)


def phi_step(state: SblState, zeta_phi: np.ndarray, iteration: int,
             cfg: RefineConfig | None = None) -> np.ndarray:
    """Decaying sign step on the elevations, clamped to ``[0, pi/2]``."""
    cfg = cfg or RefineConfig()
    if state.phi_hat is None:
        raise ValueError("phi_step needs a state with elevation estimates")
    step = phi_step_size(iteration, cfg.rho) * np.sign(zeta_phi)
    step[_frozen(state)] = 0.0
    return np.clip(state.phi_hat + step, 0.0, math.pi / 2)


def _n_active(mu: np.ndarray, threshold: float) -> int:
    p = np.abs(mu) ** 2
    pmax = p.max() if p.size else 0.0
    return int(np.sum(p >= threshold * pmax)) if pmax > 0 else 0


def _initial_phi(n: int, cfg: RefineConfig, seed) -> np.ndarray:
    if cfg.phi_init == "zero":
        return np.zeros(n)
    if cfg.phi_init == "equispaced":
        return (np.arange(n) + 0.5) * (math.pi / 2) / n
    return np.random.default_rng(seed).uniform(0.0, math.pi / 2, size=n)


def _run(y, X, dictionary: OffGridDictionary, priors: Hyperpriors, cfg: RefineConfig,
         phi0: np.ndarray | None, refine_phi: bool) -> Estimate:
    X = np.asarray(X)
    y = np.asarray(y)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"pilot matrix has {X.shape[0]} rows but y has {y.shape[0]} entries")
    L = dictionary.n_grid
    r = dictionary.r_theta
    limits = dictionary.offset_limits(cfg.beta_clip)
    state = initial_state(L, phi0)
    A, Phi = dictionary.assemble(X, state.beta, state.phi_hat)

    def refresh(st: SblState, Phi_: np.ndarray) -> SblState:
        return st.with_posterior(compute_posterior(y, Phi_, st.alpha, st.gamma))

    def surrogate_in(st: SblState, which: str):
        def f(v):
            kw = {"beta": v, "phi_hat": st.phi_hat} if which == "beta" else {"beta": st.beta, "phi_hat": v}
            _, P = dictionary.assemble(X, **kw)
            return surrogate_objective(y, P, st.mu, st.sigma, st.alpha)
        return f

    trace: list[TraceRow] = []
    prev = None
    it = 0
    try:
        state = refresh(state, Phi)
        for it in range(cfg.max_iters):
            state = replace(state, alpha=update_alpha(state, y, Phi, priors))
            state = refresh(state, Phi)
            state = replace(state, gamma=update_gamma(state, priors))
            state = refresh(state, Phi)

            beta_move = 0.0
            if cfg.refine_beta:
                zeta = beta_gradient(state, y, X, dictionary, (A, Phi))
                if cfg.step_mode == "fixed":
                    beta = beta_step_fixed(state, zeta, r, cfg, limits)
                else:
                    beta = beta_step_linesearch(state, zeta, surrogate_in(state, "beta"), r, cfg,
                                                limits).x
                beta_move = float(np.max(np.abs(beta - state.beta))) if L else 0.0
                state = replace(state, beta=beta)
                A, Phi = dictionary.assemble(X, state.beta, state.phi_hat)
                state = refresh(state, Phi)

            if refine_phi:
                zphi = phi_gradient(state, y, X, dictionary, (A, Phi))
                if cfg.step_mode == "fixed":
                    phi = phi_step(state, zphi, it, cfg)
                else:
                    g = np.where(_frozen(state), 0.0, zphi)
                    gmax = float(np.max(np.abs(g)))
                    d0 = phi_step_size(it, cfg.rho) / gmax if gmax > 0 else 0.0
                    phi = _projected_armijo(surrogate_in(state, "phi"), state.phi_hat, g, d0,
                                            0.0, math.pi / 2, cfg).x
                state = replace(state, phi_hat=phi)
                A, Phi = dictionary.assemble(X, state.beta, state.phi_hat)
                state = refresh(state, Phi)

            state = replace(state, iteration=it + 1)
            ev = log_evidence(y, Phi, state.alpha, state.gamma, priors)
            trace.append(TraceRow(it + 1, ev, beta_move, _n_active(state.mu, cfg.support_threshold)))
            if prev is not None and abs(ev - prev) <= cfg.evidence_tol * abs(prev):
                break
            prev = ev
    except NumericalError as exc:
        raise NumericalError(f"iteration {it + 1}: {exc}") from exc

    h, omega = extract_channel(dictionary, X, y, state, cfg.support_threshold)
    return Estimate(h=h, support=omega, state=state, trace=trace)


def estimate_offgrid_linear(y: np.ndarray, X, dictionary: OffGridDictionary,
                            priors: Hyperpriors | None = None,
                            cfg: RefineConfig | None = None) -> Estimate:
    """Off-grid SBL channel estimate for a linear array.

    Parameters
    ----------
    y : ndarray, shape (T,)
        Received pilots.
    X : array_like, shape (T, N)
        Pilot matrix.
    dictionary : OffGridDictionary
        Azimuth grid, normally covering ``[-pi/2, pi/2]``.

    Returns
    -------
    Estimate
        Channel ``h``, support indices, final state and the per-iteration trace.
    """
    return _run(y, X, dictionary, priors or Hyperpriors(), cfg or RefineConfig(),
                phi0=None, refine_phi=False)


def estimate_offgrid_2d(y: np.ndarray, X, dictionary: OffGridDictionary,
                        priors: Hyperpriors | None = None, cfg: RefineConfig | None = None,
                        seed=None) -> Estimate:
    """Off-grid SBL with joint azimuth offset and elevation refinement.

    ``seed`` drives the random elevation initialization.  Set
    ``cfg.refine_phi=False`` to keep the initial elevations fixed.
    """
    cfg = cfg or RefineConfig()
    phi0 = _initial_phi(dictionary.n_grid, cfg, seed)
    return _run(y, X, dictionary, priors or Hyperpriors(), cfg, phi0=phi0,
                refine_phi=cfg.refine_phi)
