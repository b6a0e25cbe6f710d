"""Reduced-order closed-loop model and verification of the stability constraints.

A certificate is a tuple ``(N, P, alpha, betas, gamma)`` for which

* ``Theta1`` (a symmetric matrix built from the reduced model) is negative definite,
* the scalar ``Theta2`` is negative,
* the scalar ``Theta3`` is nonnegative,

which guarantees local exponential decay at rate ``delta`` in H^2 norm.  The
three variants (Dirichlet, second-derivative and two-input actuation) share
one formula here; they differ only in the per-channel tail norms and in the
constant multiplying ``1/alpha``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

from . import jsonio
from .errors import DimensionMismatch, NotHurwitz, OrderTooSmall
from .spectral import PI, PlantParams, Scheme, SpectralPlant, TailNorms, eigenvalue
from .synthesis import GainSet

log = logging.getLogger(__name__)

# coefficient of (N+1)^4 / alpha in Theta2, indexed by theorem
ALPHA_WEIGHT = {1: 1.0, 2: 1.5, 3: 2.0}


def alpha_lower_bound(theorem: int) -> float:
    return ALPHA_WEIGHT[theorem] / PI**4


@dataclass(frozen=True)
class ReducedModel:
    """State ``X = col(zhat_1..N0, e_1..N0, ztilde_{N0+1..N}, etilde_{N0+1..N})``.

    Modes above N0 are carried in scaled form ``ztilde_n = zhat_n / n^4`` and
    ``etilde_n = n^2 e_n`` so that the off-diagonal blocks stay bounded as N
    grows.
    """

    N: int
    N0: int
    lam: float
    theorem: int
    F: np.ndarray
    G: np.ndarray
    Lcal: np.ndarray
    E: np.ndarray
    Ktilde: np.ndarray
    A1: np.ndarray
    B1: np.ndarray  # scaled input rows beta_n / n^4
    C1: np.ndarray  # scaled output columns c_n / n^2

    @property
    def n_inputs(self):
        return self.Ktilde.shape[0]

    @property
    def n_outputs(self):
        return self.Lcal.shape[1]


def assemble_reduced_model(plant: SpectralPlant, gains: GainSet, N: int) -> ReducedModel:
    N0 = plant.n0
    if N <= N0:
        raise OrderTooSmall(f"observer order N={N} must exceed N0={N0}")
    A0, B0, C0 = plant.unstable_block
    K, L = gains.K, gains.L
    m, p = plant.n_inputs, plant.n_outputs
    if K.shape != (m, N0) or L.shape != (N0, p):
        raise DimensionMismatch(f"gains {K.shape}, {L.shape} incompatible with N0={N0}")

    n = np.arange(N0 + 1, N + 1)
    A1 = np.diag(plant.sigma(n))
    B1 = plant.beta(n) / (n**4)[:, None]
    C1 = plant.c(n).T / (n**2)[None, :]
    k = N - N0
    Z = np.zeros

    F = np.block([
        [A0 + B0 @ K, L @ C0, Z((N0, k)), L @ C1],
        [Z((N0, N0)), A0 - L @ C0, Z((N0, k)), -L @ C1],
        [B1 @ K, Z((k, N0)), A1, Z((k, k))],
        [Z((k, N0)), Z((k, N0)), Z((k, k)), A1],
    ])
    G = np.block([
        [Z((N0, N0)), Z((N0, k))],
        [np.eye(N0), Z((N0, k))],
        [Z((k, N0)), Z((k, k))],
        [Z((k, N0)), np.eye(k)],
    ])
    Lcal = np.vstack([L, -L, Z((2 * k, p))])
    Ktilde = np.hstack([K, Z((m, 2 * N - N0))])
    E = K @ np.hstack([A0 + B0 @ K, L @ C0, Z((N0, k)), L @ C1, L])
    return ReducedModel(N, N0, plant.params.lam, plant.params.scheme.theorem,
                        F, G, Lcal, E, Ktilde, A1, B1, C1)


def lyapunov_candidate(F, delta):
    """Unique P > 0 solving ``F^T P + P F + 2 delta P = -I``."""
    F = np.asarray(F, dtype=float)
    worst = np.max(np.linalg.eigvals(F).real)
    if worst >= -delta:
        raise NotHurwitz(f"F + delta I is not Hurwitz (max Re eig(F) = {worst:.6g})")
    Fd = F + delta * np.eye(F.shape[0])
    # scipy solves A X + X A^H = Q (Bartels-Stewart)
    P = sla.solve_continuous_lyapunov(Fd.T, -np.eye(F.shape[0]))
    return 0.5 * (P + P.T)


class Margins(NamedTuple):
    theta1_max: float
    theta2: float
    theta3: float

    def feasible(self, eps1=1e-9, eps2=1e-9) -> bool:
        return self.theta1_max < -eps1 and self.theta2 < -eps2 and self.theta3 >= 0


def theta1(model: ReducedModel, tails: TailNorms, P, alpha, betas, gamma, delta):
    """Assemble the symmetric matrix Theta1 (size 2N + outputs)."""
    P = np.asarray(P, dtype=float)
    betas = np.atleast_1d(np.asarray(betas, dtype=float))
    n2, p, m = 2 * model.N, model.n_outputs, model.n_inputs
    if P.shape != (n2, n2):
        raise DimensionMismatch(f"P has shape {P.shape}, expected {(n2, n2)}")
    if betas.shape != (p,):
        raise DimensionMismatch(f"expected {p} beta scalars, got {betas.size}")
    if tails.r_b.shape != (m,) or tails.N != model.N:
        raise DimensionMismatch("tail norms do not match the reduced model")
    F, Lc, Kt, E = model.F, model.Lcal, model.Ktilde, model.E
    top = F.T @ P + P @ F + 2.0 * delta * P
    for i in range(m):
        if tails.r_a[i]:
            top = top + alpha * gamma * tails.r_a[i] * np.outer(Kt[i], Kt[i])
    PL = P @ Lc
    T = np.block([[top, PL], [PL.T, -np.diag(betas)]])
    for i in range(m):
        T = T + alpha * gamma * tails.r_b[i] * np.outer(E[i], E[i])
    return 0.5 * (T + T.T)


def theta2(theorem, N, lam, tails, alpha, betas, gamma, delta):
    sigma_next = eigenvalue(N + 1, lam)
    w = ALPHA_WEIGHT[theorem]
    return 2.0 * gamma * (sigma_next + delta + w * (N + 1) ** 4 / alpha) + float(np.sum(betas)) * tails.m_phi


def theta3(theorem, N, lam, alpha):
    return (N + 1) ** 2 * (PI**4 - ALPHA_WEIGHT[theorem] / alpha) - lam * PI**2


def evaluate_constraints(theorem, model, tails, P, alpha, betas, gamma, delta) -> Margins:
    if theorem != model.theorem:
        raise DimensionMismatch(f"model was assembled for theorem {model.theorem}, not {theorem}")
    if not alpha > alpha_lower_bound(theorem):
        raise ValueError(f"alpha={alpha} must exceed {alpha_lower_bound(theorem):.6g}")
    if gamma <= 0 or np.any(np.asarray(betas) <= 0):
        raise ValueError("betas and gamma must be positive")
    T1 = theta1(model, tails, P, alpha, betas, gamma, delta)
    return Margins(
        float(np.linalg.eigvalsh(T1)[-1]),
        float(theta2(theorem, model.N, model.lam, tails, alpha, betas, gamma, delta)),
        float(theta3(theorem, model.N, model.lam, alpha)),
    )


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    alpha_points: int = 32
    alpha_max: float = 1e4
    scale_exponents: tuple[int, ...] = tuple(range(-4, 9))
    eps1: float = 1e-9
    eps2: float = 1e-9
    use_sdp: bool = True
    sdp_solver: str = "CLARABEL"


@dataclass
class Certificate:
    theorem: int
    N: int
    P: np.ndarray
    alpha: float
    betas: np.ndarray
    gamma: float
    margins: Margins
    delta: float
    params: PlantParams | None = None
    gains: GainSet | None = None
    backend: str = "lyapunov"

    def to_dict(self):
        p = self.params
        return {
            "theorem": self.theorem,
            "N": self.N,
            "delta": self.delta,
            "alpha": self.alpha,
            "betas": [float(b) for b in self.betas],
            "gamma": self.gamma,
            "P": [float(v) for v in np.asarray(self.P).ravel()],
            "margins": {
                "theta1_max_eig": self.margins.theta1_max,
                "theta2": self.margins.theta2,
                "theta3": self.margins.theta3,
            },
            "K": np.asarray(self.gains.K).tolist() if self.gains else None,
            "L": np.asarray(self.gains.L).tolist() if self.gains else None,
            "plant": None if p is None else {
                "lambda": p.lam, "mu": p.mu, "scheme": p.scheme.value, "xi": p.xi,
            },
            "backend": self.backend,
        }


@dataclass
class InfeasibleReport:
    N: int
    theorem: int
    best_margins: Margins | None
    best_alpha: float | None
    reason: str = "no parameter set on the search grid satisfied the constraints"

    def __bool__(self):
        return False


def _schur_betas(model, tails, P, alpha, gamma, delta):
    """Smallest diagonal betas (up to a Gershgorin margin) making Theta1 < 0, or None."""
    n2 = 2 * model.N
    zero = np.ones(model.n_outputs)  # placeholder, the beta block is subtracted below
    T = theta1(model, tails, P, alpha, zero, gamma, delta)
    T[n2:, n2:] += np.eye(model.n_outputs)
    Q, V, W = T[:n2, :n2], T[:n2, n2:], T[n2:, n2:]
    try:
        c = sla.cho_factor(-Q)
    except np.linalg.LinAlgError:
        return None
    S = W + V.T @ sla.cho_solve(c, V)
    off = np.sum(np.abs(S), axis=1) - np.abs(np.diag(S))
    need = np.diag(S) + off
    return np.maximum(need, 0.0) + 1e-9 * max(1.0, float(np.max(np.abs(need))))


def _lyapunov_stage(model, tails, plant, alpha, P0, cfg):
    N, th = model.N, model.theorem
    gamma = 1.0 / N
    best = None
    for k in cfg.scale_exponents:
        P = (10.0**k) * P0
        bmin = _schur_betas(model, tails, P, alpha, gamma, plant.delta)
        if bmin is None:
            continue
        # Theta2 < 0 caps sum(betas)
        budget = -2.0 * gamma * (eigenvalue(N + 1, model.lam) + plant.delta
                                 + ALPHA_WEIGHT[th] * (N + 1) ** 4 / alpha) / tails.m_phi
        total = float(np.sum(bmin))
        if budget > total > 0:
            betas = bmin * math.sqrt(budget / total)
        else:
            betas = np.maximum(bmin, math.sqrt(N))
        mg = evaluate_constraints(th, model, tails, P, alpha, betas, gamma, plant.delta)
        if best is None or _merit(mg) < _merit(best[0]):
            best = (mg, P, betas, gamma)
        if mg.feasible(cfg.eps1, cfg.eps2):
            return best
    return best


def _merit(m: Margins):
    return max(m.theta1_max, m.theta2, -m.theta3 if m.theta3 < 0 else -math.inf)


def _sdp_stage(model, tails, plant, alpha, cfg):
    """Solve the LMI in (P, betas) for fixed alpha and gamma = 1/N.

    P is parametrized as ``T^{-1} Phat T^{-1}`` with ``T = diag(sqrt(1+|F_ii|))``
    so that the solver sees O(1) unknowns even when the fast modes of F reach
    1e7.
    """
    try:
        import cvxpy as cp
    except ImportError:  # pragma: no cover
        log.warning("cvxpy unavailable; skipping the SDP stage")
        return None
    N, th = model.N, model.theorem
    n2, p, m = 2 * N, model.n_outputs, model.n_inputs
    gamma = 1.0 / N
    delta = plant.delta
    tinv = 1.0 / np.sqrt(1.0 + np.abs(np.diag(model.F)))
    Tinv = np.diag(tinv)

    Phat = cp.Variable((n2, n2), symmetric=True)
    b = cp.Variable(p)
    t = cp.Variable()
    P = Tinv @ Phat @ Tinv
    top = model.F.T @ P + P @ model.F + 2.0 * delta * P
    for i in range(m):
        if tails.r_a[i]:
            top = top + alpha * gamma * tails.r_a[i] * np.outer(model.Ktilde[i], model.Ktilde[i])
    PL = P @ model.Lcal
    T1 = cp.bmat([[top, PL], [PL.T, -cp.diag(b)]])
    for i in range(m):
        T1 = T1 + alpha * gamma * tails.r_b[i] * np.outer(model.E[i], model.E[i])
    T1 = 0.5 * (T1 + T1.T)
    th2 = 2.0 * gamma * (eigenvalue(N + 1, model.lam) + delta
                         + ALPHA_WEIGHT[th] * (N + 1) ** 4 / alpha) + cp.sum(b) * tails.m_phi
    cons = [Phat >> 1e-6 * np.eye(n2), b >= 1e-9, T1 << t * np.eye(n2 + p), th2 <= t]
    prob = cp.Problem(cp.Minimize(t), cons)
    try:
        prob.solve(solver=cfg.sdp_solver)
    except cp.error.SolverError as exc:
        log.debug("SDP solve failed at alpha=%g: %s", alpha, exc)
        return None
    if Phat.value is None or b.value is None:
        return None
    Pv = Tinv @ Phat.value @ Tinv
    Pv = 0.5 * (Pv + Pv.T)
    betas = np.maximum(np.asarray(b.value, dtype=float), 1e-12)
    mg = evaluate_constraints(th, model, tails, Pv, alpha, betas, gamma, delta)
    return mg, Pv, betas, gamma


def alpha_grid(theorem, cfg: SearchConfig):
    lo = alpha_lower_bound(theorem)
    return lo * np.geomspace(1.0, cfg.alpha_max / lo, cfg.alpha_points + 1)[1:]


def certify(plant: SpectralPlant, gains: GainSet, N: int, search: SearchConfig | None = None):
    """Search for a certificate at observer order N.

    Returns a :class:`Certificate` or an :class:`InfeasibleReport`.  The cheap
    Lyapunov-candidate construction is tried on the whole alpha grid first; the
    SDP stage runs only if it fails.
    """
    cfg = search or SearchConfig()
    model = assemble_reduced_model(plant, gains, N)
    tails = plant.tails(N)
    th = model.theorem
    P0 = lyapunov_candidate(model.F, plant.delta)
    grid = [a for a in alpha_grid(th, cfg) if theta3(th, N, model.lam, a) >= 0]
    if not grid:
        return InfeasibleReport(N, th, None, None, "Theta3 < 0 for every alpha on the grid")

    best = None
    stages = [("lyapunov", lambda a: _lyapunov_stage(model, tails, plant, a, P0, cfg))]
    if cfg.use_sdp:
        stages.append(("sdp", lambda a: _sdp_stage(model, tails, plant, a, cfg)))
    for name, stage in stages:
        for alpha in grid:
            res = stage(alpha)
            if res is None:
                continue
            mg, P, betas, gamma = res
            if best is None or _merit(mg) < _merit(best[0]):
                best = (mg, alpha)
            if mg.feasible(cfg.eps1, cfg.eps2):
                log.info("certified N=%d with %s backend at alpha=%.4g", N, name, alpha)
                return Certificate(th, N, P, float(alpha), betas, gamma, mg, plant.delta,
                                   plant.params, gains, name)
    return InfeasibleReport(N, th, best[0] if best else None, best[1] if best else None)


@dataclass(frozen=True)
class NotFoundBelow:
    N_max: int

    def __bool__(self):
        return False


def min_feasible_N(plant, gains, N_max, search=None):
    """Smallest N in [N0+1, N_max] that certifies; returns ``(N, certificate)``."""
    if N_max < plant.n0 + 1:
        raise OrderTooSmall(f"N_max={N_max} must be at least N0+1={plant.n0 + 1}")
    for N in range(plant.n0 + 1, N_max + 1):
        res = certify(plant, gains, N, search)
        if isinstance(res, Certificate):
            return N, res
    return NotFoundBelow(N_max), None


# ---------------------------------------------------------------------------
# verification and serialization
# ---------------------------------------------------------------------------


def verify_certificate(cert: Certificate, plant: SpectralPlant, gains: GainSet,
                       eps1=1e-9, eps2=1e-9) -> Margins:
    """Recompute every margin from scratch and raise if any constraint fails."""
    model = assemble_reduced_model(plant, gains, cert.N)
    tails = plant.tails(cert.N)
    P = np.asarray(cert.P, dtype=float)
    if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(P)))):
        raise ValueError("P is not symmetric")
    if np.linalg.eigvalsh(0.5 * (P + P.T))[0] <= 0:
        raise ValueError("P is not positive definite")
    mg = evaluate_constraints(cert.theorem, model, tails, P, cert.alpha, cert.betas,
                              cert.gamma, plant.delta)
    if not mg.feasible(eps1, eps2):
        raise ValueError(f"certificate does not verify: {mg}")
    return mg


def certificate_to_json(cert: Certificate) -> str:
    return jsonio.dumps(cert.to_dict())


def certificate_from_json(text: str):
    """Load a certificate and re-verify it; returns ``(cert, plant, gains)``."""
    from .synthesis import gains_from_arrays

    d = json.loads(text)
    pl = d["plant"]
    params = PlantParams(pl["lambda"], pl["mu"], Scheme(pl["scheme"]), pl["xi"])
    plant = SpectralPlant(params, d["delta"])
    gains = gains_from_arrays(plant, d["K"], d["L"])
    n2 = 2 * d["N"]
    cert = Certificate(
        theorem=d["theorem"], N=d["N"], P=np.array(d["P"]).reshape(n2, n2),
        alpha=d["alpha"], betas=np.array(d["betas"]), gamma=d["gamma"],
        margins=Margins(**{"theta1_max": d["margins"]["theta1_max_eig"],
                           "theta2": d["margins"]["theta2"],
                           "theta3": d["margins"]["theta3"]}),
        delta=d["delta"], params=params, gains=gains, backend=d.get("backend", "lyapunov"),
    )
    cert.margins = verify_certificate(cert, plant, gains)
    return cert, plant, gains
