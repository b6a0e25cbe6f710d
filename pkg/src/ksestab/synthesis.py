"""Resonance classification, scheme selection and eigenvalue assignment.

The unstable block ``A0 = diag(sigma_1..sigma_N0)`` loses controllability when
some ``sigma_n`` vanishes (lambda in Lambda_1) or two eigenvalues coincide
(lambda in Lambda_2).  This module detects those cases, picks an actuation
scheme that restores the Kalman conditions, and places the poles of
``A0 + B0 K`` and ``A0 - L C0``.
"""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import IllConditionedPlacement, NotControllable
from .spectral import PI, PlantParams, Scheme, SpectralPlant

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9
NEAR_RESONANCE_FACTOR = 100.0
DEFAULT_XI_GRID = 4096


class NearResonanceWarning(UserWarning):
    """lambda is close to (but not on) a resonance set."""


class LambdaKind(str, enum.Enum):
    GENERIC = "generic"
    LAMBDA1_ONLY = "lambda1"
    LAMBDA2 = "lambda2"


@dataclass(frozen=True)
class LambdaClass:
    lam: float
    kind: LambdaKind
    dirichlet_zero_index: int | None = None
    resonant_pairs: tuple[tuple[int, int], ...] = ()
    tolerance: float = DEFAULT_TOL
    # resonances missed by ``tolerance`` but within NEAR_RESONANCE_FACTOR * tolerance
    near_zero_index: int | None = field(default=None, compare=False)
    near_pairs: tuple[tuple[int, int], ...] = field(default=(), compare=False)


def _close(lam, candidate, tol):
    return abs(lam - candidate) <= tol * max(1.0, lam)


def classify_lambda(lam: float, tol: float = DEFAULT_TOL) -> LambdaClass:
    """Decide membership of lambda in Lambda_1 = {n^2 pi^2} and Lambda_2 = {(n^2+m^2) pi^2, n<m}."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    near_tol = NEAR_RESONANCE_FACTOR * tol
    s_max = lam / PI**2 + 1.0
    zero_index = near_zero = None
    pairs = []
    near_pairs = []
    n = 1
    while n * n <= s_max:
        cand = n * n * PI**2
        if _close(lam, cand, tol):
            zero_index = n
        elif _close(lam, cand, near_tol):
            near_zero = n
        m = n + 1
        while n * n + m * m <= s_max:
            cand = (n * n + m * m) * PI**2
            if _close(lam, cand, tol):
                pairs.append((n, m))
            elif _close(lam, cand, near_tol):
                near_pairs.append((n, m))
            m += 1
        n += 1
    if near_zero is not None or near_pairs:
        warnings.warn(
            f"lambda={lam!r} is within {near_tol:g} (relative) of a resonance "
            f"(n0={near_zero}, pairs={near_pairs}); placement will be poorly conditioned",
            NearResonanceWarning,
            stacklevel=2,
        )
    if pairs:
        kind = LambdaKind.LAMBDA2
    elif zero_index is not None:
        kind = LambdaKind.LAMBDA1_ONLY
    else:
        kind = LambdaKind.GENERIC
    return LambdaClass(lam, kind, zero_index, tuple(pairs), tol, near_zero, tuple(near_pairs))


def select_scheme(cls: LambdaClass) -> Scheme:
    """Scheme that keeps the unstable block controllable and observable.

    Near misses are treated like the resonance they almost hit, since the
    Kalman matrices are then numerically singular.
    """
    if cls.kind is LambdaKind.GENERIC:
        if cls.near_pairs:
            return Scheme.MIMO
        if cls.near_zero_index is not None:
            return Scheme.SECOND_DERIV
    if cls.kind is LambdaKind.LAMBDA1_ONLY and cls.near_pairs:
        return Scheme.MIMO
    return {
        LambdaKind.GENERIC: Scheme.DIRICHLET,
        LambdaKind.LAMBDA1_ONLY: Scheme.SECOND_DERIV,
        LambdaKind.LAMBDA2: Scheme.MIMO,
    }[cls.kind]


def xi_margin(pairs, xi) -> float:
    """min over resonant pairs of |(-1)^n cos(m pi xi) - (-1)^m cos(n pi xi)|."""
    if not pairs:
        return math.inf
    xi = np.asarray(xi, dtype=float)
    gaps = [
        np.abs((-1) ** n * np.cos(m * PI * xi) - (-1) ** m * np.cos(n * PI * xi))
        for n, m in pairs
    ]
    out = np.min(gaps, axis=0)
    return float(out) if out.ndim == 0 else out


def select_xi(cls: LambdaClass, grid_size: int = DEFAULT_XI_GRID) -> tuple[float, float]:
    """Grid maximin choice of the second sensor location.

    Returns ``(xi, margin)``; ties resolve to the smallest xi.  Near-resonant
    pairs are used when lambda is not exactly resonant.
    """
    pairs = cls.resonant_pairs or cls.near_pairs
    if not pairs:
        raise ValueError("sensor location selection needs lambda in (or near) Lambda_2")
    grid = np.arange(grid_size) / grid_size
    margins = xi_margin(pairs, grid)
    i = int(np.argmax(margins))
    if not margins[i] > 0:
        raise ValueError("no admissible sensor location on the grid")
    return float(grid[i]), float(margins[i])


def check_xi(cls: LambdaClass, xi: float, tol: float = 1e-12) -> float:
    margin = xi_margin(cls.resonant_pairs or cls.near_pairs, xi)
    if margin <= tol:
        raise ValueError(f"xi={xi} makes a resonant pair unobservable (margin {margin:.3g})")
    return margin


# ---------------------------------------------------------------------------
# Kalman conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KalmanReport:
    ok: bool
    rank: int
    size: int
    singular_values: np.ndarray

    def __bool__(self):
        return self.ok


def kalman_matrix(A, B):
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def check_kalman(A0, B_or_C, side="controllability", rtol=1e-9) -> KalmanReport:
    """Rank test of [B, A B, ..., A^{n-1} B] (or its observability dual).

    A0 must be diagonal.  Rows of B are normalized and A0 is scaled by its
    spectral radius first; both are rank preserving for diagonal A0 and keep
    the powers from spanning dozens of orders of magnitude.
    """
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    M = np.atleast_2d(np.asarray(B_or_C, dtype=float))
    if side in ("observability", "obs"):
        M = M.T
    elif side not in ("controllability", "ctrl"):
        raise ValueError(f"unknown side {side!r}")
    n = A0.shape[0]
    if M.shape[0] != n:
        raise ValueError("dimension mismatch between A0 and B/C")
    if np.any(A0 - np.diag(np.diag(A0))):
        raise ValueError("check_kalman expects a diagonal A0")
    d = np.diag(A0)
    scale = np.max(np.abs(d)) or 1.0
    norms = np.linalg.norm(M, axis=1)
    Mn = M / np.where(norms > 0, norms, 1.0)[:, None]
    W = kalman_matrix(np.diag(d / scale), Mn)
    sv = np.linalg.svd(W, compute_uv=False)
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size and sv[0] > 0 else 0
    return KalmanReport(rank == n, rank, n, sv)


# ---------------------------------------------------------------------------
# eigenvalue assignment
# ---------------------------------------------------------------------------


def deficient_modes(A0, B_or_C, side="controllability", rtol=1e-9) -> list[int]:
    """1-based indices of the modes of a diagonal A0 that fail the PBH test.

    For diagonal A0 the Hautus test at an eigenvalue s reduces to the rank of
    the rows of B (columns of C) belonging to the modes with sigma_n = s.
    """
    d = np.diag(np.asarray(A0, dtype=float))
    M = np.asarray(B_or_C, dtype=float)
    M = M if side == "controllability" else M.T
    if M.ndim == 1:
        M = M[:, None]
    scale = max(1.0, float(np.max(np.abs(d))))
    mscale = max(float(np.max(np.abs(M))), np.finfo(float).tiny)
    bad, seen = [], set()
    for i in range(len(d)):
        if i in seen:
            continue
        group = [j for j in range(len(d)) if abs(d[j] - d[i]) <= rtol * scale]
        seen.update(group)
        rows = M[group] / mscale
        if np.linalg.matrix_rank(rows, tol=1e3 * rtol) < len(group):
            bad.extend(j + 1 for j in group)
    return sorted(bad)


def default_targets(n0: int, delta: float) -> list[float]:
    """-delta-1, -delta-2, ..., -delta-n0."""
    return [-delta - k for k in range(1, n0 + 1)]


def _real_block(targets):
    """Real block-diagonal matrix whose spectrum is ``targets``."""
    targets = list(np.asarray(targets, dtype=complex))
    blocks = []
    while targets:
        t = targets.pop(0)
        if abs(t.imag) <= 1e-12 * max(1.0, abs(t)):
            blocks.append(np.array([[t.real]]))
            continue
        j = int(np.argmin([abs(s - np.conj(t)) for s in targets])) if targets else -1
        if j < 0 or abs(targets[j] - np.conj(t)) > 1e-9 * max(1.0, abs(t)):
            raise ValueError("complex targets must come in conjugate pairs")
        targets.pop(j)
        blocks.append(np.array([[t.real, t.imag], [-t.imag, t.real]]))
    return sla.block_diag(*blocks)


def _ackermann(A, B, targets):
    n = A.shape[0]
    scale = max(np.max(np.abs(np.diag(A))), np.max(np.abs(targets)), 1.0)
    As, Bs = A / scale, B / scale
    coeffs = np.real(np.poly(np.asarray(targets, dtype=complex) / scale))
    pA = np.zeros_like(As)
    for c in coeffs:
        pA = pA @ As + c * np.eye(n)
    W = kalman_matrix(As, Bs)
    en = np.zeros(n)
    en[-1] = 1.0
    # K = -e_n^T W^{-1} p(A)
    row = np.linalg.solve(W.T, en)
    return -(row @ pA)[None, :]


def _sylvester_gain(A, B, targets, rng, retries, cond_max):
    n, m = B.shape
    # scaling A, B and Lambda together leaves K unchanged
    scale = max(float(np.max(np.abs(A))), float(np.max(np.abs(targets))), 1.0)
    As, Bs, Lam = A / scale, B / scale, _real_block(targets) / scale
    best = None
    for _ in range(retries):
        G = rng.standard_normal((m, n))
        X = sla.solve_sylvester(As, -Lam, -Bs @ G)
        # K = G X^{-1} is invariant under X -> X D, G -> G D
        d = 1.0 / np.maximum(np.linalg.norm(X, axis=0), np.finfo(float).tiny)
        X, G = X * d, G * d
        cond = np.linalg.cond(X)
        if best is None or cond < best[0]:
            best = (cond, G, X)
        if cond <= cond_max:
            break
    cond, G, X = best
    if not np.isfinite(cond):
        raise IllConditionedPlacement("Sylvester solution is singular")
    if cond > cond_max:
        log.debug("Sylvester solution has condition number %.3g", cond)
    return np.linalg.solve(X.T, G.T).T


def _spectrum_error(M, targets):
    got = np.sort_complex(np.linalg.eigvals(M))
    want = np.sort_complex(np.asarray(targets, dtype=complex))
    return float(np.max(np.abs(got - want)))


def place_state_feedback(A0, B0, targets, seed=0, retries=20, cond_max=1e12, tol=1e-8):
    """Gain K with spectrum(A0 + B0 K) = targets.

    Single-input pairs use Ackermann's formula (on a scaled copy of the pair);
    multi-input pairs use the Sylvester parametrization
    ``A0 X - X Lambda = -B0 G, K = G X^{-1}`` with a random G drawn from
    ``seed``.  A single-input result that misses the targets by more than
    ``tol`` (relative) is recomputed with the Sylvester route.
    """
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    B0 = np.asarray(B0, dtype=float)
    if B0.ndim == 1:
        B0 = B0[:, None]
    targets = np.asarray(targets, dtype=complex)
    n, m = B0.shape
    if A0.shape != (n, n) or targets.size != n:
        raise ValueError("A0, B0 and targets have inconsistent sizes")
    if not check_kalman(A0, B0):
        raise NotControllable("(A0, B0) fails the Kalman rank condition")
    ref = max(1.0, float(np.max(np.abs(targets))))
    rng = np.random.default_rng(seed)
    if m == 1:
        K = _ackermann(A0, B0, targets)
        if _spectrum_error(A0 + B0 @ K, targets) <= tol * ref:
            return K
        log.debug("Ackermann missed the targets; retrying with the Sylvester route")
    K = _sylvester_gain(A0, B0, targets, rng, retries, cond_max)
    err = _spectrum_error(A0 + B0 @ K, targets)
    if err > 1e-6 * ref:
        raise IllConditionedPlacement(f"placed spectrum misses targets by {err:.3g}")
    return K


def place_observer(A0, C0, targets, **kwargs):
    """Gain L with spectrum(A0 - L C0) = targets (dual of state feedback)."""
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    C0 = np.atleast_2d(np.asarray(C0, dtype=float))
    try:
        K = place_state_feedback(A0.T, C0.T, targets, **kwargs)
    except NotControllable as exc:
        raise NotControllable("(A0, C0) fails the Kalman observability condition") from exc
    return -K.T


@dataclass(frozen=True)
class GainSet:
    K: np.ndarray
    L: np.ndarray
    scheme: Scheme
    target_poles_K: tuple[complex, ...] = ()
    target_poles_L: tuple[complex, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))
        L = np.asarray(self.L, dtype=float)
        object.__setattr__(self, "L", L.reshape(-1, 1) if L.ndim < 2 else L)

    @property
    def target_poles(self):
        return self.target_poles_K + self.target_poles_L


def synthesize(plant: SpectralPlant, targets_K=None, targets_L=None, seed=0) -> GainSet:
    """Place both the state-feedback and the observer poles of the unstable block."""
    A0, B0, C0 = plant.unstable_block
    if targets_K is None:
        targets_K = default_targets(plant.n0, plant.delta)
    if targets_L is None:
        targets_L = targets_K
    for t in list(targets_K) + list(targets_L):
        if not np.real(t) < -plant.delta:
            raise ValueError(f"target pole {t} does not lie left of -delta={-plant.delta}")
    for side, M, what in (("controllability", B0, "uncontrollable"), ("observability", C0, "unobservable")):
        bad = deficient_modes(A0, M, side)
        if bad:
            raise NotControllable(f"{what} mode n={', '.join(map(str, bad))} "
                                  f"for scheme {plant.params.scheme.value}")
    K = place_state_feedback(A0, B0, targets_K, seed=seed)
    L = place_observer(A0, C0, targets_L, seed=seed + 1)
    return GainSet(
        K, L, plant.params.scheme,
        tuple(complex(t) for t in targets_K),
        tuple(complex(t) for t in targets_L),
    )


def gains_from_arrays(plant: SpectralPlant, K, L) -> GainSet:
    """Wrap externally supplied gains, checking shapes and closed-loop spectra."""
    A0, B0, C0 = plant.unstable_block
    K = np.atleast_2d(np.asarray(K, dtype=float))
    L = np.asarray(L, dtype=float)
    L = L.reshape(plant.n0, -1)
    if K.shape != (plant.n_inputs, plant.n0) or L.shape != (plant.n0, plant.n_outputs):
        raise ValueError(
            f"gain shapes {K.shape}, {L.shape} do not match "
            f"({plant.n_inputs}x{plant.n0}, {plant.n0}x{plant.n_outputs})"
        )
    eK = np.linalg.eigvals(A0 + B0 @ K)
    eL = np.linalg.eigvals(A0 - L @ C0)
    worst = max(np.max(eK.real), np.max(eL.real))
    if not worst < -plant.delta:
        raise ValueError(f"supplied gains leave an eigenvalue at real part {worst:.4g} >= -delta")
    return GainSet(K, L, plant.params.scheme, tuple(eK), tuple(eL))
