"""Closed-form spectral data of the boundary-controlled Kuramoto-Sivashinsky plant.

The operator ``A f = -f'''' - lambda f''`` with hinged boundary conditions on
(0, 1) is diagonal in the basis ``phi_n(x) = sqrt(2) sin(n pi x)`` with
eigenvalues ``sigma_n = -n^4 pi^4 + lambda n^2 pi^2``.  Boundary inputs are
moved into the domain with polynomial liftings ``b_i``; everything the other
modules need (Fourier coefficients of the liftings, tail norms) is computed
exactly from those polynomials.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import Polynomial

PI = math.pi
SQRT2 = math.sqrt(2.0)


class Scheme(str, enum.Enum):
    """Actuation/sensing configuration of the plant."""

    DIRICHLET = "dirichlet"  # z(t,0) = u,     y = z_x(t,1)
    SECOND_DERIV = "secondderiv"  # z_xx(t,0) = u, y = z_x(t,1)
    MIMO = "mimo"  # z(t,0) = u1, z_xx(t,0) = u2, y = (z_x(t,1), z_x(t,xi))

    @property
    def theorem(self) -> int:
        return {Scheme.DIRICHLET: 1, Scheme.SECOND_DERIV: 2, Scheme.MIMO: 3}[self]

    @property
    def n_inputs(self) -> int:
        return 2 if self is Scheme.MIMO else 1

    @property
    def n_outputs(self) -> int:
        return 2 if self is Scheme.MIMO else 1


# Liftings b_i such that w = z + sum_i b_i u_i satisfies homogeneous
# boundary conditions.
_DIRICHLET_LIFT = Polynomial([-1.0, 1.0])  # -(1 - x)
_QUARTIC_LIFT = Polynomial([0.0, 1.0, -3.0, 3.0, -1.0]) / 6.0  # x (1 - x)^3 / 6


@dataclass(frozen=True)
class PlantParams:
    """PDE data ``z_t + z_xxxx + lam z_xx + mu z z_x = 0`` plus the scheme."""

    lam: float
    mu: float = 0.0
    scheme: Scheme = Scheme.DIRICHLET
    xi: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be positive and finite, got {self.lam}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")
        if self.scheme is Scheme.MIMO:
            if self.xi is None:
                raise ValueError("the MIMO scheme requires a sensor location xi")
            if not 0.0 <= self.xi < 1.0:
                raise ValueError(f"xi must lie in [0, 1), got {self.xi}")
        elif self.xi is not None:
            raise ValueError("xi is only meaningful for the MIMO scheme")

    @property
    def liftings(self) -> tuple[Polynomial, ...]:
        if self.scheme is Scheme.DIRICHLET:
            return (_DIRICHLET_LIFT,)
        if self.scheme is Scheme.SECOND_DERIV:
            return (_QUARTIC_LIFT,)
        return (_DIRICHLET_LIFT, _QUARTIC_LIFT)

    @property
    def lifting_sources(self) -> tuple[Polynomial, ...]:
        """``a_i = b_i'''' + lam b_i''`` for every input channel."""
        return tuple(b.deriv(4) + self.lam * b.deriv(2) for b in self.liftings)


# ---------------------------------------------------------------------------
# elementary closed forms
# ---------------------------------------------------------------------------


def eigenvalue(n, lam):
    """sigma_n = -n^4 pi^4 + lam n^2 pi^2 (vectorized over n)."""
    n2 = np.asarray(n, dtype=float) ** 2 * PI**2
    out = n2 * (lam - n2)
    return float(out) if np.ndim(out) == 0 else out


def mode_eval(n, x, derivative_order=0):
    """Evaluate phi_n(x) = sqrt(2) sin(n pi x) or its first derivative."""
    n = np.asarray(n, dtype=float)
    x = np.asarray(x, dtype=float)
    if derivative_order == 0:
        out = SQRT2 * np.sin(n * PI * x)
    elif derivative_order == 1:
        out = SQRT2 * n * PI * np.cos(n * PI * x)
    else:
        raise ValueError("derivative_order must be 0 or 1")
    return float(out) if np.ndim(out) == 0 else out


def poly_sine_integral(p: Polynomial, j) -> np.ndarray:
    """Exact ``int_0^1 p(x) sin(j pi x) dx`` for integer j (vectorized).

    Repeated integration by parts gives
    ``I_j(p) = (p(0) - (-1)^j p(1)) / k - I_j(p'') / k^2`` with ``k = j pi``,
    which terminates because p is a polynomial.
    """
    j = np.atleast_1d(np.asarray(j))
    out = np.zeros(j.shape)
    nz = j != 0
    if not nz.any():
        return out
    k = np.abs(j[nz]) * PI
    sign_end = np.where(np.abs(j[nz]) % 2 == 0, 1.0, -1.0)
    acc = np.zeros(k.shape)
    scale = 1.0 / k
    q = p
    while True:
        acc += scale * (q(0.0) - sign_end * q(1.0))
        if q.degree() < 2 or not np.any(q.coef):
            break
        q = q.deriv(2)
        scale = -scale / k**2
    out[nz] = np.sign(j[nz]) * acc
    return out


def poly_cosine_integral(p: Polynomial, j) -> np.ndarray:
    """Exact ``int_0^1 p(x) cos(j pi x) dx`` for integer j >= 0."""
    j = np.atleast_1d(np.asarray(j))
    out = np.zeros(j.shape)
    zero = j == 0
    if zero.any():
        P = p.integ()
        out[zero] = P(1.0) - P(0.0)
    nz = ~zero
    if nz.any():
        # int p cos(kx) = [p sin(kx)/k]_0^1 - (1/k) int p' sin(kx), boundary term vanishes
        out[nz] = -poly_sine_integral(p.deriv(), j[nz]) / (np.abs(j[nz]) * PI)
    return out


def poly_l2_sq(p: Polynomial) -> float:
    P = (p * p).integ()
    return float(P(1.0) - P(0.0))


def sine_coefficients(p: Polynomial, n) -> np.ndarray:
    """<p, phi_n> for n >= 1."""
    return SQRT2 * poly_sine_integral(p, n)


# ---------------------------------------------------------------------------
# per-scheme coefficients
# ---------------------------------------------------------------------------


def input_coefficients(params: PlantParams, n):
    """Lifted input coefficients ``(b_n, beta_n, a_n)`` for mode(s) n.

    Each returned array has shape ``(len(n), n_inputs)``; scalar n gives
    shape ``(n_inputs,)``.
    """
    scalar = np.ndim(n) == 0
    n = np.atleast_1d(np.asarray(n, dtype=int))
    if np.any(n < 1):
        raise ValueError("mode index must be >= 1")
    b = np.column_stack([sine_coefficients(p, n) for p in params.liftings])
    a = np.column_stack([sine_coefficients(p, n) for p in params.lifting_sources])
    sigma = np.asarray(eigenvalue(n, params.lam)).reshape(-1, 1)
    beta = a + sigma * b
    if scalar:
        return b[0], beta[0], a[0]
    return b, beta, a


def output_coefficients(params: PlantParams, n):
    """c_n = phi_n'(1) (and phi_n'(xi) for the MIMO scheme)."""
    scalar = np.ndim(n) == 0
    n = np.atleast_1d(np.asarray(n, dtype=int))
    cols = [mode_eval(n, 1.0, 1)]
    if params.scheme is Scheme.MIMO:
        cols.append(mode_eval(n, params.xi, 1))
    c = np.column_stack(cols)
    return c[0] if scalar else c


def output_lifting_slopes(params: PlantParams) -> np.ndarray:
    """Matrix D with ``y~ = y + D u``, i.e. ``D[j, i] = b_i'(x_j)`` at each sensor."""
    sensors = [1.0] if params.scheme is not Scheme.MIMO else [1.0, params.xi]
    return np.array([[b.deriv()(x) for b in params.liftings] for x in sensors])


@dataclass(frozen=True)
class TailNorms:
    N: int
    r_b: np.ndarray
    r_a: np.ndarray
    m_phi: float


def m_phi(N: int) -> float:
    """2 pi^2 sum_{n > N} 1/n^2."""
    partial = math.fsum(1.0 / k**2 for k in range(1, N + 1))
    return 2.0 * PI**2 * (PI**2 / 6.0 - partial)


def tail_norms(params: PlantParams, N: int) -> TailNorms:
    """Squared L2 norms of the modal tails R_N b_i and R_N a_i."""
    if N < 1:
        raise ValueError("N must be >= 1")
    n = np.arange(1, N + 1)

    def tail(p):
        total = poly_l2_sq(p)
        if total == 0.0:
            return 0.0
        head = math.fsum(sine_coefficients(p, n) ** 2)
        return max(total - head, 0.0)

    return TailNorms(
        N=N,
        r_b=np.array([tail(p) for p in params.liftings]),
        r_a=np.array([tail(p) for p in params.lifting_sources]),
        m_phi=m_phi(N),
    )


def n0_for_decay(lam: float, delta: float) -> int:
    """Smallest N0 >= 1 with sigma_n < -delta for every n > N0.

    sigma_n is unimodal in n with its maximum near n^2 = lam / (2 pi^2), so
    the scan stops at the first index past the peak that already decays
    faster than delta.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    peak = lam / (2.0 * PI**2)
    last_slow = 1
    n = 1
    while True:
        if eigenvalue(n, lam) >= -delta:
            last_slow = n
        elif n * n >= peak:
            return last_slow
        n += 1


@dataclass(frozen=True)
class SpectralPlant:
    """Spectral data of a plant for a target decay rate ``delta``."""

    params: PlantParams
    delta: float
    n0: int = field(init=False)

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        object.__setattr__(self, "n0", n0_for_decay(self.params.lam, self.delta))

    @property
    def n_inputs(self) -> int:
        return self.params.scheme.n_inputs

    @property
    def n_outputs(self) -> int:
        return self.params.scheme.n_outputs

    def sigma(self, n):
        return eigenvalue(n, self.params.lam)

    def b(self, n):
        return input_coefficients(self.params, n)[0]

    def beta(self, n):
        return input_coefficients(self.params, n)[1]

    def a(self, n):
        return input_coefficients(self.params, n)[2]

    def c(self, n):
        return output_coefficients(self.params, n)

    def tails(self, N: int) -> TailNorms:
        return tail_norms(self.params, N)

    @cached_property
    def unstable_block(self):
        """(A0, B0, C0) restricted to the first n0 modes."""
        n = np.arange(1, self.n0 + 1)
        _, beta, _ = input_coefficients(self.params, n)
        return np.diag(eigenvalue(n, self.params.lam)), beta, self.c(n).T
