import json
import math

import numpy as np
import pytest

from ksestab.certifier import (
    Certificate,
    InfeasibleReport,
    Margins,
    NotFoundBelow,
    SearchConfig,
    alpha_grid,
    alpha_lower_bound,
    assemble_reduced_model,
    certificate_from_json,
    certificate_to_json,
    certify,
    evaluate_constraints,
    lyapunov_candidate,
    min_feasible_N,
    theta1,
    theta2,
    theta3,
    verify_certificate,
)
from ksestab.errors import DimensionMismatch, NotHurwitz, OrderTooSmall
from ksestab.spectral import PI, PlantParams, Scheme, SpectralPlant, eigenvalue, m_phi
from ksestab.synthesis import GainSet, gains_from_arrays, synthesize


@pytest.fixture(scope="module")
def ref():
    plant = SpectralPlant(PlantParams(25.0, 1.0), 0.5)
    return plant, gains_from_arrays(plant, 2.31, -34.96)


@pytest.fixture(scope="module")
def ref_cert(ref):
    plant, gains = ref
    cert = certify(plant, gains, 5)
    assert isinstance(cert, Certificate)
    return cert


def eig_sorted(M):
    return np.sort_complex(np.linalg.eigvals(M))


# ---------------------------------------------------------------------------
# reduced model
# ---------------------------------------------------------------------------


def test_model_dimensions(ref):
    plant, gains = ref
    m = assemble_reduced_model(plant, gains, 5)
    assert m.F.shape == (10, 10)
    assert m.Lcal.shape == (10, 1)
    assert m.G.shape == (10, 5)
    assert m.E.shape == (1, 11)
    assert m.Ktilde.shape == (1, 10)
    assert m.N0 == 1 and m.theorem == 1


def test_model_entries(ref):
    plant, gains = ref
    m = assemble_reduced_model(plant, gains, 5)
    K, L = 2.31, -34.96
    sigma1 = eigenvalue(1, 25)
    beta = lambda n: eigenvalue(n, 25) * (-math.sqrt(2) / (n * PI))
    c = lambda n: (-1) ** n * math.sqrt(2) * n * PI
    assert m.F[0, 0] == pytest.approx(sigma1 + beta(1) * K, rel=1e-13)
    assert m.F[1, 1] == pytest.approx(sigma1 - L * c(1), rel=1e-13)
    # first scaled estimate row is beta_2 K / 2^4
    assert m.F[2, 0] == pytest.approx(beta(2) * K / 16, rel=1e-13)
    # L C1~ with C1~ entries c_n / n^2
    assert m.F[0, 6] == pytest.approx(L * c(2) / 4, rel=1e-13)
    assert m.F[1, 6] == pytest.approx(-L * c(2) / 4, rel=1e-13)
    assert np.allclose(np.diag(m.F)[2:6], eigenvalue(np.arange(2, 6), 25), rtol=1e-13)
    assert np.array_equal(m.Lcal[:, 0], [L, -L] + [0.0] * 8)


@pytest.mark.parametrize("N", [2, 5, 12])
def test_spectrum_of_F_is_block_union(ref, N):
    plant, gains = ref
    m = assemble_reduced_model(plant, gains, N)
    A0, B0, C0 = plant.unstable_block
    parts = np.concatenate([
        np.linalg.eigvals(A0 + B0 @ gains.K),
        np.linalg.eigvals(A0 - gains.L @ C0),
        np.diag(m.A1), np.diag(m.A1),
    ])
    assert np.allclose(eig_sorted(m.F), np.sort_complex(parts), rtol=1e-9)


def test_order_too_small(ref):
    plant, gains = ref
    with pytest.raises(OrderTooSmall):
        assemble_reduced_model(plant, gains, 1)
    with pytest.raises(OrderTooSmall):
        certify(plant, gains, 1)
    with pytest.raises(OrderTooSmall):
        min_feasible_N(plant, gains, 1)


def test_gain_shape_mismatch(ref):
    plant, _ = ref
    bad = GainSet(np.ones((1, 2)), np.ones((2, 1)), Scheme.DIRICHLET)
    with pytest.raises(DimensionMismatch):
        assemble_reduced_model(plant, bad, 5)


def test_scaled_gain_boundedness(ref):
    plant, gains = ref
    cn, bn = [], []
    for N in (10, 20, 40, 80):
        m = assemble_reduced_model(plant, gains, N)
        cn.append(np.linalg.norm(m.C1))
        bn.append(np.linalg.norm(m.B1))
    # |c_n / n^2| = sqrt2 pi / n and |beta_n / n^4| < sqrt2 pi^3 / n for n > N0
    assert max(cn) <= math.sqrt(2 * PI**2 * PI**2 / 6)
    assert max(bn) <= math.sqrt(2 * PI**6 * PI**2 / 6)
    # partial sums of convergent series: growth slows down
    for seq in (cn, bn):
        inc = np.diff(seq)
        assert np.all(inc >= 0) and np.all(np.diff(inc) < 0)


# ---------------------------------------------------------------------------
# Lyapunov candidate
# ---------------------------------------------------------------------------


def test_lyapunov_examples():
    assert lyapunov_candidate([[-3.0]], 0.5)[0, 0] == pytest.approx(0.2, rel=1e-14)
    P = lyapunov_candidate(np.diag([-3.0, -4.0]), 0.5)
    assert np.allclose(P, np.diag([1 / 5, 1 / 7]), rtol=1e-14, atol=1e-16)
    with pytest.raises(NotHurwitz):
        lyapunov_candidate([[-0.4]], 0.5)


@pytest.mark.parametrize("n", [1, 3, 10, 30, 60])
def test_lyapunov_residual_random(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        X = rng.standard_normal((n, n))
        # shift so that every eigenvalue sits left of -delta
        F = X - (np.max(np.linalg.eigvals(X).real) + 1.0 + rng.uniform(0, 3)) * np.eye(n)
        P = lyapunov_candidate(F, 0.5)
        R = F.T @ P + P @ F + P + np.eye(n)
        assert np.linalg.norm(R) <= 1e-8 * (1 + np.linalg.norm(P))
        assert np.array_equal(P, P.T)
        assert np.linalg.eigvalsh(P)[0] > 0


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------


def test_theta3_example():
    assert theta3(1, 5, 25.0, 1.0) == pytest.approx(36 * (PI**4 - 1) - 25 * PI**2, rel=1e-14)
    assert theta3(1, 5, 25.0, 1.0) == pytest.approx(3223.98, abs=0.01)


def test_theta2_example(ref):
    plant, _ = ref
    tails = plant.tails(5)
    val = theta2(1, 5, 25.0, tails, 1.0, [math.sqrt(5)], 0.2, 0.5)
    sigma6 = -1296 * PI**4 + 900 * PI**2
    assert val == pytest.approx(2 * 0.2 * (sigma6 + 0.5 + 1296) + math.sqrt(5) * m_phi(5), rel=1e-13)
    assert val == pytest.approx(-46416, abs=5)


def test_alpha_bounds():
    assert alpha_lower_bound(1) == pytest.approx(1 / PI**4)
    assert alpha_lower_bound(2) == pytest.approx(3 / (2 * PI**4))
    assert alpha_lower_bound(3) == pytest.approx(2 / PI**4)
    grid = alpha_grid(2, SearchConfig())
    assert len(grid) == 32 and grid[0] > alpha_lower_bound(2) and grid[-1] == pytest.approx(1e4)


def test_theta1_symmetric_and_validated(ref):
    plant, gains = ref
    m = assemble_reduced_model(plant, gains, 5)
    tails = plant.tails(5)
    P = lyapunov_candidate(m.F, 0.5)
    T = theta1(m, tails, P, 1.0, [2.0], 0.2, 0.5)
    assert T.shape == (11, 11) and np.array_equal(T, T.T)
    with pytest.raises(DimensionMismatch):
        theta1(m, tails, np.eye(4), 1.0, [2.0], 0.2, 0.5)
    with pytest.raises(DimensionMismatch):
        theta1(m, tails, P, 1.0, [2.0, 1.0], 0.2, 0.5)
    with pytest.raises(ValueError):
        evaluate_constraints(1, m, tails, P, 0.5 / PI**4, [2.0], 0.2, 0.5)
    with pytest.raises(ValueError):
        evaluate_constraints(1, m, tails, P, 1.0, [2.0], -0.2, 0.5)
    with pytest.raises(DimensionMismatch):
        evaluate_constraints(2, m, tails, P, 1.0, [2.0], 0.2, 0.5)


def test_theta1_homogeneity(ref):
    # Theta1 is linear in (P, betas, gamma) jointly
    plant, gains = ref
    m = assemble_reduced_model(plant, gains, 5)
    tails = plant.tails(5)
    P = lyapunov_candidate(m.F, 0.5)
    T = theta1(m, tails, P, 1.0, [2.0], 0.2, 0.5)
    T7 = theta1(m, tails, 7 * P, 1.0, [14.0], 1.4, 0.5)
    assert np.allclose(T7, 7 * T, rtol=1e-12, atol=1e-9)


def test_theorem3_reduction(ref):
    plant1, gains1 = ref
    plant3 = SpectralPlant(PlantParams(25.0, 1.0, Scheme.MIMO, 0.3), 0.5)
    g3 = GainSet(np.vstack([gains1.K, [[0.0]]]), np.hstack([gains1.L, [[0.0]]]), Scheme.MIMO)
    N, alpha, gamma, beta1, beta2 = 6, 2.0, 1 / 6, 3.0, 5.0
    m1 = assemble_reduced_model(plant1, gains1, N)
    m3 = assemble_reduced_model(plant3, g3, N)
    assert np.allclose(m1.F, m3.F, rtol=1e-14, atol=0)
    P = lyapunov_candidate(m1.F, 0.5)
    T1 = theta1(m1, plant1.tails(N), P, alpha, [beta1], gamma, 0.5)
    T3 = theta1(m3, plant3.tails(N), P, alpha, [beta1, beta2], gamma, 0.5)
    padded = np.concatenate([np.linalg.eigvalsh(T1), [-beta2]])
    ev3 = np.linalg.eigvalsh(T3)
    assert np.allclose(np.sort(padded), ev3, rtol=0, atol=1e-10 * max(1.0, np.abs(ev3).max()))


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def test_reference_certificate(ref, ref_cert):
    plant, gains = ref
    cert = ref_cert
    assert cert.theorem == 1 and cert.N == 5
    assert cert.P.shape == (10, 10)
    assert cert.alpha > 1 / PI**4 and cert.gamma > 0 and np.all(cert.betas > 0)
    assert cert.margins.feasible()
    mg = verify_certificate(cert, plant, gains)
    for a, b in zip(mg, cert.margins):
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)
    # independent re-check with plain eigen-solves
    m = assemble_reduced_model(plant, gains, 5)
    T = theta1(m, plant.tails(5), cert.P, cert.alpha, cert.betas, cert.gamma, 0.5)
    assert np.linalg.eigvalsh(T)[-1] < 0
    assert np.linalg.eigvalsh(cert.P)[0] > 0
    assert theta2(1, 5, 25.0, plant.tails(5), cert.alpha, cert.betas, cert.gamma, 0.5) < 0
    assert theta3(1, 5, 25.0, cert.alpha) >= 0


def test_min_feasible_N_reference(ref, ref_cert):
    plant, gains = ref
    N, cert = min_feasible_N(plant, gains, 10)
    assert isinstance(cert, Certificate) and N <= 5
    # monotone restart: a bound at the found N returns the same N
    N2, _ = min_feasible_N(plant, gains, N)
    assert N2 == N
    res, cert2 = min_feasible_N(plant, gains, 2)
    assert res == 2 or (isinstance(res, NotFoundBelow) and res.N_max == 2 and cert2 is None)


def test_lyapunov_stage_only_reports_infeasible(ref):
    plant, gains = ref
    res = certify(plant, gains, 5, SearchConfig(use_sdp=False))
    # the Lyapunov candidate alone does not certify the reference loop
    assert isinstance(res, (InfeasibleReport, Certificate))
    if isinstance(res, InfeasibleReport):
        assert not res and res.best_margins is not None and res.N == 5


def test_certify_propagates_not_hurwitz(ref):
    plant, _ = ref
    zero = GainSet(np.zeros((1, 1)), np.zeros((1, 1)), Scheme.DIRICHLET)
    with pytest.raises(NotHurwitz):
        certify(plant, zero, 5)


def test_theorem2_certifies_small_N():
    plant = SpectralPlant(PlantParams(PI**2, 1.0, Scheme.SECOND_DERIV), 0.5)
    gains = synthesize(plant)
    N, cert = min_feasible_N(plant, gains, 20)
    assert isinstance(cert, Certificate) and cert.theorem == 2 and N <= 20
    verify_certificate(cert, plant, gains)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_json_round_trip(ref_cert):
    text = certificate_to_json(ref_cert)
    cert, plant, gains = certificate_from_json(text)
    assert cert.N == 5 and plant.params.lam == 25.0
    assert np.array_equal(cert.P, ref_cert.P)
    assert cert.alpha == ref_cert.alpha and cert.gamma == ref_cert.gamma
    d = json.loads(text)
    assert set(d) >= {"theorem", "N", "delta", "alpha", "betas", "gamma", "P", "margins", "K", "L", "plant"}


def test_json_tampered_certificate_rejected(ref_cert):
    d = json.loads(certificate_to_json(ref_cert))
    d["P"] = [-v for v in d["P"]]
    with pytest.raises(ValueError):
        certificate_from_json(json.dumps(d))
    d = json.loads(certificate_to_json(ref_cert))
    d["alpha"] = 1e-9
    with pytest.raises(ValueError):
        certificate_from_json(json.dumps(d))


def test_margins_feasible_semantics():
    assert Margins(-1.0, -1.0, 0.0).feasible()
    assert not Margins(-1e-10, -1.0, 0.0).feasible()
    assert not Margins(-1.0, -1.0, -1e-12).feasible()
