import numpy as np
import pytest
from scipy.stats import ortho_group

from domino.simsuite import (SimilarityReport, canonical_correlations, cca_measure, cka_linear, compare,
                             is_degenerate, pwcca, pwcca_weights, svcca, svd_reduce)


def eig_oracle(zi, zj):
    """Mean canonical correlation from the eigenvalues of S11^-1 S12 S22^-1 S21."""
    n = zi.shape[0]
    ci, cj = zi - zi.mean(0), zj - zj.mean(0)
    s11, s22, s12 = ci.T @ ci / (n - 1), cj.T @ cj / (n - 1), ci.T @ cj / (n - 1)
    if zi.shape[1] > zj.shape[1]:
        s11, s22, s12 = s22, s11, s12.T
    m = np.linalg.solve(s11, s12) @ np.linalg.solve(s22, s12.T)
    ev = np.clip(np.real(np.linalg.eigvals(m)), 0, 1)
    return float(np.mean(np.sqrt(ev)))


def _instance(seed):
    rng = np.random.default_rng(seed)
    d1, d2 = rng.integers(1, 5, size=2)
    n = int(rng.integers(max(d1, d2) + 6, 51))
    zi = rng.standard_normal((n, d1))
    zj = zi @ rng.standard_normal((d1, d2)) * rng.uniform(0, 1) + rng.standard_normal((n, d2))
    return zi, zj


@pytest.mark.parametrize("seed", range(50))
def test_cca_matches_eigen_oracle(seed):
    zi, zj = _instance(seed)
    assert not is_degenerate(zi, zj)
    assert cca_measure(zi, zj) == pytest.approx(eig_oracle(zi, zj), abs=1e-6)


def test_cca_symmetric(rng):
    zi, zj = rng.standard_normal((100, 4)), rng.standard_normal((100, 4))
    assert abs(cca_measure(zi, zj) - cca_measure(zj, zi)) < 1e-8


def test_cca_invertible_map_is_one(rng):
    zi = rng.standard_normal((200, 4))
    a = rng.standard_normal((4, 4)) + 3 * np.eye(4)
    assert cca_measure(zi, zi @ a) == pytest.approx(1.0, abs=1e-6)


def test_cca_independent_gaussians_small():
    vals = [cca_measure(*np.random.default_rng(s).standard_normal((2, 10000, 4))) for s in range(20)]
    assert max(vals) < 0.1


def test_cca_hand_example():
    raw = np.random.default_rng(0).standard_normal((40, 3))
    q, _ = np.linalg.qr(raw - raw.mean(0))  # centred orthonormal columns
    a, b, c = q[:, 0], q[:, 1], q[:, 2]
    zi = np.stack([a, b], 1)
    zj = np.stack([a, c], 1)
    np.testing.assert_allclose(sorted(canonical_correlations(zi, zj)), [0.0, 1.0], atol=1e-8)
    assert cca_measure(zi, zj) == pytest.approx(0.5, abs=1e-8)


def test_degenerate_path_is_flagged(rng):
    zi = rng.standard_normal((10, 64))
    zj = rng.standard_normal((10, 64))
    vals, degenerate = compare(zi, zj)
    assert degenerate
    assert all(0 <= v <= 1 + 1e-8 for v in vals.values())


# --- CKA -----------------------------------------------------------------------

def test_cka_self_and_invariances(rng):
    z = rng.standard_normal((60, 8))
    r = ortho_group.rvs(8, random_state=1)
    assert cka_linear(z, z) == pytest.approx(1.0, abs=1e-12)
    assert cka_linear(z, z @ r) == pytest.approx(1.0, abs=1e-6)
    assert cka_linear(z, -3.5 * z) == pytest.approx(1.0, abs=1e-6)
    w = rng.standard_normal((60, 5))
    assert cka_linear(z @ r, 2.0 * w) == pytest.approx(cka_linear(z, w), abs=1e-6)


def test_cka_orthogonal_spaces_zero():
    q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((30, 4)))
    q, _ = np.linalg.qr(q - q.mean(0))
    assert cka_linear(q[:, :2], q[:, 2:]) == pytest.approx(0.0, abs=1e-12)


def test_cka_zero_matrix_is_nan():
    assert np.isnan(cka_linear(np.zeros((5, 3)), np.ones((5, 3))))


# --- SVCCA / PWCCA -------------------------------------------------------------

def test_svcca_full_keep_equals_cca(rng):
    zi, zj = rng.standard_normal((80, 4)), rng.standard_normal((80, 4))
    zj += zi
    assert svcca(zi, zj, 1.0) == pytest.approx(cca_measure(zi, zj), abs=1e-6)


def test_svcca_dominant_direction(rng):
    n = 300
    base = rng.standard_normal((n, 4)) * np.array([100.0, 1.0, 1.0, 1.0])
    zi = base @ ortho_group.rvs(4, random_state=2)
    zj = rng.standard_normal((n, 3)) + zi[:, :3]
    red_i = svd_reduce(zi, 0.99)
    assert red_i.shape[1] == 1
    assert svcca(zi, zj) == pytest.approx(cca_measure(red_i, svd_reduce(zj, 0.99)), abs=1e-12)


def test_svcca_drops_noise_padding(rng):
    zi = rng.standard_normal((200, 4))
    padded = np.hstack([zi, 1e-6 * rng.standard_normal((200, 3))])
    assert svcca(padded, zi) == pytest.approx(1.0, abs=1e-6)


def test_pwcca_identity_and_weights(rng):
    zi = rng.standard_normal((100, 4))
    assert pwcca(zi, zi) == pytest.approx(1.0, abs=1e-8)
    alpha, _ = pwcca_weights(zi, rng.standard_normal((100, 4)))
    assert np.all(alpha >= 0)
    assert alpha.sum() == pytest.approx(1.0, abs=1e-12)


def test_pwcca_single_massive_direction():
    # six orthonormal centred columns give exact canonical pairs (a, b, c) with known rho
    q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((500, 6)))
    q, _ = np.linalg.qr(q - q.mean(0))
    a, b, c, e1, e2, e3 = q.T
    rho = np.array([0.8, 0.5, 0.3])
    zi = np.stack([100 * a, 1e-3 * b, 1e-3 * c], 1)
    zj = np.stack([r * s + np.sqrt(1 - r * r) * e for r, s, e in zip(rho, (a, b, c), (e1, e2, e3))], 1)
    np.testing.assert_allclose(canonical_correlations(zi, zj), rho, atol=1e-10)
    expected_alpha = np.array([100, 1e-3, 1e-3]) / 100.002
    alpha, _ = pwcca_weights(zi, zj)
    np.testing.assert_allclose(alpha, expected_alpha, atol=1e-10)
    assert pwcca(zi, zj) == pytest.approx(expected_alpha @ rho, abs=1e-10)
    assert pwcca(zi, zj) == pytest.approx(rho[0], abs=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_all_measures_in_unit_interval(seed):
    zi, zj = _instance(seed)
    vals, _ = compare(zi, zj)
    assert set(vals) == set(SimilarityReport.MEASURES)
    assert all(-1e-8 <= v <= 1 + 1e-8 for v in vals.values())


def test_report_rows_and_json():
    rep = SimilarityReport("RR", {"train": dict.fromkeys(SimilarityReport.MEASURES, 0.5)}, {"centered": True})
    row = rep.rows()[0]
    assert row["model"] == "RR" and row["split"] == "train"
    assert rep.to_json()[0]["flags"]["centered"] is True
