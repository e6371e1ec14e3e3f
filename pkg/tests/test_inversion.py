import dataclasses

import numpy as np
import pytest

from optitomo.errors import FieldError
from optitomo.field import PiecewiseConstantField, sample_coefficient
from optitomo.fem import assemble, energy, solve_neumann
from optitomo.inversion import (
    JOINT,
    Q_ONLY,
    InversionConfig,
    balancing_rho,
    bfgs_minimize,
    kv_gradient,
    kv_terms,
    kv_value,
)
from optitomo.synth import consistent_measurements, make_measurements, example2_spec


FLUXES = [f"offset_sin:10,{k}" for k in range(1, 6)]


@pytest.fixture(scope="module")
def example1_consistent(mesh_small):
    sigma = sample_coefficient(mesh_small, "example1_sigma")
    q_true = sample_coefficient(mesh_small, "example1_q")
    meas = consistent_measurements(mesh_small, sigma, q_true, FLUXES)
    return sigma, q_true, meas


def _data_energy(meas, sigma, q):
    sys = assemble(meas.mesh, sigma, q)
    return sum(energy(sys, solve_neumann(sys, g)) for g, _ in meas.pairs)


def test_value_zero_on_consistent_data(example1_consistent):
    sigma, q_true, meas = example1_consistent
    value = kv_value(meas, sigma, q_true, 0.0, Q_ONLY)
    assert 0.0 <= value <= 1e-10 * _data_energy(meas, sigma, q_true)


def test_value_reduces_to_penalty_on_consistent_data(example1_consistent):
    sigma, q_true, meas = example1_consistent
    mesh = meas.mesh
    rho = 0.37
    expected = 0.5 * rho * float(np.sum(mesh.areas * q_true.values ** 2))
    value = kv_value(meas, sigma, q_true, rho, Q_ONLY)
    assert value == pytest.approx(expected, rel=1e-10)
    expected_joint = 0.5 * rho * float(
        np.sum(mesh.areas * (sigma.values ** 2 + q_true.values ** 2))
    )
    assert kv_value(meas, sigma, q_true, rho, JOINT) == pytest.approx(expected_joint, rel=1e-10)


def test_value_nonnegative(example1_consistent):
    sigma, _, meas = example1_consistent
    rng = np.random.default_rng(0)
    q = PiecewiseConstantField(meas.mesh, rng.uniform(0.5, 3.0, meas.mesh.n_elements))
    assert kv_value(meas, sigma, q, 0.0, Q_ONLY) >= 0.0


def test_gradient_vanishes_at_truth(example1_consistent):
    sigma, q_true, meas = example1_consistent
    gsig, gq = kv_gradient(meas, sigma, q_true, 0.0, JOINT)
    assert np.max(np.abs(gq.values)) <= 1e-10
    assert np.max(np.abs(gsig.values)) <= 1e-10


def test_gradient_matches_finite_differences(example1_consistent):
    sigma, q_true, meas = example1_consistent
    mesh = meas.mesh
    rng = np.random.default_rng(42)
    q = PiecewiseConstantField(mesh, q_true.values * rng.uniform(0.9, 1.1, mesh.n_elements))
    rho = 1e-3
    _, gq = kv_gradient(meas, sigma, q, rho, Q_ONLY)
    for _ in range(5):
        d = rng.standard_normal(mesh.n_elements)
        analytic = float(gq.values @ d)
        best = np.inf
        for t in (1e-2, 1e-3, 1e-4):
            plus = PiecewiseConstantField(mesh, q.values + t * d)
            minus = PiecewiseConstantField(mesh, q.values - t * d)
            fd = (kv_value(meas, sigma, plus, rho, Q_ONLY)
                  - kv_value(meas, sigma, minus, rho, Q_ONLY)) / (2 * t)
            best = min(best, abs(fd - analytic) / max(abs(analytic), 1e-300))
        assert best <= 1e-4


def test_gradient_penalty_only_term(example1_consistent):
    # consistent data: the data-term gradient vanishes, leaving rho * area * sigma
    sigma, q_true, meas = example1_consistent
    mesh = meas.mesh
    rho = 0.25
    gsig, _ = kv_gradient(meas, sigma, q_true, rho, JOINT)
    expected = rho * mesh.areas * sigma.values
    np.testing.assert_allclose(gsig.values, expected, rtol=0,
                               atol=1e-10 * np.max(np.abs(expected)))


def test_bfgs_descends_consistent_data(example1_consistent):
    sigma, q_true, meas = example1_consistent
    cfg = InversionConfig(
        mode=Q_ONLY,
        sigma0=sigma,
        q0=sample_coefficient(meas.mesh, "constant:1"),
        q_bounds=(0.1, 5.0),
        rho=0.0,
        max_iter=400,
        gradient_tolerance=1e-12,
    )
    _, q_rec, trace = bfgs_minimize(meas, cfg)
    values = [r["J"] for r in trace.rows]
    assert all(b <= a + 1e-15 * abs(a) for a, b in zip(values, values[1:]))
    assert values[-1] <= 1e-6 * values[0]
    assert np.all(q_rec.values >= 0.1) and np.all(q_rec.values <= 5.0)


def test_bfgs_limited_memory_variant(example1_consistent):
    sigma, _, meas = example1_consistent
    cfg = InversionConfig(
        mode=Q_ONLY,
        sigma0=sigma,
        q0=sample_coefficient(meas.mesh, "constant:1"),
        q_bounds=(0.1, 5.0),
        rho=0.0,
        max_iter=400,
        gradient_tolerance=1e-12,
        force_limited_memory=True,
    )
    _, q_rec, trace = bfgs_minimize(meas, cfg)
    values = [r["J"] for r in trace.rows]
    assert all(b <= a + 1e-15 * abs(a) for a, b in zip(values, values[1:]))
    assert values[-1] <= 1e-6 * values[0]
    assert np.all(q_rec.values >= 0.1) and np.all(q_rec.values <= 5.0)


def test_bfgs_prescale_knob(mesh_small):
    sigma = sample_coefficient(mesh_small, "one")
    cfg = InversionConfig(
        mode=Q_ONLY,
        sigma0=sigma,
        q0=sample_coefficient(mesh_small, "constant:2"),
        q_bounds=(0.5, 4.0),
        rho=1.0,
        max_iter=200,
        gradient_tolerance=1e-14,
        q_prescale=3.0,
    )
    _, q_rec, _ = bfgs_minimize(None, cfg)
    np.testing.assert_allclose(q_rec.values, 0.5, rtol=0, atol=1e-8)


def test_bfgs_pure_penalty_hits_projected_zero(mesh_small):
    sigma = sample_coefficient(mesh_small, "one")
    cfg = InversionConfig(
        mode=Q_ONLY,
        sigma0=sigma,
        q0=sample_coefficient(mesh_small, "constant:2"),
        q_bounds=(0.5, 4.0),
        rho=1.0,
        max_iter=200,
        gradient_tolerance=1e-14,
    )
    _, q_rec, _ = bfgs_minimize(None, cfg)
    np.testing.assert_allclose(q_rec.values, 0.5, rtol=0, atol=1e-8)


def test_bfgs_example2_paper_rho_terminates(mesh_small):
    spec = example2_spec(noise_level=0.03, seed=5)
    spec = dataclasses.replace(spec, fine_elements=1016, coarse_elements=254)
    meas = make_measurements(spec)
    mesh = meas.mesh
    cfg = InversionConfig(
        mode=JOINT,
        sigma0=sample_coefficient(mesh, spec.init_sigma),
        q0=sample_coefficient(mesh, spec.init_q),
        q_bounds=(0.5, 6.0),
        sigma_bounds=(0.5, 5.0),
        rho=1.674e-6,
        max_iter=40,
        gradient_tolerance=1e-11,
    )
    sigma_rec, q_rec, trace = bfgs_minimize(meas, cfg)
    values = [r["J"] for r in trace.rows]
    assert len(values) - 1 <= 40
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(values, values[1:]))
    assert np.all(sigma_rec.values >= 0.5) and np.all(sigma_rec.values <= 5.0)


def test_config_validation(mesh_small):
    sigma = sample_coefficient(mesh_small, "one")
    q0 = sample_coefficient(mesh_small, "one")
    with pytest.raises(FieldError):
        InversionConfig(mode="bogus", sigma0=sigma, q0=q0, q_bounds=(1, 2))
    with pytest.raises(FieldError):
        InversionConfig(mode=Q_ONLY, sigma0=sigma, q0=q0, q_bounds=(2, 1))
    with pytest.raises(FieldError):
        InversionConfig(mode=JOINT, sigma0=sigma, q0=q0, q_bounds=(1, 2))
    with pytest.raises(FieldError):
        InversionConfig(mode=Q_ONLY, sigma0=sigma, q0=q0, q_bounds=(1, 2), beta_balance=1.0)


def test_balancing_one_step_closed_form():
    # noisy data so the fit term is nonzero; frozen coefficients via max_iter=0
    from optitomo.synth import example1_spec

    spec = example1_spec(noise_level=0.05, seed=3)
    spec = dataclasses.replace(spec, fine_elements=1016, coarse_elements=254)
    meas = make_measurements(spec)
    mesh = meas.mesh
    sigma = sample_coefficient(mesh, spec.truth_sigma)
    q0 = sample_coefficient(mesh, "constant:1")
    cfg = InversionConfig(
        mode=Q_ONLY, sigma0=sigma, q0=q0, q_bounds=(0.1, 5.0),
        max_iter=0, beta_balance=1.5, balance_max_outer=1,
    )
    rho_star, history = balancing_rho(meas, cfg)
    _, fit0, _ = kv_terms(meas, sigma, q0, 0.0, Q_ONLY)
    pen0 = float(np.sum(mesh.areas * q0.values ** 2))
    assert history[0]["rho"] == pytest.approx(2.0 * 0.5 * fit0 / pen0, rel=1e-12)
    assert rho_star == pytest.approx(history[-1]["rho"])


def test_balancing_degenerates_on_consistent_data(example1_consistent):
    sigma, q_true, meas = example1_consistent
    cfg = InversionConfig(
        mode=Q_ONLY, sigma0=sigma, q0=q_true, q_bounds=(0.1, 5.0), max_iter=5,
    )
    rho_star, history = balancing_rho(meas, cfg)
    assert rho_star == 0.0
    assert history[0]["degenerate"]


def test_balancing_residual_contract(mesh_small):
    from optitomo.synth import example1_spec

    spec = example1_spec(noise_level=0.05, seed=3)
    spec = dataclasses.replace(spec, fine_elements=1016, coarse_elements=254)
    meas = make_measurements(spec)
    mesh = meas.mesh
    cfg = InversionConfig(
        mode=Q_ONLY,
        sigma0=sample_coefficient(mesh, spec.truth_sigma),
        q0=sample_coefficient(mesh, "constant:1"),
        q_bounds=(0.1, 5.0),
        max_iter=60,
        gradient_tolerance=1e-10,
    )
    rho_star, history = balancing_rho(meas, cfg)
    assert rho_star > 0.0
    last = history[-1]
    assert last["residual"] <= 1e-3 * (cfg.beta_balance - 1.0) * last["data_fit"] * 1.5
