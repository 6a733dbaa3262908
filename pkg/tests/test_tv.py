import cvxpy as cp
import numpy as np
import pytest

from bptomo.geometry import build_ray_set, project
from bptomo.phantom import PhantomSpec, generate_phantom
from bptomo.tv import (StepSizeError, TvConfig, _tv_prox, div, gfb_reconstruct, grad,
                       optimize_beta, segment_continuous, tv_norm, tv_objective, tv_prox,
                       tv_prox_objective)
from oracles import tv_loop


def test_tv_norm_examples():
    assert tv_norm(np.full((6, 6), 0.3)) == 0
    L = 8
    img = np.where(np.arange(L) < L // 2, -1.0, 1.0)[None, :].repeat(L, 0)
    assert tv_norm(img) == pytest.approx(2 * L)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=(4, 4))
        assert tv_norm(x) == pytest.approx(tv_loop(x), rel=1e-13)


def test_div_is_negative_adjoint_of_grad():
    rng = np.random.default_rng(1)
    x, p = rng.normal(size=(7, 5)), rng.normal(size=(2, 7, 5))
    assert np.sum(grad(x) * p) == pytest.approx(-np.sum(x * div(p)), rel=1e-12)


def test_prox_of_vanishing_weight():
    v = np.random.default_rng(2).normal(size=(8, 8))
    assert np.allclose(tv_prox(v, 1e-12), v, atol=1e-8, rtol=0)


def test_prox_of_constant():
    v = np.full((5, 5), -0.4)
    for lam in (0.01, 1.0, 100.0):
        assert np.allclose(tv_prox(v, lam), v, atol=1e-12)
    with pytest.raises(ValueError):
        tv_prox(v, 0.0)


def _cvx_prox(v, lam):
    u = cp.Variable(v.shape)
    dx = cp.hstack([u[:, 1:] - u[:, :-1], np.zeros((v.shape[0], 1))])
    dy = cp.vstack([u[1:, :] - u[:-1, :], np.zeros((1, v.shape[1]))])
    tv = cp.sum(cp.norm(cp.vstack([cp.vec(dx, order="C"), cp.vec(dy, order="C")]), 2, axis=0))
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(u - v) + lam * tv))
    prob.solve(solver=cp.CLARABEL)
    return prob.value


def test_prox_objective_against_references():
    v = np.random.default_rng(3).normal(size=(8, 8))
    u_ref, _ = _tv_prox(v, 0.5, 100_000, 0.0)
    ref = tv_prox_objective(u_ref, v, 0.5)
    got = tv_prox_objective(tv_prox(v, 0.5, n_iter=5000, tol=1e-12), v, 0.5)
    assert abs(got - ref) <= 1e-6
    assert ref == pytest.approx(_cvx_prox(v, 0.5), abs=1e-5)


def test_prox_is_nonexpansive():
    rng = np.random.default_rng(4)
    for _ in range(200):
        v1, v2 = rng.normal(size=(2, 6, 6))
        lam = rng.uniform(0.05, 2.0)
        d = np.linalg.norm(tv_prox(v1, lam, 2000, 1e-12) - tv_prox(v2, lam, 2000, 1e-12))
        assert d <= np.linalg.norm(v1 - v2) * (1 + 1e-6)


def test_config_validation():
    for bad in (dict(beta=0), dict(a=1, b=1), dict(step_factor=2.0)):
        with pytest.raises(ValueError):
            TvConfig(**bad)


def test_constant_image_recovered():
    rays = build_ray_set(12, 4)
    for c in (-0.6, 0.0, 1.0):
        x0 = np.full((12, 12), c)
        sino = project(np.ones((12, 12)), rays).with_values(rays.forward(x0))
        cfg = TvConfig(beta=0.5, n_iter=3000, tol=0, inner_iter=200, inner_tol=1e-8)
        x = gfb_reconstruct(sino, rays, cfg)
        assert np.max(np.abs(np.clip(x, -1, 1) - x0)) <= 1e-6


def test_large_beta_gives_best_constant():
    rng = np.random.default_rng(5)
    L = 10
    rays = build_ray_set(L, 5)
    img = rng.choice([-1, 1], size=(L, L), p=[0.7, 0.3])
    sino = project(img, rays)
    x = np.clip(gfb_reconstruct(sino, rays, TvConfig(beta=1e4, n_iter=4000, tol=0)), -1, 1)
    scan = np.linspace(-1, 1, 200_001)
    A = rays.forward(np.ones(L * L))
    best = scan[np.argmin([np.sum((c * A - sino.values) ** 2) for c in scan[::100]]) * 100]
    fine = scan[max(0, np.searchsorted(scan, best) - 200):np.searchsorted(scan, best) + 200]
    best = fine[np.argmin([np.sum((c * A - sino.values) ** 2) for c in fine])]
    assert np.ptp(x) <= 1e-4
    assert abs(x.mean() - best) <= 1e-4


def test_objective_decreases_and_residual_small():
    img = generate_phantom(PhantomSpec(32, 4, 1))
    rays = build_ray_set(32, 8)
    sino = project(img, rays)
    # objective monotonicity holds up to the accuracy of the inner prox
    cfg = TvConfig(beta=0.05, n_iter=600, tol=0, inner_iter=200, inner_tol=1e-8)
    res = gfb_reconstruct(sino, rays, cfg, return_result=True)
    obj = np.array(res.objective)
    assert np.all(np.diff(obj) <= 1e-8 * obj[:-1] + 1e-12)
    r = np.linalg.norm(rays.forward(np.clip(res.x, -1, 1)) - sino.values)
    assert r / np.linalg.norm(sino.values) < 1e-2
    assert np.all(np.isfinite(res.x))
    assert obj[-1] == pytest.approx(tv_objective(np.clip(res.x, -1, 1), sino.values, rays, 0.05))


def test_step_size_error():
    rays = build_ray_set(16, 4)
    img = generate_phantom(PhantomSpec(16, 2, 0))
    sino = project(img, rays)
    cfg = TvConfig(beta=0.1, n_iter=50)
    object.__setattr__(cfg, "step_factor", 40.0)  # bypass validation to force divergence
    with pytest.raises(StepSizeError):
        gfb_reconstruct(sino, rays, cfg)


def test_segment_continuous():
    assert np.all(segment_continuous(np.full((3, 3), 0.2)) == 1)
    assert np.all(segment_continuous(np.zeros((3, 3))) == 1)
    assert np.all(segment_continuous(np.full((3, 3), -1e-9)) == -1)
    assert np.all(segment_continuous(np.full((2, 2), 0.5), a=0, b=1) == 1)


def test_segmentation_error_recount():
    img = generate_phantom(PhantomSpec(24, 3, 2))
    rays = build_ray_set(24, 4)
    x = gfb_reconstruct(project(img, rays), rays, TvConfig(beta=0.5, n_iter=300))
    seg = segment_continuous(x)
    mismatches = sum(int(seg[i, j] != img[i, j]) for i in range(24) for j in range(24))
    assert np.count_nonzero(seg != img) == mismatches


def test_optimize_beta_synthetic_minimum():
    rays = build_ray_set(4, 1)
    sino = project(np.ones((4, 4)), rays)
    out = optimize_beta(sino, rays, TvConfig(), np.ones((4, 4)),
                        objective=lambda lb: (lb - 0.3) ** 2, xatol=1e-4, maxiter=100)
    assert abs(np.log10(out.beta) - 0.3) <= 1e-3
    assert not out.at_endpoint


def test_optimize_beta_flat_and_endpoint():
    rays = build_ray_set(4, 1)
    sino = project(np.ones((4, 4)), rays)
    flat = optimize_beta(sino, rays, TvConfig(), np.ones((4, 4)), objective=lambda lb: 0.1)
    assert flat.error == 0.1 and not flat.at_endpoint
    edge = optimize_beta(sino, rays, TvConfig(), np.ones((4, 4)), objective=lambda lb: lb)
    assert edge.at_endpoint and edge.beta == pytest.approx(1e-3)
    with pytest.raises(ValueError):
        optimize_beta(sino, rays, TvConfig(), np.ones((4, 4)), log_bracket=(1, 1))


def test_optimize_beta_small_noisy_instance():
    from bptomo.geometry import add_noise
    img = generate_phantom(PhantomSpec(24, 3, 0))
    rays = build_ray_set(24, 3)
    sino = add_noise(project(img, rays), 0.05 * 24, seed=0)
    out = optimize_beta(sino, rays, TvConfig(n_iter=300), img, log_bracket=(-2, 1), maxiter=8)
    ends = [e for b, e in out.evaluations if b in (10.0 ** -2, 10.0 ** 1)]
    assert len(ends) == 2 and out.error <= min(ends)
