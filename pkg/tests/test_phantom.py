import numpy as np
import pytest

from bptomo.harness import fit_through_origin
from bptomo.phantom import (PhantomSpec, as_image, boundary_density, boundary_mask, checkerboard,
                            generate_phantom)
from oracles import boundary_count_loop


def test_values_and_determinism():
    spec = PhantomSpec(64, 6, seed=4)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert set(np.unique(a)) <= {-1, 1}
    assert a.shape == (64, 64)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_phantom(PhantomSpec(64, 6, seed=5)))


def test_both_phases_present():
    img = generate_phantom(PhantomSpec(128, 14))
    assert 0 < np.mean(img == 1) < 1


@pytest.mark.parametrize("kwargs", [dict(L=4, p=0), dict(L=4, p=2, c=0.0), dict(L=0, p=1)])
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        PhantomSpec(**kwargs)


def test_too_many_seeds():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(4, 5))


def test_boundary_density_examples():
    assert boundary_density(np.ones((10, 10))) == 0
    assert boundary_density(checkerboard(10)) == 0.5
    img = -np.ones((10, 10))
    img[4, 7] = 1
    assert boundary_density(img) == 1 / 100
    img = -np.ones((10, 10))
    img[0, 0] = 1
    assert boundary_density(img) == 1 / 100


def test_boundary_density_matches_loop():
    rng = np.random.default_rng(1)
    for _ in range(60):
        L = int(rng.integers(1, 65))
        img = rng.choice([-1, 1], size=(L, L), p=[0.4, 0.6])
        assert round(boundary_density(img) * L * L) == boundary_count_loop(img)
        assert boundary_mask(img).sum() == boundary_count_loop(img)
    for p in (3, 7, 12):
        img = generate_phantom(PhantomSpec(64, p, seed=p))
        assert boundary_mask(img).sum() == boundary_count_loop(img)


def test_boundary_density_symmetries():
    rng = np.random.default_rng(2)
    for _ in range(30):
        img = rng.choice([-1, 1], size=(17, 17))
        rho = boundary_density(img)
        assert boundary_density(img.T) == rho
        for k in (1, 2, 3):
            assert boundary_density(np.rot90(img, k)) == rho


def test_as_image_validation():
    assert as_image([[1, -1], [-1, 1]]).dtype == np.int8
    with pytest.raises(ValueError):
        as_image(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        as_image(np.ones((2, 3)))


def test_rho_grows_linearly_with_p():
    ps = np.array([10, 14, 22, 28, 38])
    rho = np.array([boundary_density(generate_phantom(PhantomSpec(256, int(p)))) for p in ps])
    assert np.all(np.diff(rho) > 0)
    slope, intercept = np.polyfit(ps, rho, 1)
    r2 = 1 - np.sum((rho - (slope * ps + intercept)) ** 2) / np.sum((rho - rho.mean()) ** 2)
    assert slope > 0 and r2 > 0.9


def test_fit_through_origin():
    slope, r2 = fit_through_origin([1, 2, 3], [2, 4, 6])
    assert slope == pytest.approx(2.0) and r2 == pytest.approx(1.0)
