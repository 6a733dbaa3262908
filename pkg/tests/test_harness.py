import csv
import json

import numpy as np
import pytest
from jsonschema import ValidationError

from bptomo.bp import BpConfig, reconstruct
from bptomo.geometry import add_noise, build_ray_set, project
from bptomo.harness import (ABOVE_GRID, Sweep, error_fraction, estimate_alpha_c, find_alpha_c,
                            run_sweep)
from bptomo.phantom import PhantomSpec, checkerboard, generate_phantom

SMALL = {"phantoms": [{"L": 24, "p": 3, "seed": 2}], "n_theta": [6], "methods": ["bp"]}


def test_error_fraction():
    a = generate_phantom(PhantomSpec(16, 3))
    assert error_fraction(a, a) == 0
    assert error_fraction(a, -a) == 1
    b = a.copy()
    b[3, 4] *= -1
    assert error_fraction(b, a) == 1 / 256
    with pytest.raises(ValueError):
        error_fraction(a, a[:8])


def test_sweep_validation():
    with pytest.raises(ValueError):
        Sweep.from_dict({**SMALL, "methods": []})
    with pytest.raises(ValueError):
        Sweep(phantoms=SMALL["phantoms"], n_theta=[4], methods=[])
    with pytest.raises(ValidationError):
        Sweep.from_dict({**SMALL, "n_theta": []})
    with pytest.raises(ValidationError):
        Sweep.from_dict({**SMALL, "methods": ["art"]})
    with pytest.raises(ValidationError):
        Sweep.from_dict({**SMALL, "unknown": 1})


def test_example_config_is_valid():
    sweep = Sweep.from_json("configs/sweep_example.json")
    assert len(sweep.cells()) == 2 * 5 * 2 * 2


def test_single_cell_matches_direct_call():
    res = run_sweep(Sweep.from_dict({**SMALL, "nsr": [0.02]}))
    assert len(res.rows) == 1
    row = res.rows[0]
    truth = generate_phantom(PhantomSpec(24, 3, 2))
    rays = build_ray_set(24, 6)
    sino = add_noise(project(truth, rays), 0.02 * 24, seed=1)
    x, rep = reconstruct(rays, sino, BpConfig(noisy=True), ground_truth=truth)
    assert row["status"] == "ok"
    assert row["errors"] == np.count_nonzero(x != truth)
    assert row["iterations"] == rep.iterations and row["termination"] == rep.termination
    assert row["alpha"] == rays.alpha and row["sigma"] == 0.02 * 24


def test_failed_cell_is_recorded():
    bad = {**SMALL, "methods": ["bp", "tv"], "tv": {"beta": -1.0}}
    res = run_sweep(Sweep.from_dict(bad))
    assert [r["status"] for r in res.rows][0] == "ok"
    assert res.rows[1]["status"].startswith("error: ValueError")


def test_outputs_are_deterministic(tmp_path):
    cfg = {"phantoms": [{"L": 20, "p": 2}, {"L": 20, "p": 4, "seed": 1}], "n_theta": [3, 8],
           "nsr": [0.0, 0.01], "methods": ["bp", "tv"], "tv": {"n_iter": 40}}
    (tmp_path / "sweep.json").write_text(json.dumps(cfg))
    sweep = Sweep.from_json(tmp_path / "sweep.json")
    run_sweep(sweep, tmp_path / "a")
    run_sweep(sweep, tmp_path / "b", workers=2)
    for name in ("results.csv", "manifest.json", "curves/error_vs_alpha.csv",
                 "curves/error_vs_nsr.csv", "curves/alpha_c_vs_rho.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "results.csv")))
    assert len(rows) == 2 * 2 * 2 * 2
    assert all(0 <= float(r["error_fraction"]) <= 1 for r in rows)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config_hash"] == sweep.config_hash()
    assert "bptomo" in manifest["software"]
    header = open(tmp_path / "a" / "curves" / "error_vs_nsr.csv").readline().strip()
    assert header == "x,y,series"
    assert (tmp_path / "a" / "timings.csv").exists()


def test_find_alpha_c_uniform_image():
    res = find_alpha_c(np.ones((32, 32), dtype=np.int8), [1, 2, 4, 8])
    assert res.n_theta == 1 and res.alpha_c == 32 / 1024
    with pytest.raises(ValueError):
        find_alpha_c(np.ones((8, 8)), [4, 2])


def test_find_alpha_c_checkerboard():
    res = find_alpha_c(checkerboard(16), [1, 2, 4], BpConfig(t_max=40))
    assert res.above_grid and res.alpha_c == ABOVE_GRID


def test_noise_free_rows_exact_well_above_rho():
    cfg = {"phantoms": [{"L": 64, "p": 6}], "n_theta": [12, 16], "methods": ["bp"]}
    res = run_sweep(Sweep.from_dict(cfg))
    for r in res.rows:
        assert r["alpha"] >= 2 * r["rho"]
        assert r["errors"] == 0
    assert estimate_alpha_c(res.rows)[0]["alpha_c"] == min(r["alpha"] for r in res.rows)


def test_bp_error_non_increasing_in_alpha_over_seeds():
    grid = [2, 3, 4, 6, 8]
    cfg = {"phantoms": [{"L": 48, "p": 5, "seed": s} for s in range(3)], "n_theta": grid,
           "methods": ["bp"], "bp": {"t_max": 100}}
    rows = run_sweep(Sweep.from_dict(cfg)).rows
    mean = [np.mean([r["error_fraction"] for r in rows if r["n_theta"] == n]) for n in grid]
    assert all(b <= a + 0.02 for a, b in zip(mean, mean[1:]))


@pytest.mark.slow
def test_noise_sweep_bp_not_worse_than_tv_at_small_noise():
    cfg = {"phantoms": [{"L": 128, "p": 14}], "n_theta": [32], "nsr": [0.002, 0.006, 0.01],
           "methods": ["bp", "tv"], "tv": {"beta": 3.0, "n_iter": 1000}}
    rows = run_sweep(Sweep.from_dict(cfg)).rows
    for nsr in cfg["nsr"]:
        err = {r["method"]: r["error_fraction"] for r in rows if r["nsr"] == nsr}
        assert err["bp"] <= err["tv"], nsr
