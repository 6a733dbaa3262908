"""Experiment sweeps: recovery phase diagram, noise robustness, BP vs TV."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bp import BpConfig, reconstruct
from .geometry import RaySet, add_noise, build_ray_set, project
from .phantom import PhantomSpec, boundary_density, generate_phantom
from .tv import TvConfig, gfb_reconstruct, optimize_beta, segment_continuous

log = logging.getLogger(__name__)

ABOVE_GRID = math.inf

SWEEP_SCHEMA = {
    "type": "object",
    "required": ["phantoms", "n_theta", "methods"],
    "additionalProperties": False,
    "properties": {
        "phantoms": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "required": ["L", "p"], "additionalProperties": False,
                "properties": {
                    "L": {"type": "integer", "minimum": 2},
                    "p": {"type": "integer", "minimum": 1},
                    "seed": {"type": "integer"},
                    "c": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "n_theta": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "nsr": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "methods": {"type": "array", "minItems": 1, "items": {"enum": ["bp", "tv"]}},
        "noise_seed": {"type": "integer"},
        "repeats": {"type": "integer", "minimum": 1},
        "bp": {"type": "object"},
        "tv": {"type": "object"},
        "workers": {"type": "integer", "minimum": 1},
    },
}


def error_fraction(recon: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of mismatched pixels."""
    recon, truth = np.asarray(recon), np.asarray(truth)
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {truth.shape}")
    return float(np.count_nonzero(recon != truth)) / truth.size


@dataclass
class AlphaC:
    """Critical undersampling rate of one image; ``alpha_c`` is ``ABOVE_GRID`` if nothing succeeded."""

    alpha_c: float
    n_theta: int | None
    runs: list = field(default_factory=list)

    @property
    def above_grid(self) -> bool:
        return self.alpha_c == ABOVE_GRID


def exact_recovery(image, n_theta: int, config: BpConfig | None = None):
    """Noise-free BP run; returns ``(success, alpha, report)``."""
    image = np.asarray(image)
    rays = build_ray_set(image.shape[0], n_theta)
    xr, rep = reconstruct(rays, project(image, rays), config, ground_truth=image)
    return bool(np.array_equal(xr, image)), rays.alpha, rep


def find_alpha_c(image, n_theta_grid, config: BpConfig | None = None) -> AlphaC:
    """Smallest undersampling rate of the grid with exact recovery.

    Runs noise-free BP from the largest ``n_theta`` downwards and stops at
    the first failure; exact recovery means zero errors within
    ``config.t_max`` iterations.
    """
    grid = list(n_theta_grid)
    if grid != sorted(grid):
        raise ValueError("n_theta grid must be sorted ascending")
    config = config or BpConfig(t_max=400)
    result = AlphaC(ABOVE_GRID, None)
    for n in reversed(grid):
        ok, alpha, rep = exact_recovery(image, n, config)
        result.runs.append({"n_theta": n, "alpha": alpha, "success": ok,
                            "iterations": rep.iterations, "errors": rep.errors[-1]})
        log.info("n_theta=%d alpha=%.4f success=%s iterations=%d", n, alpha, ok, rep.iterations)
        if not ok:
            break
        result.alpha_c, result.n_theta = alpha, n
    return result


def fit_through_origin(x, y) -> tuple[float, float]:
    """Least-squares slope of ``y = k x`` and its (centered) coefficient of determination."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    k = float((x @ y) / (x @ x))
    ss_res = float(np.sum((y - k * x) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return k, 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class Sweep:
    """A grid of reconstruction cells: phantom x n_theta x NSR x method x repeat."""

    phantoms: list
    n_theta: list
    methods: list
    nsr: list = field(default_factory=lambda: [0.0])
    noise_seed: int = 1
    repeats: int = 1
    bp: dict = field(default_factory=dict)
    tv: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ValueError("sweep needs at least one method")
        if not self.phantoms or not self.n_theta or not self.nsr:
            raise ValueError("sweep grids must be non-empty")
        bad = set(self.methods) - {"bp", "tv"}
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "Sweep":
        if "methods" in d and not d["methods"]:
            raise ValueError("sweep needs at least one method")
        jsonschema.validate(d, SWEEP_SCHEMA)
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "Sweep":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"phantoms": self.phantoms, "n_theta": self.n_theta, "methods": self.methods,
                "nsr": self.nsr, "noise_seed": self.noise_seed, "repeats": self.repeats,
                "bp": self.bp, "tv": self.tv, "workers": self.workers}

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def cells(self) -> list[dict]:
        out = []
        for (pi, ph), n, nsr, method, rep in product(enumerate(self.phantoms), self.n_theta,
                                                     self.nsr, self.methods, range(self.repeats)):
            out.append({"phantom_index": pi, "phantom": ph, "n_theta": n, "nsr": nsr,
                        "method": method, "repeat": rep})
        return out


RESULT_COLUMNS = ["phantom_index", "L", "p", "phantom_seed", "rho", "n_theta", "n_rays", "alpha",
                  "nsr", "sigma", "noise_seed", "method", "repeat", "beta", "errors",
                  "error_fraction", "iterations", "termination", "status"]


def run_cell(cell: dict, bp_options: dict, tv_options: dict, noise_seed: int) -> dict:
    """Run one reconstruction cell and return its result row (never raises)."""
    ph = cell["phantom"]
    spec = PhantomSpec(ph["L"], ph["p"], ph.get("seed", 0), ph.get("c", 1.0))
    row = {"phantom_index": cell["phantom_index"], "L": spec.L, "p": spec.p,
           "phantom_seed": spec.seed, "n_theta": cell["n_theta"], "nsr": cell["nsr"],
           "method": cell["method"], "repeat": cell["repeat"], "beta": "",
           "errors": "", "error_fraction": "", "iterations": "", "termination": "",
           "rho": "", "n_rays": "", "alpha": "", "sigma": "", "noise_seed": ""}
    t0 = time.perf_counter()
    try:
        truth = generate_phantom(spec)
        rays = build_ray_set(spec.L, cell["n_theta"])
        sigma = cell["nsr"] * spec.L
        seed = noise_seed + cell["repeat"]
        sino = add_noise(project(truth, rays), sigma, seed)
        row.update(rho=boundary_density(truth), n_rays=rays.n_rays, alpha=rays.alpha,
                   sigma=sigma, noise_seed=seed)
        if cell["method"] == "bp":
            cfg = BpConfig(**{"noisy": sigma > 0, **bp_options})
            recon, rep = reconstruct(rays, sino, cfg, ground_truth=truth)
            row.update(iterations=rep.iterations, termination=rep.termination)
        else:
            recon, extra = _run_tv(rays, sino, truth, tv_options)
            row.update(extra)
        row["errors"] = int(np.count_nonzero(recon != truth))
        row["error_fraction"] = error_fraction(recon, truth)
        row["status"] = "ok"
    except Exception as exc:  # recorded per row, the sweep goes on
        log.exception("cell failed: %s", cell)
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    row["wall_time"] = time.perf_counter() - t0
    return row


def _run_tv(rays: RaySet, sino, truth, options: dict):
    options = dict(options)
    search = options.pop("optimize_beta", False)
    bracket = tuple(options.pop("log_bracket", (-2.0, 2.0)))
    cfg = TvConfig(**options)
    if search:
        best = optimize_beta(sino, rays, cfg, truth, log_bracket=bracket)
        cfg = TvConfig(**{**cfg.__dict__, "beta": best.beta})
    res = gfb_reconstruct(sino, rays, cfg, return_result=True)
    seg = segment_continuous(res.x, cfg.a, cfg.b)
    return seg, {"beta": cfg.beta, "iterations": res.iterations, "termination": "done"}


@dataclass
class SweepResult:
    rows: list
    alpha_c: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def csv_body(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in RESULT_COLUMNS})
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _run_cell_args(args):
    return run_cell(*args)


def estimate_alpha_c(rows) -> list[dict]:
    """Per phantom: smallest alpha such that noise-free BP is exact there and at every larger alpha."""
    out = []
    groups: dict[int, list] = {}
    for r in rows:
        if r["method"] == "bp" and r["nsr"] == 0 and r["status"] == "ok":
            groups.setdefault(r["phantom_index"], []).append(r)
    for pi, rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: r["alpha"], reverse=True)
        alpha_c = ABOVE_GRID
        for r in rs:
            if r["errors"] != 0:
                break
            alpha_c = r["alpha"]
        out.append({"phantom_index": pi, "p": rs[0]["p"], "rho": rs[0]["rho"], "alpha_c": alpha_c})
    return out


def _curves(rows) -> dict[str, list]:
    """Mean error fraction per (series, x) for external plotting."""
    by_alpha: dict = {}
    by_nsr: dict = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        tag = f"{r['method']} p={r['p']}"
        by_alpha.setdefault((f"{tag} nsr={r['nsr']}", r["alpha"]), []).append(r["error_fraction"])
        by_nsr.setdefault((f"{tag} n_theta={r['n_theta']}", r["nsr"]), []).append(r["error_fraction"])
    return {
        "error_vs_alpha": [(x, float(np.mean(v)), s) for (s, x), v in sorted(by_alpha.items())],
        "error_vs_nsr": [(x, float(np.mean(v)), s) for (s, x), v in sorted(by_nsr.items())],
    }


def run_sweep(sweep: Sweep, out_dir=None, workers: int | None = None) -> SweepResult:
    """Run every cell of ``sweep``; optionally write results, manifest and curves to ``out_dir``.

    Cells run in a process pool when ``workers > 1``; rows always come back
    in cell order. ``results.csv`` is deterministic given the sweep; wall
    times go to ``timings.csv``.
    """
    if not sweep.methods:
        raise ValueError("sweep needs at least one method")
    workers = sweep.workers if workers is None else workers
    jobs = [(c, sweep.bp, sweep.tv, sweep.noise_seed) for c in sweep.cells()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_args, jobs))
    else:
        rows = [run_cell(*j) for j in jobs]

    result = SweepResult(rows, estimate_alpha_c(rows), _manifest(sweep))
    if out_dir is not None:
        write_sweep(result, out_dir)
    return result


def _manifest(sweep: Sweep) -> dict:
    import numba
    import scipy

    return {
        "config": sweep.to_dict(),
        "config_hash": sweep.config_hash(),
        "software": {"bptomo": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "numba": numba.__version__, "python": platform.python_version()},
    }


def write_sweep(result: SweepResult, out_dir) -> None:
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.csv_body())
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")
    with open(out / "timings.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["row", "wall_time"])
        for i, r in enumerate(result.rows):
            w.writerow([i, f"{r['wall_time']:.3f}"])
    curves = _curves(result.rows)
    curves["alpha_c_vs_rho"] = [(a["rho"], a["alpha_c"], "bp") for a in result.alpha_c]
    for name, pts in curves.items():
        with open(out / "curves" / f"{name}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["x", "y", "series"])
            for x, y, s in pts:
                w.writerow([_fmt(float(x)), _fmt(float(y)), s])
