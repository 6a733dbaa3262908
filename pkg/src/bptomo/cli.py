"""Command-line interface: ``bptomo {phantom,project,reconstruct,sweep}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from .bp import BpConfig, reconstruct
from .geometry import add_noise, build_ray_set, project
from .harness import Sweep, error_fraction, run_sweep
from .io import read_pgm, read_sinogram, write_pgm, write_sinogram
from .phantom import PhantomSpec, boundary_density, generate_phantom
from .tv import TvConfig, gfb_reconstruct, optimize_beta, segment_continuous


def _geometry(text: str) -> tuple[int, int]:
    try:
        L, n = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("geometry must be 'L,n_theta'") from None
    return L, n


def cmd_phantom(args) -> int:
    spec = PhantomSpec(args.size, args.p, args.seed, args.c)
    img = generate_phantom(spec)
    rho = boundary_density(img)
    write_pgm(args.out, img, {"L": spec.L, "p": spec.p, "seed": spec.seed, "c": spec.c, "rho": rho})
    print(f"wrote {args.out} (L={spec.L}, p={spec.p}, rho={rho:.4f})")
    return 0


def cmd_project(args) -> int:
    img = read_pgm(args.image)
    rays = build_ray_set(img.shape[0], args.n_theta)
    sigma = args.sigma if args.sigma is not None else args.nsr * img.shape[0]
    sino = add_noise(project(img, rays), sigma, args.seed)
    write_sinogram(args.out, sino)
    print(f"wrote {args.out}: {rays.n_rays} rays, alpha={rays.alpha:.4f}, sigma={sigma:g}")
    return 0


def cmd_reconstruct(args) -> int:
    L, n_theta = args.geometry
    rays = build_ray_set(L, n_theta)
    sino = read_sinogram(args.sino, rays)
    truth = read_pgm(args.truth) if args.truth else None

    if args.method == "bp":
        cfg = BpConfig(J=args.J, t_max=args.tmax, noisy=args.noisy, eps=args.eps,
                       damping=args.damping, workers=args.workers)
        recon, rep = reconstruct(rays, sino, cfg, ground_truth=truth)
        if args.report:
            with open(args.report, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["iter", "flips", "errors", "max_field_delta"])
                w.writerows(rep.rows())
        summary = {"method": "bp", "iterations": rep.iterations, "termination": rep.termination}
    else:
        cfg = TvConfig(beta=args.beta, n_iter=args.tv_iter)
        if args.optimize_beta:
            if truth is None:
                parser_error("--optimize-beta needs --truth")
            cfg = TvConfig(**{**cfg.__dict__, "beta": optimize_beta(sino, rays, cfg, truth).beta})
        res = gfb_reconstruct(sino, rays, cfg, return_result=True)
        recon = segment_continuous(res.x, cfg.a, cfg.b)
        if args.report:
            with open(args.report, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["iter", "objective"])
                w.writerows(enumerate(res.objective))
        summary = {"method": "tv", "beta": cfg.beta, "iterations": res.iterations}

    if truth is not None:
        summary["error_fraction"] = error_fraction(recon, truth)
    write_pgm(args.out, recon, {"L": L, "n_theta": n_theta, **summary})
    print(json.dumps(summary))
    return 0


def cmd_sweep(args) -> int:
    sweep = Sweep.from_json(args.config)
    result = run_sweep(sweep, args.out, workers=args.workers)
    n_bad = sum(r["status"] != "ok" for r in result.rows)
    print(f"{len(result.rows)} cells written to {args.out} ({n_bad} failed)")
    for a in result.alpha_c:
        print(f"  phantom {a['phantom_index']}: rho={a['rho']:.4f} alpha_c={a['alpha_c']:.4f}")
    return 0


def parser_error(msg):
    raise SystemExit(f"error: {msg}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bptomo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a binary phantom")
    p.add_argument("--size", type=int, required=True, help="image side L")
    p.add_argument("--p", type=int, required=True, help="sqrt of the number of seed pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--c", type=float, default=1.0, help="Gaussian width factor (width = c L / p)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="compute a (noisy) sinogram of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--n-theta", type=int, required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--nsr", type=float, default=0.0, help="noise-to-signal ratio sigma / L")
    g.add_argument("--sigma", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("reconstruct", help="reconstruct an image from a sinogram")
    p.add_argument("--sino", required=True)
    p.add_argument("--geometry", type=_geometry, required=True, help="'L,n_theta'")
    p.add_argument("--method", choices=["bp", "tv"], default="bp")
    p.add_argument("--J", type=float, default=0.2)
    p.add_argument("--tmax", type=int, default=400)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--noisy", action="store_true", help="stop on the flip-count slope rule")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--optimize-beta", action="store_true")
    p.add_argument("--tv-iter", type=int, default=2000)
    p.add_argument("--truth")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sweep", help="run an experiment sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
