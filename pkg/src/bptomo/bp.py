"""Belief-propagation reconstruction of binary images from line sums.

Every ray is a factor node. The factor-to-pixel messages are computed by
solving a one-dimensional Ising chain along the ray, in which the line-sum
constraint is replaced by a uniform field ``H`` tuned so that the expected
sum of the chain equals the measurement. All messages are stored as
fields (log-odds / 2) indexed by ray entry, in the flat layout of
:class:`~bptomo.geometry.RaySet`.

The chain sweeps and the per-ray field search run in compiled loops
(numba); everything else is vectorized numpy.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import RaySet, Sinogram

log = logging.getLogger(__name__)

ATANH_CLAMP = 1.0 - 1e-12

# solve_field status codes
SOLVED = 0
BRACKET_FAILURE = 1
NOT_CONVERGED = 2

TERMINATION_REASONS = ("constraints_satisfied", "flip_slope_stop", "t_max")


# ---------------------------------------------------------------------------
# compiled chain kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _atanh(x):
    if x > ATANH_CLAMP:
        x = ATANH_CLAMP
    elif x < -ATANH_CLAMP:
        x = -ATANH_CLAMP
    return math.atanh(x)


@numba.njit(cache=True, nogil=True)
def _sweep(h, tj, H, a, b, uL, uR, dL, dR):
    # uL[k]: message into entry k from its left neighbor, uR[k] from the right;
    # dL, dR their derivatives with respect to H.
    # tj[k] is tanh of the coupling between entries k - 1 and k.
    uL[a] = 0.0
    dL[a] = 0.0
    for k in range(a, b - 1):
        th = math.tanh(H + h[k] + uL[k])
        z = tj[k + 1] * th
        uL[k + 1] = _atanh(z)
        dL[k + 1] = tj[k + 1] * (1.0 - th * th) / (1.0 - z * z) * (1.0 + dL[k])
    uR[b - 1] = 0.0
    dR[b - 1] = 0.0
    for k in range(b - 1, a, -1):
        th = math.tanh(H + h[k] + uR[k])
        z = tj[k] * th
        uR[k - 1] = _atanh(z)
        dR[k - 1] = tj[k] * (1.0 - th * th) / (1.0 - z * z) * (1.0 + dR[k])


@numba.njit(cache=True, nogil=True)
def _chain_sum(h, uL, uR, H, a, b):
    m = 0.0
    for k in range(a, b):
        m += math.tanh(h[k] + uL[k] + uR[k] + H)
    return m


@numba.njit(cache=True, nogil=True)
def _residual(h, tj, H, y, a, b, uL, uR, dL, dR):
    """M(H) - y and dM/dH, leaving the messages of H in uL, uR."""
    _sweep(h, tj, H, a, b, uL, uR, dL, dR)
    m = 0.0
    dm = 0.0
    for k in range(a, b):
        t = math.tanh(h[k] + uL[k] + uR[k] + H)
        m += t
        dm += (1.0 - t * t) * (1.0 + dL[k] + dR[k])
    return m - y, dm


@numba.njit(cache=True, nogil=True)
def _solve_ray(h, tj, a, b, y, H0, eps, htol, B, max_iter, uL, uR, dL, dR):
    """Find H with |M(H) - y| <= eps on entries a:b; leaves the messages of the returned H."""
    n = b - a
    if y > n:
        y = float(n)
    elif y < -n:
        y = -float(n)
    lo = -B
    hi = B
    far_checked = False
    H = min(max(H0, -B), B)
    f, df = _residual(h, tj, H, y, a, b, uL, uR, dL, dR)
    for _ in range(max_iter):
        if abs(f) <= eps and (abs(f) <= htol * df or abs(f) <= 1e-9):
            return H, SOLVED
        if f < 0.0:
            lo = H
        else:
            hi = H
        Hn = 0.5 * (lo + hi)
        newton = False
        if abs(f) < 1.0 and df > 0.0:
            Hnewton = H - f / df
            if lo < Hnewton < hi:
                Hn = Hnewton
                newton = True
        if not newton and not far_checked:
            # make sure the root lies inside [-B, B] before bisecting towards it
            far_checked = True
            end = hi if f < 0.0 else lo
            fe, dfe = _residual(h, tj, end, y, a, b, uL, uR, dL, dR)
            if (f < 0.0 and fe < -eps) or (f > 0.0 and fe > eps):
                return end, BRACKET_FAILURE
            if abs(fe) <= eps:
                return end, SOLVED
        if hi - lo <= 1e-12 * max(1.0, abs(H)):
            break
        H = Hn
        f, df = _residual(h, tj, H, y, a, b, uL, uR, dL, dR)
    if abs(f) <= eps:
        return H, SOLVED
    return H, NOT_CONVERGED


@numba.njit(cache=True, nogil=True)
def _solve_rays(ray_ids, ptr, h, tj, y, H, eps, htol, B, max_iter, ht_new, status, uL, uR, dL, dR):
    for r in ray_ids:
        a = ptr[r]
        b = ptr[r + 1]
        Hr, st = _solve_ray(h, tj, a, b, y[r], H[r], eps, htol, B, max_iter, uL, uR, dL, dR)
        H[r] = Hr
        status[r] = st
        for k in range(a, b):
            ht_new[k] = uL[k] + uR[k] + Hr


# ---------------------------------------------------------------------------
# single-chain API
# ---------------------------------------------------------------------------

def effective_coupling(J: float, D) -> np.ndarray | float:
    """Coupling between two spins ``D`` steps apart on a ray: atanh(tanh(J)**D)."""
    D = np.asarray(D)
    if np.any(D < 1):
        raise ValueError("distance D must be >= 1")
    out = np.arctanh(np.clip(np.tanh(J) ** D, -ATANH_CLAMP, ATANH_CLAMP))
    return float(out) if out.ndim == 0 else out


@dataclass
class ChainWorkspace:
    """Left- and right-moving chain messages for one ray at one field ``H``.

    ``uL[k]`` enters spin ``k`` from spin ``k - 1``, ``uR[k]`` from spin
    ``k + 1``; ``couplings[k]`` couples spins ``k`` and ``k + 1``.
    """

    uL: np.ndarray
    uR: np.ndarray
    couplings: np.ndarray


def _chain_tanh(couplings, n):
    couplings = np.asarray(couplings, dtype=float)
    if couplings.ndim == 0:
        couplings = np.full(n - 1, float(couplings))
    if couplings.shape != (n - 1,):
        raise ValueError(f"a chain of {n} spins needs {n - 1} couplings")
    return couplings, np.concatenate(([0.0], np.tanh(couplings)))


def chain_sweep(h, H: float, couplings) -> ChainWorkspace:
    """Run both message sweeps along a chain with local fields ``h`` and uniform field ``H``."""
    h = np.ascontiguousarray(h, dtype=float)
    n = len(h)
    if n < 1:
        raise ValueError("empty chain")
    couplings, tj = _chain_tanh(couplings, n)
    uL, uR = np.empty(n), np.empty(n)
    _sweep(h, tj, float(H), 0, n, uL, uR, np.empty(n), np.empty(n))
    return ChainWorkspace(uL, uR, couplings)


def chain_marginals(h, ws: ChainWorkspace, H: float) -> np.ndarray:
    """Expected spin values tanh(h + uL + uR + H) along the chain."""
    return np.tanh(np.asarray(h, dtype=float) + ws.uL + ws.uR + H)


def chain_sum(h, ws: ChainWorkspace, H: float) -> float:
    """Expected line sum M(H) for the messages in ``ws`` (computed at the same H)."""
    h = np.ascontiguousarray(h, dtype=float)
    return float(_chain_sum(h, ws.uL, ws.uR, float(H), 0, len(h)))


def chain_sum_derivative(h, H: float, couplings) -> float:
    """Exact derivative dM/dH of the expected line sum, propagated through both sweeps."""
    h = np.ascontiguousarray(h, dtype=float)
    n = len(h)
    _, tj = _chain_tanh(couplings, n)
    buf = [np.empty(n) for _ in range(4)]
    return float(_residual(h, tj, float(H), 0.0, 0, n, *buf)[1])


def solve_field(h, couplings, y: float, eps: float = 0.05, B: float = 400.0,
                H0: float = 0.0, max_iter: int = 100,
                h_tol: float = 1e-4) -> tuple[float, ChainWorkspace, int]:
    """Find the uniform field H whose expected line sum matches ``y`` within ``eps``.

    Bisection on ``[-B, B]`` (narrowed by the warm start ``H0``), switching to
    Newton steps with the exact derivative once the residual drops below 1.
    A point is accepted when ``|M - y| <= eps`` and the Newton correction
    ``|M - y| / M'`` is at most ``h_tol``, so H itself is accurate to about
    ``h_tol`` wherever the chain is not saturated.

    Returns
    -------
    H : float
    workspace : ChainWorkspace
        Messages evaluated at the returned ``H``.
    status : int
        ``SOLVED``, ``BRACKET_FAILURE`` (target unreachable, H clamped to
        +-B) or ``NOT_CONVERGED``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    h = np.ascontiguousarray(h, dtype=float)
    n = len(h)
    couplings, tj = _chain_tanh(couplings, n)
    uL, uR = np.empty(n), np.empty(n)
    H, status = _solve_ray(h, tj, 0, n, float(y), float(H0), float(eps), float(h_tol),
                           float(B), int(max_iter), uL, uR, np.empty(n), np.empty(n))
    return float(H), ChainWorkspace(uL, uR, couplings), int(status)


def node_to_var_update(old, uL, uR, H, s: float, B: float = 400.0) -> np.ndarray:
    """Damped factor-to-pixel update ``s * old + (1 - s) * (uL + uR + H)``, clipped to [-B, B]."""
    new = np.asarray(uL) + np.asarray(uR) + H
    return np.clip(s * np.asarray(old) + (1.0 - s) * new, -B, B)


# ---------------------------------------------------------------------------
# message state on a full ray set
# ---------------------------------------------------------------------------

@dataclass
class BpConfig:
    """Settings of the BP reconstruction.

    ``damping=None`` selects ``max(0, 1 - 1.6 / n_theta)``. In noisy mode the
    run stops on the flip-count slope rule instead of on exact line sums.
    ``eps`` bounds the line-sum residual of each per-ray field and ``h_tol``
    the remaining Newton correction of that field.
    """

    J: float = 0.2
    damping: float | None = None
    clip: float = 400.0
    eps: float = 0.05
    h_tol: float = 1e-4
    t_max: int = 400
    noisy: bool = False
    flip_window: int = 5
    flip_ratio: float = 0.5
    schedule: str = "synchronous"
    extra_iterations: int = 0
    max_solver_iter: int = 100
    workers: int = 1

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip bound must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.h_tol <= 0:
            raise ValueError("h_tol must be positive")
        if self.damping is not None and not 0 <= self.damping < 1:
            raise ValueError("damping must be in [0, 1)")
        if self.schedule not in ("synchronous", "sequential"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")

    def damping_for(self, n_theta: int) -> float:
        if self.damping is not None:
            return self.damping
        return max(0.0, 1.0 - 1.6 / n_theta)


@dataclass
class MessageState:
    """All BP messages of one reconstruction, indexed by ray entry.

    ``ht[e]`` is the factor-to-pixel field of entry ``e`` (ray ``entry_ray[e]``
    to pixel ``pixels[e]``), ``h[e]`` the pixel-to-factor field on the same
    edge, and ``H[m]`` the uniform field of ray ``m``.
    """

    rays: RaySet
    ht: np.ndarray
    h: np.ndarray
    H: np.ndarray
    clip: float = 400.0

    def total_field(self) -> np.ndarray:
        """Sum of incoming factor fields at each pixel (flat)."""
        return np.bincount(self.rays.pixels, weights=self.ht, minlength=self.rays.n_pixels)

    def refresh_h(self, entries: slice | None = None) -> None:
        """Recompute pixel-to-factor fields from the current ``ht``."""
        tot = self.total_field()
        if entries is None:
            entries = slice(None)
        px = self.rays.pixels[entries]
        self.h[entries] = np.clip(tot[px] - self.ht[entries], -self.clip, self.clip)

    def magnetization(self) -> np.ndarray:
        return np.tanh(self.total_field()).reshape(self.rays.L, self.rays.L)


def init_messages(rays: RaySet, sino: Sinogram, clip: float = 400.0) -> MessageState:
    """Start from the independent-spin solution ht = atanh(y / N) on every ray."""
    ratio = np.clip(np.asarray(sino.values, dtype=float) / rays.lengths, -ATANH_CLAMP, ATANH_CLAMP)
    ht = np.clip(np.arctanh(ratio), -clip, clip)[rays.entry_ray]
    state = MessageState(rays, ht, np.zeros_like(ht), np.zeros(rays.n_rays), clip)
    state.refresh_h()
    return state


def var_to_node(state: MessageState, pixel: int, ray: int) -> float:
    """Field sent by ``pixel`` to ``ray``: sum of the other rays' fields at that pixel."""
    rays = state.rays
    a, b = rays.ptr[ray], rays.ptr[ray + 1]
    if pixel not in rays.pixels[a:b]:
        raise ValueError(f"pixel {pixel} is not on ray {ray}")
    mask = (rays.pixels == pixel) & (rays.entry_ray != ray)
    return float(np.clip(state.ht[mask].sum(), -state.clip, state.clip))


def segment(state: MessageState) -> np.ndarray:
    """Most likely spin per pixel: sign of the total incoming field, with sign(0) = +1."""
    tot = state.total_field()
    return np.where(tot >= 0, 1, -1).astype(np.int8).reshape(state.rays.L, state.rays.L)


# ---------------------------------------------------------------------------
# stopping rules
# ---------------------------------------------------------------------------

def _log_slope(values):
    g = np.log(np.maximum(np.asarray(values, dtype=float), 1.0))
    t = np.arange(len(g), dtype=float)
    t -= t.mean()
    return float((t * (g - g.mean())).sum() / (t * t).sum())


def flip_slope_stop(flips, window: int = 5, ratio: float = 0.5) -> bool:
    """Detect the slowdown of the decay of flipped-spin counts.

    The decay rate is minus the least-squares slope of ``log(max(flips, 1))``
    over a window. Returns True when the rate over the last ``window``
    iterations is below ``ratio`` times the rate over the ``window``
    iterations before, provided that earlier rate was a genuine decay. A
    window with no flips at all also stops.
    """
    flips = list(flips)
    if len(flips) < 2 * window:
        return False
    recent = flips[-window:]
    before = flips[-2 * window:-window]
    if max(recent) == 0:
        return True
    rate_before = -_log_slope(before)
    rate_recent = -_log_slope(recent)
    return rate_before > 0 and rate_recent < ratio * rate_before


def admissible_sums(sino: Sinogram) -> np.ndarray:
    """Round each measurement to the nearest integer with the parity of its ray length."""
    n = np.asarray(sino.n_pixels)
    return n - 2 * np.round((n - np.asarray(sino.values)) / 2.0)


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

@dataclass
class ReconReport:
    """Per-iteration trace and outcome of a BP run.

    ``flips[t]`` counts pixels whose segmentation changed at iteration
    ``t + 1``; ``errors`` is filled only when a ground truth was supplied.
    """

    flips: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    max_field_delta: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    failed_rays: list = field(default_factory=list)
    iterations: int = 0
    termination: str = ""
    converged_at: int | None = None
    segmentation: np.ndarray | None = None
    magnetization: np.ndarray | None = None
    state: MessageState | None = field(default=None, repr=False)

    def rows(self):
        """Rows ``(iter, flips, errors, max_field_delta)`` for the CSV report."""
        for t in range(len(self.flips)):
            err = self.errors[t] if self.errors else ""
            yield t + 1, self.flips[t], err, self.max_field_delta[t]


class BpSolver:
    """Iterates the BP equations on one ray geometry and sinogram.

    Keeps the compiled-kernel scratch buffers so that :meth:`step` can be
    called repeatedly; :func:`reconstruct` is the usual entry point.
    """

    def __init__(self, rays: RaySet, sino: Sinogram, config: BpConfig | None = None):
        sino.check_geometry(rays)
        self.rays = rays
        self.sino = sino
        self.config = config or BpConfig()
        self.damping = self.config.damping_for(rays.n_theta)
        self.y = np.ascontiguousarray(sino.values, dtype=float)
        self.state = init_messages(rays, sino, self.config.clip)
        tj = np.zeros(len(rays.pixels))
        link = rays.steps > 0
        tj[link] = np.tanh(effective_coupling(self.config.J, rays.steps[link]))
        self.tj = tj
        self.ht_new = np.empty_like(self.state.ht)
        self.uL = np.empty_like(self.state.ht)
        self.uR = np.empty_like(self.state.ht)
        self.dL = np.empty_like(self.state.ht)
        self.dR = np.empty_like(self.state.ht)
        self.status = np.zeros(rays.n_rays, dtype=np.int64)
        self._pool = None

    # the ray batches of one pass: all rays at once, or one angle at a time
    def _batches(self):
        if self.config.schedule == "synchronous":
            return [np.arange(self.rays.n_rays)]
        ap = self.rays.angle_ptr
        return [np.arange(ap[k], ap[k + 1]) for k in range(self.rays.n_theta)]

    def _solve_batch(self, ray_ids):
        st = self.state
        cfg = self.config
        args = (self.rays.ptr, st.h, self.tj, self.y, st.H, cfg.eps, cfg.h_tol, cfg.clip,
                cfg.max_solver_iter, self.ht_new, self.status, self.uL, self.uR, self.dL, self.dR)
        workers = self.config.workers
        if workers <= 1 or len(ray_ids) < 2 * workers:
            _solve_rays(ray_ids, *args)
            return
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=workers)
        chunks = np.array_split(ray_ids, workers)
        list(self._pool.map(lambda ids: _solve_rays(ids, *args), chunks))

    def step(self) -> float:
        """One outer iteration over all rays; returns the largest change of ``ht``."""
        st, rays, s, B = self.state, self.rays, self.damping, self.config.clip
        max_delta = 0.0
        for ray_ids in self._batches():
            a, b = rays.ptr[ray_ids[0]], rays.ptr[ray_ids[-1] + 1]
            st.refresh_h(slice(a, b))
            self._solve_batch(ray_ids)
            new = np.clip(s * st.ht[a:b] + (1.0 - s) * self.ht_new[a:b], -B, B)
            max_delta = max(max_delta, float(np.max(np.abs(new - st.ht[a:b]))))
            st.ht[a:b] = new
        st.refresh_h()
        return max_delta

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def reconstruct(rays: RaySet, sino: Sinogram, config: BpConfig | None = None,
                ground_truth: np.ndarray | None = None) -> tuple[np.ndarray, ReconReport]:
    """Reconstruct a {-1, +1} image from its line sums by belief propagation.

    Noise-free runs stop as soon as the segmentation reproduces every line
    sum (after ``config.extra_iterations`` more iterations, if requested);
    noisy runs stop on :func:`flip_slope_stop`. Otherwise the run ends at
    ``t_max`` and returns the segmentation with the smallest line-sum
    residual seen.
    """
    config = config or BpConfig()
    solver = BpSolver(rays, sino, config)
    target = admissible_sums(sino)
    truth = None if ground_truth is None else np.asarray(ground_truth).reshape(rays.L, rays.L)
    report = ReconReport()

    x = segment(solver.state)
    best_x, best_res = x, np.inf
    try:
        for t in range(1, config.t_max + 1):
            delta = solver.step()
            x_new = segment(solver.state)
            report.flips.append(int(np.count_nonzero(x_new != x)))
            x = x_new
            res = float(np.abs(rays.forward(x) - (sino.values if config.noisy else target)).sum())
            report.residual.append(res)
            report.max_field_delta.append(delta)
            report.failed_rays.append(int(np.count_nonzero(solver.status == BRACKET_FAILURE)))
            if truth is not None:
                report.errors.append(int(np.count_nonzero(x != truth)))
            if res < best_res:
                best_x, best_res = x, res
            report.iterations = t

            if config.noisy:
                if flip_slope_stop(report.flips, config.flip_window, config.flip_ratio):
                    report.termination = "flip_slope_stop"
                    break
            elif res == 0:
                if report.converged_at is None:
                    report.converged_at = t
                if t - report.converged_at >= config.extra_iterations:
                    report.termination = "constraints_satisfied"
                    break
            else:
                report.converged_at = None
        else:
            report.termination = "t_max"
            x = best_x
    finally:
        solver.close()

    log.debug("bp: %s after %d iterations", report.termination, report.iterations)
    report.segmentation = x
    report.magnetization = solver.state.magnetization()
    report.state = solver.state
    return x, report
