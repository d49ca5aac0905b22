"""Probabilistic surface fitting with oriented Gaussian mixtures.

Implements the EM-style solver family: exact conditional maximisation (ECM,
full quasi-Newton inner loop), generalised EM (GEM, one quasi-Newton step),
the fast frozen-precision linear update (ANISO), and its guarded variant
(ANISOc) that verifies ascent of the exact objective and falls back to a
single quasi-Newton step on violation. ISO is the isotropic special case.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import _core
from .errors import DegenerateNormalError, LabelMismatchError, NumericalError
from .geometry import SparsePointSet, _degeneracy_scale, vertex_normals
from .model import ShapeModel, deform, prior_log_density

__all__ = [
    "VARIANTS",
    "FitConfig",
    "FitState",
    "FitResult",
    "init_sigma2",
    "e_step",
    "q_value",
    "q_gradient",
    "m_step_linear",
    "m_step_quasi_newton",
    "check_ascent",
    "sigma2_update",
    "fit",
]

VARIANTS = ("ISO", "ANISO", "ANISOc", "GEM", "ECM")
_CANONICAL = {v.upper(): v for v in VARIANTS}


def _points_array(points: Union[SparsePointSet, np.ndarray]) -> np.ndarray:
    if isinstance(points, SparsePointSet):
        return points.points
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (P, 3), got {pts.shape}")
    return pts


def _point_labels(points) -> Optional[np.ndarray]:
    return points.labels if isinstance(points, SparsePointSet) else None


@dataclass
class FitConfig:
    """Solver selection and tolerances for :func:`fit`."""

    variant: str = "ANISO"
    eta: float = 1.0
    max_outer_iters: int = 200
    outer_tol: float = 1e-8
    qn_max_iters: int = 50
    qn_grad_tol: float = 1e-6
    sigma2_floor: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        key = str(self.variant).upper()
        if key not in _CANONICAL:
            raise ValueError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}"
            )
        self.variant = _CANONICAL[key]
        if self.variant == "ISO":
            self.eta = 1.0
        if self.eta < 1.0:
            raise ValueError(f"eta must be >= 1, got {self.eta}")
        for name in ("outer_tol", "qn_grad_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_outer_iters < 1 or self.qn_max_iters < 1:
            raise ValueError("iteration caps must be >= 1")


@dataclass
class FitResult:
    """Solver output: parameters, convergence record, and per-iteration traces."""

    variant: str
    eta: float
    alpha: np.ndarray
    sigma2: Optional[float]
    iterations: int
    converged: bool
    fallback_count: int = 0
    q_trace: Optional[list] = None
    wall_times: Optional[list] = None
    residual_trace: Optional[list] = None
    # diagnostics kept in memory only (not part of the result file format)
    stalled_count: int = 0
    alpha_trace: Optional[list] = None
    trace_elapsed: Optional[list] = None


def init_sigma2(model: ShapeModel, points) -> float:
    """Mean squared point/vertex distance over all pairs, divided by 3."""
    pts = _points_array(points)
    d = _core.aniso_sqdist(pts, model.mean_vertices, None, 1.0)
    return float(d.sum() / (3.0 * d.size))


def _label_mask(
    point_labels: Optional[np.ndarray], vertex_labels: Optional[np.ndarray]
) -> Optional[np.ndarray]:
    """(P, N) admissibility mask, or None when the point set is unlabelled."""
    if point_labels is None:
        return None
    if vertex_labels is None:
        raise LabelMismatchError("points carry labels but the model has none")
    mask = point_labels[:, None] == vertex_labels[None, :]
    bad = ~mask.any(axis=1)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise LabelMismatchError(
            f"point {j} has label {point_labels[j]} with no matching model component"
        )
    return mask


def _stabilised_rows(logits: np.ndarray):
    """Row-wise softmax in log space; returns (responsibilities, row logsumexp)."""
    rowmax = logits.max(axis=1)
    if not np.all(np.isfinite(rowmax)):
        raise NumericalError(
            "a responsibility row has no admissible component or non-finite logits "
            "(collapsed sigma^2?)"
        )
    shifted = np.exp(logits - rowmax[:, None])
    t = shifted.sum(axis=1)
    if np.any(t == 0.0):
        raise NumericalError("stabilised responsibility row sums underflowed to zero")
    return shifted / t[:, None], rowmax + np.log(t)


def e_step(
    positions: np.ndarray,
    precisions: np.ndarray,
    sigma2: float,
    points,
    point_labels: Optional[np.ndarray] = None,
    vertex_labels: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Posterior component responsibilities, shape (P, N).

    Row ``j`` holds ``exp(-(p_j - y_i)^T W_i (p_j - y_i) / (2 sigma^2))``
    normalised over the admissible components, computed in log space. When
    labels are present, entries for components of a different object are
    exactly zero.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    pts = _points_array(points)
    if point_labels is None:
        point_labels = _point_labels(points)
    positions = np.asarray(positions, dtype=float)
    precisions = np.asarray(precisions, dtype=float)
    diff = pts[:, None, :] - positions[None, :, :]
    d = np.einsum("jna,nab,jnb->jn", diff, precisions, diff)
    logits = d * (-0.5 / sigma2)
    mask = _label_mask(point_labels, vertex_labels)
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    resp, _ = _stabilised_rows(logits)
    if mask is not None:
        resp[~mask] = 0.0
    return resp


def _estep_oriented(
    pts: np.ndarray,
    positions: np.ndarray,
    normals: Optional[np.ndarray],
    eta: float,
    sigma2: float,
    mask: Optional[np.ndarray],
):
    """Fast-path E-step for oriented precisions; returns (resp, data log-likelihood).

    The returned log-likelihood is the exact mixture log density of all points
    (component weights uniform over admissible components, Gaussian
    normalisers included), i.e. the tight value of the evidence bound at the
    expansion point.
    """
    d = _core.aniso_sqdist(pts, positions, normals if eta != 1.0 else None, eta)
    logits = d * (-0.5 / sigma2)
    if eta != 1.0:
        # 0.5 log det(W_i): log(eta) for oriented components, 0 for the
        # identity fallback at degenerate normals
        live = (normals != 0.0).any(axis=1)
        if np.all(live):
            logits += 0.5 * np.log(eta)
        else:
            logits += np.where(live, 0.5 * np.log(eta), 0.0)[None, :]
    P = pts.shape[0]
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
        log_weights = float(np.log(mask.sum(axis=1)).sum())
    else:
        log_weights = P * np.log(positions.shape[0])
    resp, row_lse = _stabilised_rows(logits)
    if mask is not None:
        resp[~mask] = 0.0
    loglik = float(row_lse.sum()) - log_weights - 1.5 * P * np.log(2.0 * np.pi * sigma2)
    return resp, loglik


class _MStepContext:
    """Responsibility-collapsed moments for repeated Q and gradient evaluation.

    With responsibilities fixed, the data term of Q and its gradient only need
    per-component moments (mass, weighted point sum, weighted second moment),
    so a single O(NP) pass makes every subsequent evaluation O(NM).
    """

    def __init__(self, model: ShapeModel, pts: np.ndarray, resp: np.ndarray,
                 eta: float, degenerate: str = "raise"):
        self.model = model
        self.pts = pts
        self.resp = resp
        self.eta = float(eta)
        self.degenerate = degenerate
        self.phi = model.mode_blocks  # (N, 3, M)
        self.inv_lam = 1.0 / model.eigenvalues
        self.R = resp.sum(axis=0)  # (N,)
        self.s = resp.T @ pts  # (N, 3)
        # constant over alpha: sum_j (sum_i r_ji) |p_j|^2
        self.p2 = float(resp.sum(axis=1) @ (pts**2).sum(axis=1))
        self._pp = None
        nn = model.topology.normal_neighbors
        self.i2 = nn[:, 0]
        self.i3 = nn[:, 1]
        self.u2 = self.phi[self.i2] - self.phi  # (N, 3, M), constant
        self.u3 = self.phi[self.i3] - self.phi

    @property
    def pp(self) -> np.ndarray:
        """Weighted second point moments sum_j r_ji p_j p_j^T, shape (N, 3, 3)."""
        if self._pp is None:
            P = self.pts.shape[0]
            outer = np.einsum("ja,jb->jab", self.pts, self.pts).reshape(P, 9)
            self._pp = (self.resp.T @ outer).reshape(-1, 3, 3)
        return self._pp

    def positions(self, alpha: np.ndarray) -> np.ndarray:
        return deform(self.model, alpha)

    def normals(self, positions: np.ndarray) -> np.ndarray:
        return vertex_normals(positions, self.model.topology, degenerate=self.degenerate)

    def data_sqsum(self, positions: np.ndarray, normals: Optional[np.ndarray]) -> float:
        """sum_{i,j} r_ji (p_j - y_i)^T W_i (p_j - y_i) from cached moments."""
        y2 = (positions**2).sum(axis=1)
        total = self.p2 + float(self.R @ y2) - 2.0 * float(np.einsum("na,na->", self.s, positions))
        if self.eta != 1.0:
            n = normals
            ppn = np.einsum("nab,nb->na", self.pp, n)
            yn = (positions * n).sum(axis=1)
            sn = (self.s * n).sum(axis=1)
            quad = float(np.einsum("na,na->", ppn, n))
            total += (self.eta - 1.0) * float(quad - 2.0 * (yn @ sn) + self.R @ yn**2)
        return total

    def q(self, alpha: np.ndarray, sigma2: float,
          frozen_normals: Optional[np.ndarray] = None) -> float:
        positions = self.positions(alpha)
        normals = None
        if self.eta != 1.0:
            normals = frozen_normals if frozen_normals is not None else self.normals(positions)
        data = self.data_sqsum(positions, normals)
        P = self.pts.shape[0]
        return float(
            -0.5 * alpha @ (self.inv_lam * alpha)
            - 1.5 * P * np.log(sigma2)
            - data / (2.0 * sigma2)
        )

    def grad(self, alpha: np.ndarray, sigma2: float) -> np.ndarray:
        """Gradient of the exact Q with respect to alpha."""
        y = self.positions(alpha)
        v = self.s - self.R[:, None] * y  # (N, 3): sum_j r_ji (p_j - y_i)
        if self.eta == 1.0:
            wv = v
            g1 = np.einsum("nam,na->m", self.phi, wv)
            return -self.inv_lam * alpha + g1 / sigma2

        e2 = y[self.i2] - y
        e3 = y[self.i3] - y
        b = np.cross(e2, e3)
        bn = np.linalg.norm(b, axis=1)
        live = bn > 0.0
        # degeneracy consistent with vertex_normals: zero normal, zero derivative
        bad = (bn < 1e-12 * _degeneracy_scale(y, self.model.topology)) | (bn == 0.0)
        if np.any(bad):
            if self.degenerate == "raise":
                idx = int(np.flatnonzero(bad)[0])
                raise DegenerateNormalError(
                    f"designated triangle at vertex {idx} degenerates at this alpha"
                )
            live = ~bad
        n = np.zeros_like(b)
        n[live] = b[live] / bn[live, None]

        nv = (n * v).sum(axis=1)
        wv = v + (self.eta - 1.0) * n * nv[:, None]
        g1 = np.einsum("nam,na->m", self.phi, wv)

        # t_i = S_i n_i with S_i = PP_i - s_i y_i^T - y_i s_i^T + R_i y_i y_i^T
        yn = (y * n).sum(axis=1)
        sn = (self.s * n).sum(axis=1)
        t = (
            np.einsum("nab,nb->na", self.pp, n)
            - self.s * yn[:, None]
            - y * sn[:, None]
            + (self.R * yn)[:, None] * y
        )

        # derivative of the unnormalised normal b_i per mode
        db = np.cross(self.u2.transpose(0, 2, 1), e3[:, None, :]) + np.cross(
            e2[:, None, :], self.u3.transpose(0, 2, 1)
        )  # (N, M, 3)
        bdotdb = np.einsum("na,nma->nm", b, db)
        dn = np.zeros_like(db)
        dn[live] = (
            db[live] / bn[live, None, None]
            - b[live, None, :] * bdotdb[live, :, None] / (bn[live, None, None] ** 3)
        )
        h = 2.0 * (self.eta - 1.0) * np.einsum("na,nma->m", t, dn)
        return -self.inv_lam * alpha - (h - 2.0 * g1) / (2.0 * sigma2)


def q_value(
    alpha: np.ndarray,
    sigma2: float,
    responsibilities: np.ndarray,
    model: ShapeModel,
    points,
    eta: float,
    normals_at: Optional[np.ndarray] = None,
    degenerate: str = "raise",
) -> float:
    """Objective value at ``alpha`` (additive constant fixed to zero).

    With ``normals_at=None`` the oriented precisions are re-evaluated at
    ``alpha`` (exact objective); passing the expansion point's parameters
    freezes them there (concave surrogate).
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    pts = _points_array(points)
    ctx = _MStepContext(model, pts, np.asarray(responsibilities, dtype=float),
                        eta, degenerate=degenerate)
    alpha = np.asarray(alpha, dtype=float)
    frozen = None
    if normals_at is not None and eta != 1.0:
        frozen = ctx.normals(ctx.positions(np.asarray(normals_at, dtype=float)))
    return ctx.q(alpha, sigma2, frozen_normals=frozen)


def q_gradient(
    alpha: np.ndarray,
    sigma2: float,
    responsibilities: np.ndarray,
    model: ShapeModel,
    points,
    eta: float,
    degenerate: str = "raise",
) -> np.ndarray:
    """Gradient of the exact objective with respect to ``alpha``."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    pts = _points_array(points)
    ctx = _MStepContext(model, pts, np.asarray(responsibilities, dtype=float),
                        eta, degenerate=degenerate)
    return ctx.grad(np.asarray(alpha, dtype=float), sigma2)


@dataclass
class FitState:
    """One expansion point of the outer loop, as consumed by the M-step ops."""

    model: ShapeModel
    points: np.ndarray
    eta: float
    alpha: np.ndarray
    sigma2: float
    resp: np.ndarray
    positions: np.ndarray
    normals: np.ndarray
    degenerate: str = "zero"
    qn_max_iters: int = 50
    qn_grad_tol: float = 1e-6
    _ctx: Optional[_MStepContext] = field(default=None, repr=False)

    @property
    def ctx(self) -> _MStepContext:
        if self._ctx is None:
            self._ctx = _MStepContext(
                self.model, self.points, self.resp, self.eta, degenerate=self.degenerate
            )
        return self._ctx


def m_step_linear(state: FitState) -> np.ndarray:
    """Maximiser of the frozen-precision surrogate via the SPD system A alpha = b."""
    ctx = state.ctx
    phi = ctx.phi
    eta = state.eta
    n = state.normals
    if eta != 1.0:
        nphi = np.einsum("na,nam->nm", n, phi)
        wphi = phi + (eta - 1.0) * n[:, :, None] * nphi[:, None, :]
    else:
        wphi = phi
    A = np.einsum("n,nam,nak->mk", ctx.R, phi, wphi)
    A = 0.5 * (A + A.T)
    A[np.diag_indices_from(A)] += state.sigma2 * ctx.inv_lam

    v = ctx.s - ctx.R[:, None] * state.model.mean_vertices
    if eta != 1.0:
        wv = v + (eta - 1.0) * n * (n * v).sum(axis=1)[:, None]
    else:
        wv = v
    b = np.einsum("nam,na->m", phi, wv)
    try:
        return cho_solve(cho_factor(A, lower=True), b)
    except LinAlgError as exc:
        raise NumericalError(f"surrogate system is not positive definite: {exc}") from exc


def check_ascent(alpha_new: np.ndarray, state: FitState) -> bool:
    """True iff the exact objective at ``alpha_new`` does not decrease."""
    ctx = state.ctx
    q_old = ctx.q(state.alpha, state.sigma2)
    q_new = ctx.q(np.asarray(alpha_new, dtype=float), state.sigma2)
    return q_new >= q_old - 1e-12 * abs(q_old)


def _wolfe_line_search(f, g_dot, f0, slope0, c1=1e-4, c2=0.9, max_trials=20):
    """Strong-Wolfe step for a descent direction; returns t or None.

    ``f(t)`` evaluates the objective along the ray, ``g_dot(t)`` its
    directional derivative; ``slope0 < 0`` is required.
    """
    t_prev, f_prev = 0.0, f0
    t = 1.0
    lo = hi = f_lo = None
    for trial in range(max_trials):
        ft = f(t)
        if ft > f0 + c1 * t * slope0 or (trial > 0 and ft >= f_prev):
            lo, f_lo, hi = t_prev, f_prev, t
            break
        st = g_dot(t)
        if abs(st) <= -c2 * slope0:
            return t
        if st >= 0.0:
            lo, f_lo, hi = t, ft, t_prev
            break
        t_prev, f_prev = t, ft
        t *= 2.0
    else:
        return None
    for _ in range(max_trials):
        t = 0.5 * (lo + hi)
        ft = f(t)
        if ft > f0 + c1 * t * slope0 or ft >= f_lo:
            hi = t
        else:
            st = g_dot(t)
            if abs(st) <= -c2 * slope0:
                return t
            if st * (hi - lo) >= 0.0:
                hi = lo
            lo, f_lo = t, ft
    return None


def m_step_quasi_newton(state: FitState, mode: str = "full"):
    """BFGS ascent on the exact objective from the expansion point.

    ``mode='full'`` iterates to the gradient tolerance or the iteration cap;
    ``mode='single_step'`` performs exactly one accepted step. Returns
    ``(alpha, stalled)``; on line-search failure before any accepted step the
    expansion point is returned unchanged with ``stalled=True``.
    """
    if mode not in ("full", "single_step"):
        raise ValueError(f"mode must be 'full' or 'single_step', got {mode!r}")
    ctx = state.ctx
    sigma2 = state.sigma2
    x = np.asarray(state.alpha, dtype=float).copy()
    m = x.size

    def fneg(a):
        return -ctx.q(a, sigma2)

    def gneg(a):
        return -ctx.grad(a, sigma2)

    g = gneg(x)
    f = fneg(x)
    H = np.eye(m) / (1.0 + np.linalg.norm(g))
    accepted = 0
    stalled = False
    max_iters = 1 if mode == "single_step" else state.qn_max_iters
    for _ in range(max_iters):
        gnorm = np.linalg.norm(g)
        if gnorm < state.qn_grad_tol:
            break
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0.0:  # safeguard: reset to scaled steepest descent
            H = np.eye(m) / (1.0 + gnorm)
            p = -H @ g
            slope = float(g @ p)

        cache = {}

        def f_line(t, _x=x, _p=p):
            if t not in cache:
                cache[t] = (fneg(_x + t * _p), None)
            return cache[t][0]

        def g_line(t, _x=x, _p=p):
            val = cache.get(t)
            if val is None or val[1] is None:
                gv = gneg(_x + t * _p)
                cache[t] = (cache[t][0] if val else fneg(_x + t * _p), gv)
            return float(cache[t][1] @ _p)

        t = _wolfe_line_search(f_line, g_line, f, slope)
        if t is None:
            stalled = accepted == 0
            break
        x_new = x + t * p
        cached = cache.get(t)
        g_new = cached[1] if cached and cached[1] is not None else gneg(x_new)
        s = t * p
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            Hy = H @ yv
            H = (
                H
                - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                + rho * (rho * float(yv @ Hy) + 1.0) * np.outer(s, s)
            )
        f = f_line(t)
        x, g = x_new, g_new
        accepted += 1
    return x, stalled


def sigma2_update(
    alpha: np.ndarray,
    responsibilities: np.ndarray,
    model: ShapeModel,
    points,
    eta: float,
    floor: float = 0.0,
    degenerate: str = "raise",
) -> float:
    """Responsibility-weighted mean oriented squared residual over 3P, floored."""
    pts = _points_array(points)
    positions = deform(model, np.asarray(alpha, dtype=float))
    normals = None
    if eta != 1.0:
        normals = vertex_normals(positions, model.topology, degenerate=degenerate)
    total = _core.weighted_aniso_sqsum(
        np.asarray(responsibilities, dtype=float), pts, positions, normals, eta
    )
    return max(total / (3.0 * pts.shape[0]), floor)


def fit(
    model: ShapeModel,
    points,
    config: FitConfig,
    time_budget: Optional[float] = None,
) -> FitResult:
    """Run the outer EM loop of the selected variant.

    Starts from ``alpha = 0`` with the mean-squared-distance initial scale,
    alternates responsibilities and parameter updates, and stops on a relative
    change of the objective below ``outer_tol`` or at the iteration cap. The
    recorded trace holds the exact log posterior of each iterate, which is
    non-decreasing for the ascent-guaranteed variants (ECM, GEM, ANISOc).
    """
    pts = _points_array(points)
    labels = _point_labels(points)
    mask = _label_mask(labels, model.vertex_labels)
    eta = config.eta
    use_linear_always = eta == 1.0 or config.variant in ("ISO", "ANISO")

    diag2 = model.bounding_box_diagonal() ** 2
    floor = config.sigma2_floor if config.sigma2_floor is not None else 1e-12 * diag2
    alpha = np.zeros(model.num_modes)
    sigma2 = max(init_sigma2(model, pts), floor)

    warned_degenerate = False

    def normals_at(positions):
        nonlocal warned_degenerate
        n = vertex_normals(positions, model.topology, degenerate="zero")
        if not warned_degenerate and np.any((n == 0.0).all(axis=1)):
            warnings.warn(
                "degenerate normal triangle; using identity precision for the "
                "affected vertices this iteration",
                stacklevel=2,
            )
            warned_degenerate = True
        return n

    positions = model.mean_vertices
    normals = normals_at(positions)

    q_trace: list = []
    wall_times: list = []
    trace_elapsed: list = []
    alpha_trace: list = []
    sigma_trace: list = []
    fallback_count = 0
    stalled_count = 0
    converged = False
    run_t0 = time.perf_counter()

    for it in range(config.max_outer_iters + 1):
        it_t0 = time.perf_counter()
        resp, loglik = _estep_oriented(pts, positions, normals, eta, sigma2, mask)
        q_now = loglik + prior_log_density(model, alpha)
        q_trace.append(q_now)
        trace_elapsed.append(time.perf_counter() - run_t0)
        alpha_trace.append(alpha.copy())
        sigma_trace.append(sigma2)

        if len(q_trace) >= 2 and abs(q_trace[-1] - q_trace[-2]) < config.outer_tol * abs(
            q_trace[-2]
        ):
            converged = True
            wall_times.append(time.perf_counter() - it_t0)
            break
        if it == config.max_outer_iters:
            wall_times.append(time.perf_counter() - it_t0)
            break
        if time_budget is not None and trace_elapsed[-1] > time_budget:
            wall_times.append(time.perf_counter() - it_t0)
            break

        state = FitState(
            model=model,
            points=pts,
            eta=eta,
            alpha=alpha,
            sigma2=sigma2,
            resp=resp,
            positions=positions,
            normals=normals,
            degenerate="zero",
            qn_max_iters=config.qn_max_iters,
            qn_grad_tol=config.qn_grad_tol,
        )
        if use_linear_always:
            alpha_new = m_step_linear(state)
        elif config.variant == "ANISOc":
            alpha_new = m_step_linear(state)
            if not check_ascent(alpha_new, state):
                fallback_count += 1
                alpha_new, stalled = m_step_quasi_newton(state, mode="single_step")
                stalled_count += int(stalled)
        elif config.variant == "GEM":
            alpha_new, stalled = m_step_quasi_newton(state, mode="single_step")
            stalled_count += int(stalled)
        else:  # ECM
            alpha_new, stalled = m_step_quasi_newton(state, mode="full")
            stalled_count += int(stalled)

        positions = deform(model, alpha_new)
        normals = normals_at(positions)
        total = _core.weighted_aniso_sqsum(
            resp, pts, positions, normals if eta != 1.0 else None, eta
        )
        sigma2 = max(total / (3.0 * pts.shape[0]), floor)
        alpha = alpha_new
        wall_times.append(time.perf_counter() - it_t0)

    if not converged and len(q_trace) > 1:
        best = int(np.argmax(q_trace))
        alpha = alpha_trace[best]
        sigma2 = sigma_trace[best]

    return FitResult(
        variant=config.variant,
        eta=eta,
        alpha=alpha,
        sigma2=sigma2,
        iterations=len(q_trace) - 1,
        converged=converged,
        fallback_count=fallback_count,
        q_trace=q_trace,
        wall_times=wall_times,
        stalled_count=stalled_count,
        alpha_trace=alpha_trace,
        trace_elapsed=trace_elapsed,
    )
