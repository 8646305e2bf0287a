"""Majorization-minimization solver over a growing Krylov-type subspace.

Solves min_u ||H u - b||_2^2 + lam * sum_i phi_eps(theta_i^T u) with
phi_eps(z) = (z^2 + eps^2)^(q/2), by alternating smoothed-l_q reweighting with
subspace-restricted quadratic solves; the subspace is seeded by Golub-Kahan
bidiagonalization and expanded each iteration with the normal-equations
residual.  lam is re-selected every iteration by the discrepancy principle or
generalized cross-validation, evaluated on the reduced factors.
"""

import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import sparse

_LOG_LO, _LOG_HI = -12.0, 12.0
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class SolverConfig:
    ell: int = 10                 # seed subspace dimension
    max_iters: int = 200
    q: float = 1.0                # regularization exponent (0 < q <= 2)
    p: float = 2.0                # data-fit exponent (2 = plain least squares)
    eps: float | None = None      # smoothing; None picks 1e-2 * range of theta @ u0
    lambda_rule: str = "gcv"      # "gcv" | "dp" | "fixed"
    lambda_value: float = 1.0
    lambda_floor: float = 0.0     # lower bound applied after selection
    eta: float = 1.01             # DP safety factor
    delta: float = 0.0            # DP noise-norm estimate
    tol: float = 1e-6             # stagnation tolerance on the iterates
    tau: int = 20                 # flow-update period (used by the driver)
    of_start: int = 10            # plain warm-up iterations before flow updates
    flow_scale: float | None = None  # None: auto-downsample below 50x50
    flow_iters: int = 20
    flow_ell: int = 10
    flow_p: float = 2.0
    flow_q: float = 2.0
    flow_delta_r: int = 1
    flow_stacked_regularizer: bool = False
    # smoothness floor for the flow parameter, in units of the mean squared
    # spatial gradient; guards the underdetermined flow system against the
    # GCV minimum collapsing to zero (0 disables)
    flow_lambda_floor_scale: float = 10.0
    seed: int = 0
    threads: int = 1


GkbFactors = namedtuple("GkbFactors", ["V", "U", "B"])
LambdaChoice = namedtuple("LambdaChoice", ["lam", "flag"])

# dense path threshold for the weighted-regularizer QR (elements of theta @ V)
_DENSE_QR_LIMIT = 4_000_000


def gkb_seed(h, b, ell: int) -> GkbFactors:
    """Golub-Kahan bidiagonalization seeded with b/||b||, reorthogonalized.

    Returns (V, U, B) with H V = U B; on breakdown the basis built so far is
    returned (possibly fewer than ell columns).
    """
    m, n = h.shape
    if ell < 1 or ell > min(m, n):
        raise ValueError(f"ell={ell} outside [1, min{h.shape}]")
    b = np.asarray(b, dtype=np.float64).ravel()
    beta = float(np.linalg.norm(b))
    if beta == 0.0:
        raise ValueError("gkb_seed needs a nonzero right-hand side")

    big_u = np.zeros((m, ell + 1))
    big_v = np.zeros((n, ell))
    bidiag = np.zeros((ell + 1, ell))
    big_u[:, 0] = b / beta
    scale = 0.0
    for i in range(ell):
        v = h.T @ big_u[:, i]
        if i > 0:
            v -= bidiag[i, i - 1] * big_v[:, i - 1]
        for _ in range(2):
            v -= big_v[:, :i] @ (big_v[:, :i].T @ v)
        alpha = float(np.linalg.norm(v))
        scale = max(scale, alpha)
        if alpha <= 1e-14 * max(scale, 1.0):
            return GkbFactors(big_v[:, :i], big_u[:, : i + 1], bidiag[: i + 1, :i])
        bidiag[i, i] = alpha
        big_v[:, i] = v / alpha

        u = h @ big_v[:, i] - alpha * big_u[:, i]
        for _ in range(2):
            u -= big_u[:, : i + 1] @ (big_u[:, : i + 1].T @ u)
        beta = float(np.linalg.norm(u))
        bidiag[i + 1, i] = beta
        if beta <= 1e-14 * max(scale, 1.0):
            return GkbFactors(
                big_v[:, : i + 1], big_u[:, : i + 1], bidiag[: i + 1, : i + 1]
            )
        big_u[:, i + 1] = u / beta
    return GkbFactors(big_v, big_u, bidiag)


def update_weights(z, eps: float, q: float, groups=None) -> np.ndarray:
    """Majorization weights w_i = (z_i^2 + eps^2)^((q-2)/4).

    With ``groups`` (an int array mapping each row to its group), rows in a
    group share w = (||z_g||^2 + eps^2)^((q-2)/4), giving the 2-norm coupling
    used by isotropic and group-sparse regularizers.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    z = np.asarray(z, dtype=np.float64).ravel()
    expo = (q - 2.0) / 4.0
    if groups is None:
        return (z * z + eps * eps) ** expo
    groups = np.asarray(groups)
    if groups.shape != z.shape:
        raise ValueError("groups must have one entry per row of z")
    sums = np.bincount(groups, weights=z * z, minlength=int(groups.max()) + 1)
    return (sums[groups] + eps * eps) ** expo


def smoothed_penalty(z, eps: float, q: float, groups=None) -> float:
    """sum_g (||z_g||^2 + eps^2)^(q/2) (singleton groups when ungrouped)."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if groups is None:
        return float(np.sum((z * z + eps * eps) ** (q / 2.0)))
    sums = np.bincount(groups, weights=z * z, minlength=int(groups.max()) + 1)
    return float(np.sum((sums + eps * eps) ** (q / 2.0)))


class KrylovWorkspace:
    """Orthonormal basis plus the cached products and factors the solver needs.

    The H side is maintained incrementally (one Gram-Schmidt append per new
    basis vector); the weighted-regularizer side is refactored from scratch
    whenever the weights change, since every row scale moves.
    """

    def __init__(self, h, b, v0: np.ndarray, capacity: int, seed: int = 0,
                 keep_q_theta: bool = False, cache_limit_bytes: int | None = None):
        self.h = h
        self.b = np.asarray(b, dtype=np.float64).ravel()
        m, n = h.shape
        self.capacity = capacity
        self.dim = v0.shape[1]
        # Q_H can never exceed m orthonormal columns; once the basis outgrows
        # the data space, R_H keeps growing rectangular instead
        q_cap = min(capacity, m)
        self._v = np.zeros((n, capacity))
        self._v[:, : self.dim] = v0
        self._hv = np.zeros((m, capacity))
        self._hv[:, : self.dim] = h @ v0
        q, r = sla.qr(self._hv[:, : self.dim], mode="economic")
        self.q_cols = q.shape[1]
        self._q = np.zeros((m, q_cap))
        self._q[:, : self.q_cols] = q
        self._r = np.zeros((q_cap, capacity))
        self._r[: self.q_cols, : self.dim] = r
        self._qtb = np.zeros(q_cap)
        self._qtb[: self.q_cols] = q.T @ self.b
        self.b_norm_sq = float(self.b @ self.b)
        self.rank_flag = False
        self.keep_q_theta = keep_q_theta
        self.q_theta = None
        self.r_theta = None
        self.theta = None
        self._theta_v = None
        self._rng = np.random.default_rng((seed, 0xD1A6))
        if cache_limit_bytes is None:
            try:
                import psutil

                cache_limit_bytes = int(0.30 * psutil.virtual_memory().available)
            except Exception:
                cache_limit_bytes = 1_000_000_000
        self.cache_limit_bytes = cache_limit_bytes

    @property
    def V(self):
        return self._v[:, : self.dim]

    @property
    def HV(self):
        return self._hv[:, : self.dim]

    @property
    def Q_H(self):
        return self._q[:, : self.q_cols]

    @property
    def R_H(self):
        return self._r[: self.q_cols, : self.dim]

    @property
    def qtb(self):
        return self._qtb[: self.q_cols]

    @property
    def resid_const_sq(self) -> float:
        return max(self.b_norm_sq - float(self.qtb @ self.qtb), 0.0)

    def set_theta(self, theta) -> None:
        self.theta = theta
        rows = theta.shape[0]
        if rows * self.capacity * 8 <= self.cache_limit_bytes:
            self._theta_v = np.zeros((rows, self.capacity))
            self._theta_v[:, : self.dim] = theta @ self.V
        else:
            self._theta_v = None

    def theta_v(self, i0: int, i1: int) -> np.ndarray:
        """Rows [i0, i1) of theta @ V, from cache or recomputed on the fly."""
        if self._theta_v is not None:
            return self._theta_v[i0:i1, : self.dim]
        return self.theta[i0:i1] @ self.V


def update_qr(ws: KrylovWorkspace, weights=None, new_column=None) -> None:
    """Maintain the two thin QR factorizations.

    ``new_column``: a fresh (already orthonormal) basis vector; H @ v is
    appended with one reorthogonalized Gram-Schmidt step.  ``weights``: new
    row weights for the regularizer; its factor is rebuilt from theta @ V.
    A numerically dependent append is flagged and the orthogonal complement
    direction is recovered from a 1e-14-scale perturbation.
    """
    if new_column is not None:
        v = np.asarray(new_column, dtype=np.float64).ravel()
        d = ws.dim
        if d >= ws.capacity:
            raise ValueError("workspace capacity exhausted")
        hv = ws.h @ v
        ws._hv[:, d] = hv
        nq = ws.q_cols
        coeffs = np.zeros(nq)
        work = hv.copy()
        for _ in range(2):
            proj = ws._q[:, :nq].T @ work
            work -= ws._q[:, :nq] @ proj
            coeffs += proj
        rho = float(np.linalg.norm(work))
        hv_norm = float(np.linalg.norm(hv))
        ws._r[:nq, d] = coeffs
        if nq >= ws._q.shape[1]:
            # Q already spans the data space: R grows a column, no new row
            pass
        elif rho <= 1e-10 * max(hv_norm, 1e-300):
            ws.rank_flag = True
            work = work + 1e-14 * max(hv_norm, 1.0) * ws._rng.standard_normal(work.size)
            for _ in range(2):
                work -= ws._q[:, :nq] @ (ws._q[:, :nq].T @ work)
            wn = float(np.linalg.norm(work))
            if wn > 0:
                ws._q[:, nq] = work / wn
                ws._r[nq, d] = rho
                ws._qtb[nq] = float(ws._q[:, nq] @ ws.b)
                ws.q_cols = nq + 1
        else:
            ws._q[:, nq] = work / rho
            ws._r[nq, d] = rho
            ws._qtb[nq] = float(ws._q[:, nq] @ ws.b)
            ws.q_cols = nq + 1
        ws._v[:, d] = v
        if ws._theta_v is not None:
            ws._theta_v[:, d] = ws.theta @ v
        ws.dim = d + 1

    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).ravel()
        rows = ws.theta.shape[0]
        if w.size != rows:
            raise ValueError(f"got {w.size} weights for {rows} regularizer rows")
        d = ws.dim
        if ws.keep_q_theta or rows * d <= _DENSE_QR_LIMIT:
            a = np.asarray(ws.theta_v(0, rows), dtype=np.float64) * w[:, None]
            q, r = sla.qr(a, mode="economic")
            ws.q_theta, ws.r_theta = q, r
        else:
            gram = np.zeros((d, d))
            step = max(1, int(8_000_000 // max(d, 1)))
            for i0 in range(0, rows, step):
                i1 = min(rows, i0 + step)
                c = np.asarray(ws.theta_v(i0, i1)) * w[i0:i1, None]
                gram += c.T @ c
            ws.q_theta = None
            ws.r_theta = _cholesky_r(gram, ws)


def _cholesky_r(gram: np.ndarray, ws=None) -> np.ndarray:
    """Upper-triangular R with R^T R = gram, jittering if semi-definite."""
    d = gram.shape[0]
    base = max(float(np.trace(gram)) / max(d, 1), 1e-300)
    tau = 0.0
    for _ in range(10):
        try:
            chol = np.linalg.cholesky(gram + tau * np.eye(d) if tau else gram)
            return chol.T.copy()
        except np.linalg.LinAlgError:
            if ws is not None:
                ws.rank_flag = True
            tau = max(tau * 100.0, 1e-14 * base)
    raise np.linalg.LinAlgError("regularizer Gram matrix is numerically indefinite")


def solve_reduced(r_h, r_theta, qtb, lam: float) -> np.ndarray:
    """Solve the reduced Tikhonov system via the stacked least-squares form
    [R_H; sqrt(lam) R_T] z ~= [qtb; 0]."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    r_h = np.atleast_2d(np.asarray(r_h, dtype=np.float64))
    r_theta = np.atleast_2d(np.asarray(r_theta, dtype=np.float64))
    stacked = np.vstack([r_h, math.sqrt(lam) * r_theta])
    rhs = np.concatenate([np.asarray(qtb, dtype=np.float64).ravel(),
                          np.zeros(r_theta.shape[0])])
    z, _, rank, _ = np.linalg.lstsq(stacked, rhs, rcond=None)
    if rank < stacked.shape[1]:
        raise np.linalg.LinAlgError("reduced stacked system is numerically singular")
    return z


@dataclass
class ReducedSystem:
    r_h: np.ndarray
    r_theta: np.ndarray
    qtb: np.ndarray
    resid_const_sq: float = 0.0  # ||b - Q_H Q_H^T b||^2, constant in lam
    m: int = 0                   # rows of the full data vector


def _reduced_spectrum(red: ReducedSystem):
    """Generalized-SVD spectrum of (R_H, R_T): cosines c, sines s, and the
    rotated data d~ = U^T qtb.  Residual and trace terms become O(d) per lam."""
    stacked = np.vstack([red.r_h, red.r_theta])
    q, _ = sla.qr(stacked, mode="economic")
    q1 = q[: red.r_h.shape[0]]
    u, c, _ = sla.svd(q1, full_matrices=False)
    c = np.clip(c, 0.0, 1.0)
    s = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    dtil = u.T @ red.qtb
    const_sq = red.resid_const_sq + max(
        float(red.qtb @ red.qtb) - float(dtil @ dtil), 0.0
    )
    return c, s, dtil, const_sq


def _spectrum_residual(lam, c, s, dtil, const_sq) -> float:
    shrink = lam * s * s / (c * c + lam * s * s)
    return math.sqrt(float(np.sum((shrink * dtil) ** 2)) + const_sq)


def select_lambda_dp(red: ReducedSystem, delta: float, eta: float = 1.01) -> LambdaChoice:
    """Bisection on log10(lam) for ||H V z(lam) - b|| = eta * delta (1% tol).

    If the target is not bracketed on [1e-12, 1e12] the nearest end is
    returned with the ``dp_unattainable`` flag.
    """
    if delta <= 0:
        raise ValueError("delta must be positive for the discrepancy principle")
    if eta < 1:
        raise ValueError("eta must be >= 1")
    c, s, dtil, const_sq = _reduced_spectrum(red)
    target = eta * delta

    def resid(y):
        return _spectrum_residual(10.0**y, c, s, dtil, const_sq)

    lo, hi = _LOG_LO, _LOG_HI
    r_lo, r_hi = resid(lo), resid(hi)
    if r_lo >= target:
        flag = None if abs(r_lo - target) <= 0.01 * target else "dp_unattainable"
        return LambdaChoice(10.0**lo, flag)
    if r_hi <= target:
        flag = None if abs(r_hi - target) <= 0.01 * target else "dp_unattainable"
        return LambdaChoice(10.0**hi, flag)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r_mid = resid(mid)
        if abs(r_mid - target) <= 0.01 * target:
            return LambdaChoice(10.0**mid, None)
        if r_mid < target:
            lo = mid
        else:
            hi = mid
    return LambdaChoice(10.0 ** (0.5 * (lo + hi)), None)


def select_lambda_gcv(red: ReducedSystem) -> LambdaChoice:
    """Minimize ||H V z(lam) - b||^2 / trace(I - influence)^2 over lam.

    A 60-point grid scan over log10(lam) in [-12, 12] locates the basin and a
    golden-section search refines it within the bracketing cell.
    """
    c, s, dtil, const_sq = _reduced_spectrum(red)
    m = red.m if red.m else red.r_h.shape[0]

    def gfun(y):
        lam = 10.0**y
        denom_t = lam * s * s + c * c
        shrink = lam * s * s / denom_t
        num = float(np.sum((shrink * dtil) ** 2)) + const_sq
        den = m - float(np.sum(c * c / denom_t))
        if den <= 0:
            return math.inf
        return num / (den * den)

    grid = np.linspace(_LOG_LO, _LOG_HI, 60)
    vals = np.array([gfun(y) for y in grid])
    vmax, vmin = float(vals.max()), float(vals.min())
    if vmax - vmin < 1e-14 * max(abs(vmax), 1e-300):
        return LambdaChoice(10.0 ** (0.5 * (_LOG_LO + _LOG_HI)), "gcv_flat")
    i = int(np.argmin(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, grid.size - 1)]
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = gfun(x1), gfun(x2)
    for _ in range(80):
        if b - a < 1e-7:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = gfun(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = gfun(x2)
    y_best = x1 if f1 <= f2 else x2
    return LambdaChoice(10.0**y_best, None)


def expand_subspace(ws: KrylovWorkspace, residual) -> bool:
    """Orthogonalize the normal-equations residual against V and append it.

    Returns False (convergence signal, nothing appended) when the residual is
    annihilated by the projection.
    """
    r = np.asarray(residual, dtype=np.float64).ravel()
    norm0 = float(np.linalg.norm(r))
    if norm0 == 0.0:
        return False
    v = r.copy()
    for _ in range(2):
        v -= ws.V @ (ws.V.T @ v)
    norm1 = float(np.linalg.norm(v))
    if norm1 <= 1e-14 * norm0:
        return False
    update_qr(ws, new_column=v / norm1)
    return True


@dataclass
class SolverTrace:
    """Per-iteration record of the solve."""

    lam: list = field(default_factory=list)
    lam_flag: list = field(default_factory=list)
    data_residual: list = field(default_factory=list)
    obj_before: list = field(default_factory=list)
    obj_after: list = field(default_factory=list)
    basis_dim: list = field(default_factory=list)
    theta_changed: list = field(default_factory=list)
    prev_in_span: list = field(default_factory=list)
    extras: list = field(default_factory=list)
    stop_reason: str = ""
    workspace: object = None

    def __len__(self):
        return len(self.lam)

    def majorization_violations(self, rtol: float = 1e-10) -> list:
        """Iterations whose inner quadratic solve increased the smoothed
        objective (only meaningful where the previous iterate lay in the
        subspace)."""
        bad = []
        for k in range(len(self.lam)):
            if not self.prev_in_span[k]:
                continue
            before, after = self.obj_before[k], self.obj_after[k]
            if after > before * (1.0 + rtol) + 1e-300:
                bad.append(k)
        return bad


def _as_theta_builder(theta_builder):
    if sparse.issparse(theta_builder):
        theta, groups = theta_builder, None
    elif isinstance(theta_builder, tuple):
        theta, groups = theta_builder
    else:
        return theta_builder

    def fixed(k, u):
        return (theta, groups) if k == 0 else None

    return fixed


def mmgks(h, theta_builder, b, config: SolverConfig, callback=None, u0=None,
          keep_q_theta: bool = False):
    """Run the reweighted subspace solver.

    ``theta_builder`` is a sparse operator, a (theta, groups) pair, or a
    callable (k, u) -> (theta, groups) | None, where None reuses the current
    operator; the driver uses the callable form to splice flow updates in.
    ``callback(k, u_new)`` may return a dict merged into the trace extras.
    Returns (u, SolverTrace).
    """
    h = sparse.csr_array(h)
    b = np.asarray(b, dtype=np.float64).ravel()
    trace = SolverTrace()
    if float(np.linalg.norm(b)) == 0.0:
        trace.stop_reason = "zero rhs"
        return np.zeros(h.shape[1]), trace

    builder = _as_theta_builder(theta_builder)
    capacity = min(config.ell + config.max_iters + 2, h.shape[1])
    seed_dim = min(config.ell, capacity)
    basis = gkb_seed(h, b, seed_dim)
    ws = KrylovWorkspace(h, b, basis.V, capacity, seed=config.seed,
                         keep_q_theta=keep_q_theta)

    if u0 is not None:
        u = np.asarray(u0, dtype=np.float64).ravel()
    else:
        # back-projection scaled to the best 1-D data fit, so the smoothing
        # level and the first weights see solution-scale values
        u = h.T @ b
        hu0 = h @ u
        denom = float(hu0 @ hu0)
        if denom > 0:
            u *= float(b @ hu0) / denom
    prev_in_span = False  # u0 is generally outside the seeded subspace
    first = builder(0, u)
    if first is None:
        raise ValueError("theta_builder must supply an operator at iteration 0")
    theta, groups = first
    ws.set_theta(theta)

    z = theta @ u
    eps = config.eps
    if eps is None:
        span = float(np.ptp(z))
        eps = 0.01 * span if span > 0 else 1e-2
    eps_data = None
    hu = h @ u

    if config.p != 2 and config.lambda_rule == "dp":
        raise ValueError("discrepancy principle requires p = 2")

    for k in range(config.max_iters):
        theta_changed = False
        if k > 0:
            new = builder(k, u)
            if new is not None:
                theta, groups = new
                ws.set_theta(theta)
                theta_changed = True
                z = theta @ u

        w = update_weights(z, eps, config.q, groups)
        update_qr(ws, weights=w)

        if config.p == 2:
            red = ReducedSystem(ws.R_H, ws.r_theta, ws.qtb,
                                ws.resid_const_sq, m=b.size)
        else:
            resid_vec = hu - b
            if eps_data is None:
                span = float(np.ptp(resid_vec))
                eps_data = 0.01 * span if span > 0 else 1e-2
            wf = update_weights(resid_vec, eps_data, config.p)
            a = ws.HV * wf[:, None]
            q_w, r_w = sla.qr(a, mode="economic")
            bw = wf * b
            qtb_w = q_w.T @ bw
            out_sq = max(float(bw @ bw) - float(qtb_w @ qtb_w), 0.0)
            red = ReducedSystem(r_w, ws.r_theta, qtb_w, out_sq, m=b.size)

        if config.lambda_rule == "dp":
            lam, flag = select_lambda_dp(red, config.delta, config.eta)
        elif config.lambda_rule == "gcv":
            lam, flag = select_lambda_gcv(red)
        elif config.lambda_rule == "fixed":
            lam, flag = config.lambda_value, None
        else:
            raise ValueError(f"unknown lambda rule {config.lambda_rule!r}")
        if lam < config.lambda_floor:
            lam = config.lambda_floor

        z_coef = solve_reduced(red.r_h, red.r_theta, red.qtb, lam)
        u_new = ws.V @ z_coef
        hu_new = ws.HV @ z_coef
        z_new = theta @ u_new

        # smoothed objective with the majorization-consistent scaling (the
        # plain weights absorb a q/2 factor into lam)
        if config.p == 2:
            fit_before = float(np.sum((hu - b) ** 2))
            fit_after = float(np.sum((hu_new - b) ** 2))
        else:
            fit_before = (2.0 / config.p) * smoothed_penalty(hu - b, eps_data, config.p)
            fit_after = (2.0 / config.p) * smoothed_penalty(hu_new - b, eps_data, config.p)
        reg_scale = (2.0 / config.q) * lam
        trace.lam.append(float(lam))
        trace.lam_flag.append(flag)
        trace.data_residual.append(float(np.linalg.norm(hu_new - b)))
        trace.obj_before.append(fit_before + reg_scale * smoothed_penalty(z, eps, config.q, groups))
        trace.obj_after.append(fit_after + reg_scale * smoothed_penalty(z_new, eps, config.q, groups))
        trace.basis_dim.append(ws.dim)
        trace.theta_changed.append(theta_changed)
        trace.prev_in_span.append(prev_in_span)
        trace.extras.append(callback(k, u_new) if callback is not None else {})

        u_norm = float(np.linalg.norm(u))
        step = float(np.linalg.norm(u_new - u))
        u, hu, z = u_new, hu_new, z_new
        prev_in_span = True
        if u_norm > 0 and step / u_norm < config.tol:
            trace.stop_reason = "stagnation"
            break
        if ws.dim >= capacity:
            trace.stop_reason = "capacity"
            break

        if config.p == 2:
            r_full = ws.h.T @ (hu - b) + lam * (theta.T @ (w * w * z))
        else:
            r_full = ws.h.T @ (wf * wf * (hu - b)) + lam * (theta.T @ (w * w * z))
        if not expand_subspace(ws, r_full):
            trace.stop_reason = "converged"
            break
    else:
        trace.stop_reason = "max iterations"
    trace.workspace = ws
    return u, trace
