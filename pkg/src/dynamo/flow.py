"""Optical-flow estimation between consecutive frames.

Gradients are box-averaged finite differences with mirror padding; the
linearized brightness-constancy system is solved by the subspace solver with
a smoothness penalty on the velocity field.  Velocities are in pixels/frame:
s(t) carries the content of frame t to frame t+1.
"""

from dataclasses import dataclass

import numpy as np
from matplotlib import colors as mpl_colors
from matplotlib import image as mpl_image
from scipy import sparse

from .mmgks import SolverConfig, mmgks
from .operators import SparseOperator, block_diagonal, spatial_gradient


@dataclass
class FlowField:
    n_x: int
    n_y: int
    s_x: np.ndarray
    s_y: np.ndarray

    def __post_init__(self):
        self.s_x = np.asarray(self.s_x, dtype=np.float64)
        self.s_y = np.asarray(self.s_y, dtype=np.float64)
        if self.s_x.shape != (self.n_x, self.n_y) or self.s_y.shape != (self.n_x, self.n_y):
            raise ValueError("velocity components must match the grid shape")
        if not (np.isfinite(self.s_x).all() and np.isfinite(self.s_y).all()):
            raise ValueError("velocity field contains non-finite values")

    @classmethod
    def zero(cls, n_x: int, n_y: int) -> "FlowField":
        return cls(n_x, n_y, np.zeros((n_x, n_y)), np.zeros((n_x, n_y)))

    def as_vector(self) -> np.ndarray:
        """[s_x; s_y] with column-stacked pixel order."""
        return np.concatenate(
            [self.s_x.ravel(order="F"), self.s_y.ravel(order="F")]
        )

    @classmethod
    def from_vector(cls, vec, n_x: int, n_y: int) -> "FlowField":
        ns = n_x * n_y
        vec = np.asarray(vec, dtype=np.float64).ravel()
        return cls(
            n_x,
            n_y,
            vec[:ns].reshape((n_x, n_y), order="F"),
            vec[ns:].reshape((n_x, n_y), order="F"),
        )

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.s_x, self.s_y)


@dataclass
class GradientTriple:
    u_x: np.ndarray
    u_y: np.ndarray
    u_t: np.ndarray


def spatiotemporal_gradients(frame_t, frame_t1, delta_r: int = 1) -> GradientTriple:
    """Box-averaged gradients of a frame pair.

    u_t is the forward time difference averaged over a (2*delta_r+1)^2 window;
    u_x and u_y are central differences with step max(delta_r, 1), averaged
    over the transverse window and over both frames.  Borders are completed by
    mirroring the image.
    """
    a = np.asarray(frame_t, dtype=np.float64)
    b = np.asarray(frame_t1, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if delta_r < 0:
        raise ValueError("delta_r must be >= 0")

    u_t = _box_mean(b - a, delta_r)
    u_x = 0.5 * (_dir_gradient(a, delta_r, axis=0) + _dir_gradient(b, delta_r, axis=0))
    u_y = 0.5 * (_dir_gradient(a, delta_r, axis=1) + _dir_gradient(b, delta_r, axis=1))
    return GradientTriple(u_x, u_y, u_t)


def _box_mean(a: np.ndarray, dr: int) -> np.ndarray:
    if dr == 0:
        return a.copy()
    n_x, n_y = a.shape
    p = np.pad(a, dr, mode="symmetric")
    out = np.zeros_like(a)
    for dx in range(2 * dr + 1):
        for dy in range(2 * dr + 1):
            out += p[dx : dx + n_x, dy : dy + n_y]
    return out / (2 * dr + 1) ** 2


def _dir_gradient(a: np.ndarray, dr: int, axis: int) -> np.ndarray:
    # the step clamps to 1 so the dr=0 case stays a plain central difference
    h = max(dr, 1)
    n_x, n_y = a.shape
    pad = max(h, dr)
    p = np.pad(a, pad, mode="symmetric")
    out = np.zeros_like(a)
    for o in range(-dr, dr + 1):
        if axis == 0:
            plus = p[pad + h : pad + h + n_x, pad + o : pad + o + n_y]
            minus = p[pad - h : pad - h + n_x, pad + o : pad + o + n_y]
        else:
            plus = p[pad + o : pad + o + n_x, pad + h : pad + h + n_y]
            minus = p[pad + o : pad + o + n_x, pad - h : pad - h + n_y]
        out += plus - minus
    return out / (2.0 * h * (2 * dr + 1))


def assemble_upsilon(grad: GradientTriple) -> SparseOperator:
    """Row i holds u_x^i at column i and u_y^i at column n_s + i."""
    n_x, n_y = grad.u_x.shape
    ns = n_x * n_y
    ux = grad.u_x.ravel(order="F")
    uy = grad.u_y.ravel(order="F")
    rows = np.tile(np.arange(ns), 2)
    cols = np.concatenate([np.arange(ns), ns + np.arange(ns)])
    vals = np.concatenate([ux, uy])
    out = sparse.csr_array(sparse.coo_array((vals, (rows, cols)), shape=(ns, 2 * ns)))
    out.eliminate_zeros()
    return out


def flow_regularizer(n_x: int, n_y: int, stacked: bool = False) -> SparseOperator:
    """Gradient penalty on (s_x; s_y): block-diagonal by default, or the
    horizontally concatenated [L L] variant."""
    grad = spatial_gradient(n_x, n_y)
    if stacked:
        return sparse.csr_array(sparse.hstack([grad, grad], format="csr"))
    return block_diagonal([grad, grad])


def solve_of(frame_t, frame_t1, config: SolverConfig | None = None,
             return_trace: bool = False):
    """Estimate the velocity field carrying frame_t onto frame_t1.

    Minimizes the linearized brightness-constancy residual plus a
    GCV-weighted smoothness penalty; all-zero gradients short-circuit to the
    zero field.
    """
    cfg = config or SolverConfig()
    a = np.asarray(frame_t, dtype=np.float64)
    n_x, n_y = a.shape
    grads = spatiotemporal_gradients(frame_t, frame_t1, cfg.flow_delta_r)
    ut = grads.u_t.ravel(order="F")
    if np.linalg.norm(ut) == 0.0 or (
        np.linalg.norm(grads.u_x) == 0.0 and np.linalg.norm(grads.u_y) == 0.0
    ):
        field = FlowField.zero(n_x, n_y)
        return (field, None) if return_trace else field
    ups = assemble_upsilon(grads)
    reg = flow_regularizer(n_x, n_y, stacked=cfg.flow_stacked_regularizer)
    grad_power = float(np.mean(grads.u_x**2 + grads.u_y**2))
    flow_cfg = SolverConfig(
        ell=min(cfg.flow_ell, n_x * n_y),
        max_iters=cfg.flow_iters,
        q=cfg.flow_q,
        p=cfg.flow_p,
        eps=cfg.eps,
        lambda_rule="gcv",
        lambda_floor=cfg.flow_lambda_floor_scale * grad_power,
        tol=cfg.tol,
        seed=cfg.seed,
    )
    s_vec, trace = mmgks(ups, reg, -ut, flow_cfg)
    field = FlowField.from_vector(s_vec, n_x, n_y)
    return (field, trace) if return_trace else field


def reverse_flow(s: FlowField) -> FlowField:
    """Scatter -s to the displaced targets (nearest pixel, clipped).

    Unfilled targets stay zero; colliding targets keep the last writer in
    row-major scan order.
    """
    n_x, n_y = s.n_x, s.n_y
    sxp = np.zeros((n_x, n_y))
    syp = np.zeros((n_x, n_y))
    for x in range(n_x):
        for y in range(n_y):
            tx = min(max(int(round(x + s.s_x[x, y])), 0), n_x - 1)
            ty = min(max(int(round(y + s.s_y[x, y])), 0), n_y - 1)
            sxp[tx, ty] = -s.s_x[x, y]
            syp[tx, ty] = -s.s_y[x, y]
    return FlowField(n_x, n_y, sxp, syp)


def bilinear_resize(img: np.ndarray, shape: tuple) -> np.ndarray:
    """Center-aligned bilinear resample to the given (rows, cols)."""
    n_x, n_y = img.shape
    m_x, m_y = shape
    xs = np.clip((np.arange(m_x) + 0.5) * n_x / m_x - 0.5, 0, n_x - 1)
    ys = np.clip((np.arange(m_y) + 0.5) * n_y / m_y - 0.5, 0, n_y - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), n_x - 2) if n_x > 1 else np.zeros(m_x, dtype=np.int64)
    y0 = np.minimum(np.floor(ys).astype(np.int64), n_y - 2) if n_y > 1 else np.zeros(m_y, dtype=np.int64)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[None, :]
    i0, j0 = x0[:, None], y0[None, :]
    i1 = np.minimum(i0 + 1, n_x - 1)
    j1 = np.minimum(j0 + 1, n_y - 1)
    return (
        img[i0, j0] * (1 - fx) * (1 - fy)
        + img[i1, j0] * fx * (1 - fy)
        + img[i0, j1] * (1 - fx) * fy
        + img[i1, j1] * fx * fy
    )


def auto_flow_scale(n_x: int, n_y: int, limit: int = 50) -> float:
    """Halve until both downsampled dimensions drop below the limit."""
    alpha = 1.0
    while max(n_x, n_y) * alpha >= limit and min(n_x, n_y) * alpha / 2 >= 4:
        alpha /= 2.0
    return alpha


def rescaled_solve_of(frame_t, frame_t1, alpha: float, config: SolverConfig | None = None) -> FlowField:
    """Solve the flow on alpha-downsampled frames, then upsample and rescale
    the velocities back to the original resolution."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    a = np.asarray(frame_t, dtype=np.float64)
    n_x, n_y = a.shape
    if alpha == 1.0:
        return solve_of(frame_t, frame_t1, config)
    m_x = int(round(n_x * alpha))
    m_y = int(round(n_y * alpha))
    if m_x < 4 or m_y < 4:
        raise ValueError(f"downsampled dims {m_x}x{m_y} below the 4-pixel minimum")
    small = solve_of(
        bilinear_resize(a, (m_x, m_y)),
        bilinear_resize(np.asarray(frame_t1, dtype=np.float64), (m_x, m_y)),
        config,
    )
    return FlowField(
        n_x,
        n_y,
        bilinear_resize(small.s_x, (n_x, n_y)) * (n_x / m_x),
        bilinear_resize(small.s_y, (n_x, n_y)) * (n_y / m_y),
    )


def save_flow_csv(s: FlowField, path) -> None:
    with open(path, "w") as fh:
        fh.write("x,y,s_x,s_y\n")
        for x in range(s.n_x):
            for y in range(s.n_y):
                fh.write(f"{x},{y},{float(s.s_x[x, y])!r},{float(s.s_y[x, y])!r}\n")


def save_flow_png(s: FlowField, path) -> None:
    """Color-wheel rendering: hue encodes direction, brightness magnitude."""
    mag = s.magnitude()
    peak = mag.max()
    hsv = np.zeros((s.n_x, s.n_y, 3))
    hsv[..., 0] = (np.arctan2(s.s_y, s.s_x) + np.pi) / (2 * np.pi)
    hsv[..., 1] = 1.0
    hsv[..., 2] = mag / peak if peak > 0 else 0.0
    mpl_image.imsave(path, mpl_colors.hsv_to_rgb(hsv))
