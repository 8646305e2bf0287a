"""Fan-beam projection geometry, per-timestep operators, and sinogram simulation.

World coordinates put the grid center at the origin with unit pixels; pixel
(i, j) covers [i - n_x/2, i+1 - n_x/2] x [j - n_y/2, j+1 - n_y/2].  A view at
angle phi places the source at R_s*(cos phi, sin phi) and a flat detector of
angular span ``detector_span`` on the far side.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .operators import SparseOperator, block_diagonal
from .phantoms import ImageSequence

_DYNB_MAGIC = b"DYNB"


@dataclass
class FanBeamGeometry:
    n_rays: int
    source_radius: float
    detector_radius: float
    detector_span: float  # full fan angle, radians
    grid: tuple  # (n_x, n_y)

    def __post_init__(self):
        n_x, n_y = self.grid
        half_diag = 0.5 * float(np.hypot(n_x, n_y))
        if self.source_radius <= half_diag:
            raise ValueError(
                f"source radius {self.source_radius} places the source inside the "
                f"grid (half diagonal {half_diag:.2f})"
            )
        if self.n_rays < 1:
            raise ValueError("need at least one detector element")

    @classmethod
    def for_grid(cls, n_x: int, n_y: int, n_rays: int = 117) -> "FanBeamGeometry":
        """Default geometry: radii at twice the grid diagonal, fan covering the
        circumscribed circle."""
        diag = float(np.hypot(n_x, n_y))
        radius = 2.0 * diag
        span = 2.0 * float(np.arcsin(0.5 * diag / radius))
        return cls(n_rays, radius, radius, span, (n_x, n_y))

    @property
    def detector_width(self) -> float:
        return 2.0 * (self.source_radius + self.detector_radius) * np.tan(
            self.detector_span / 2.0
        )


@dataclass
class AngleSchedule:
    """Per-timestep view angles in degrees."""

    angles: list = field(repr=False)  # list of 1-D arrays, one per timestep

    def __post_init__(self):
        self.angles = [np.asarray(a, dtype=np.float64) for a in self.angles]
        views = {a.size for a in self.angles}
        if len(views) != 1:
            raise ValueError("all timesteps must have the same number of views")

    @property
    def n_t(self) -> int:
        return len(self.angles)

    @property
    def n_views(self) -> int:
        return self.angles[0].size


def shifted_interval_schedule(n_views: int, n_t: int) -> AngleSchedule:
    """Timestep t draws n_views equispaced angles from a 180-degree window that
    slides by (180/n_views)/n_t per step."""
    if n_views < 1 or n_t < 1:
        raise ValueError("n_views and n_t must be >= 1")
    zeta = 180.0 / n_views
    angles = []
    for t in range(1, n_t + 1):
        lo = zeta * (t - 1) / n_t
        angles.append(lo + 180.0 * np.arange(n_views) / n_views)
    return AngleSchedule(angles)


def fixed_schedule(n_views: int, n_t: int) -> AngleSchedule:
    """Same angles, equispaced over [0, 180), at every timestep."""
    if n_views < 1 or n_t < 1:
        raise ValueError("n_views and n_t must be >= 1")
    base = 180.0 * np.arange(n_views) / n_views
    return AngleSchedule([base.copy() for _ in range(n_t)])


def equal_bins_schedule(n_views: int, n_t: int) -> AngleSchedule:
    """[0, 180) split into n_t equal bins; timestep t samples its own bin."""
    if n_views < 1 or n_t < 1:
        raise ValueError("n_views and n_t must be >= 1")
    width = 180.0 / n_t
    angles = []
    for t in range(n_t):
        lo = width * t
        angles.append(lo + width * np.arange(n_views) / n_views)
    return AngleSchedule(angles)


def random_schedule(n_views: int, n_t: int, seed: int = 0, span_deg: float = 360.0) -> AngleSchedule:
    """Independent uniform angles in [0, span_deg) per timestep (single-shot setups)."""
    if n_views < 1 or n_t < 1:
        raise ValueError("n_views and n_t must be >= 1")
    rng = np.random.default_rng(seed)
    return AngleSchedule([rng.uniform(0.0, span_deg, size=n_views) for _ in range(n_t)])


SCHEDULES = {
    "shifted": shifted_interval_schedule,
    "fixed": fixed_schedule,
    "equal_bins": equal_bins_schedule,
}


def ray_pixel_lengths(p0, p1, n_x: int, n_y: int):
    """Exact traversal of the segment p0 -> p1 through the unit-pixel grid.

    Returns (flat pixel indices in column-stacked order, intersection lengths).
    """
    p0 = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - p0
    lo = np.array([-n_x / 2.0, -n_y / 2.0])
    hi = np.array([n_x / 2.0, n_y / 2.0])

    t_enter, t_exit = 0.0, 1.0
    for a in range(2):
        if abs(d[a]) < 1e-12:
            if p0[a] <= lo[a] or p0[a] >= hi[a]:
                return np.empty(0, dtype=np.int64), np.empty(0)
        else:
            ta = (lo[a] - p0[a]) / d[a]
            tb = (hi[a] - p0[a]) / d[a]
            t_enter = max(t_enter, min(ta, tb))
            t_exit = min(t_exit, max(ta, tb))
    if t_exit <= t_enter:
        return np.empty(0, dtype=np.int64), np.empty(0)

    ts = [np.array([t_enter, t_exit])]
    for a, n_a in ((0, n_x), (1, n_y)):
        if abs(d[a]) >= 1e-12:
            t_planes = (lo[a] + np.arange(1, n_a) - p0[a]) / d[a]
            ts.append(t_planes[(t_planes > t_enter) & (t_planes < t_exit)])
    ts = np.unique(np.concatenate(ts))
    if ts.size < 2:
        return np.empty(0, dtype=np.int64), np.empty(0)

    mids = p0[None, :] + 0.5 * (ts[:-1] + ts[1:])[:, None] * d[None, :]
    ii = np.clip(np.floor(mids[:, 0] - lo[0]).astype(np.int64), 0, n_x - 1)
    jj = np.clip(np.floor(mids[:, 1] - lo[1]).astype(np.int64), 0, n_y - 1)
    lengths = np.diff(ts) * float(np.hypot(*d))
    keep = lengths > 1e-14
    return jj[keep] * n_x + ii[keep], lengths[keep]


def _view_rays(geom: FanBeamGeometry, angle_deg: float):
    phi = np.deg2rad(angle_deg)
    e_r = np.array([np.cos(phi), np.sin(phi)])
    e_t = np.array([-np.sin(phi), np.cos(phi)])
    src = geom.source_radius * e_r
    det_c = -geom.detector_radius * e_r
    width = geom.detector_width
    offsets = ((np.arange(geom.n_rays) + 0.5) / geom.n_rays - 0.5) * width
    targets = det_c[None, :] + offsets[:, None] * e_t[None, :]
    return src, targets, e_r, e_t, width


def build_fan_beam_operator(geom: FanBeamGeometry, angles_deg) -> SparseOperator:
    """Siddon-style operator: entry (r, p) is the length of ray r inside pixel p.

    Rows are ordered view-major, then detector element; rays that miss the grid
    give zero rows.
    """
    n_x, n_y = geom.grid
    rows, cols, vals = [], [], []
    for v, ang in enumerate(np.atleast_1d(np.asarray(angles_deg, dtype=np.float64))):
        src, targets, _, _, _ = _view_rays(geom, ang)
        for k in range(geom.n_rays):
            idx, lengths = ray_pixel_lengths(src, targets[k], n_x, n_y)
            if idx.size:
                rows.append(np.full(idx.size, v * geom.n_rays + k, dtype=np.int64))
                cols.append(idx)
                vals.append(lengths)
    m = len(np.atleast_1d(angles_deg)) * geom.n_rays
    if rows:
        rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    else:
        rows = cols = vals = np.empty(0)
    return sparse.csr_array(
        sparse.coo_array((vals, (rows, cols)), shape=(m, n_x * n_y))
    )


def build_midpoint_operator(geom: FanBeamGeometry, angles_deg) -> SparseOperator:
    """Pixel-driven projector: each pixel center splats onto its two nearest
    detector cells with linear weights.  A deliberately different ray model
    from the exact traversal, used for inverse-crime mitigation."""
    n_x, n_y = geom.grid
    ii, jj = np.meshgrid(np.arange(n_x), np.arange(n_y), indexing="ij")
    px = ii.ravel(order="F") + 0.5 - n_x / 2.0
    py = jj.ravel(order="F") + 0.5 - n_y / 2.0
    pix = np.arange(n_x * n_y)

    rows, cols, vals = [], [], []
    angles = np.atleast_1d(np.asarray(angles_deg, dtype=np.float64))
    for v, ang in enumerate(angles):
        src, _, e_r, e_t, width = _view_rays(geom, ang)
        total = geom.source_radius + geom.detector_radius
        radial = geom.source_radius - (px * e_r[0] + py * e_r[1])
        tang = px * e_t[0] + py * e_t[1]
        u = total * tang / radial
        # strip width of one detector cell scaled back to the isocenter
        cell_iso = width / geom.n_rays * geom.source_radius / total
        kf = (u / width + 0.5) * geom.n_rays - 0.5
        k0 = np.floor(kf).astype(np.int64)
        w1 = kf - k0
        for k_idx, w in ((k0, 1.0 - w1), (k0 + 1, w1)):
            ok = (k_idx >= 0) & (k_idx < geom.n_rays) & (w > 0)
            rows.append(v * geom.n_rays + k_idx[ok])
            cols.append(pix[ok])
            vals.append(w[ok] / cell_iso)
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    m = len(angles) * geom.n_rays
    return sparse.csr_array(
        sparse.coo_array((vals, (rows, cols)), shape=(m, n_x * n_y))
    )


def build_block_operator(
    geom: FanBeamGeometry,
    schedule: AngleSchedule,
    jitter_deg: float = 0.0,
    model: str = "siddon",
) -> SparseOperator:
    """Block-diagonal forward operator across all timesteps."""
    builder = {"siddon": build_fan_beam_operator, "midpoint": build_midpoint_operator}
    if model not in builder:
        raise ValueError(f"unknown projector model {model!r}")
    blocks = [builder[model](geom, a + jitter_deg) for a in schedule.angles]
    return block_diagonal(blocks)


@dataclass
class SimulatedData:
    b: np.ndarray
    b_clean: np.ndarray
    delta: float  # exact noise norm, handy for the discrepancy principle
    m_t: int
    n_t: int


def simulate_sinogram(
    geom: FanBeamGeometry,
    schedule: AngleSchedule,
    seq: ImageSequence,
    noise_level: float = 0.1,
    seed: int = 0,
    jitter_deg: float = 0.5,
    model: str = "siddon",
) -> SimulatedData:
    """Project the sequence with a jittered operator and add scaled Gaussian noise.

    The noise gamma satisfies ||gamma|| = noise_level * ||H u|| exactly, so the
    returned delta is the true discrepancy target.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    n_x, n_y = geom.grid
    if (n_x, n_y, schedule.n_t) != (seq.n_x, seq.n_y, seq.n_t):
        raise ValueError(
            f"geometry/schedule ({n_x}x{n_y}x{schedule.n_t}) does not match "
            f"sequence ({seq.n_x}x{seq.n_y}x{seq.n_t})"
        )
    h = build_block_operator(geom, schedule, jitter_deg=jitter_deg, model=model)
    b_clean = h @ seq.data
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal(b_clean.size)
        gamma = noise_level * np.linalg.norm(b_clean) / np.linalg.norm(xi) * xi
    else:
        gamma = np.zeros_like(b_clean)
    b = b_clean + gamma
    return SimulatedData(
        b=b,
        b_clean=b_clean,
        delta=float(np.linalg.norm(gamma)),
        m_t=geom.n_rays * schedule.n_views,
        n_t=schedule.n_t,
    )


def save_sinogram_csv(data: SimulatedData, schedule: AngleSchedule, geom: FanBeamGeometry, path):
    """One row per (view, ray): t, angle_deg, ray_index, value (t is 1-based)."""
    with open(path, "w") as fh:
        fh.write("t,angle_deg,ray_index,value\n")
        pos = 0
        for t, angs in enumerate(schedule.angles, start=1):
            for ang in angs:
                for k in range(geom.n_rays):
                    fh.write(f"{t},{float(ang)!r},{k},{float(data.b[pos])!r}\n")
                    pos += 1


def save_sinogram_binary(data: SimulatedData, path):
    """Binary format: magic DYNB, u32 m_t and n_t, little-endian f64 values."""
    with open(path, "wb") as fh:
        fh.write(_DYNB_MAGIC)
        fh.write(struct.pack("<II", data.m_t, data.n_t))
        fh.write(np.asarray(data.b, dtype="<f8").tobytes())


def load_sinogram_binary(path) -> tuple:
    """Returns (b, m_t, n_t)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _DYNB_MAGIC:
        raise ValueError(f"{path}: not a DYNB sinogram file")
    m_t, n_t = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 8 * m_t * n_t:
        raise ValueError(f"{path}: truncated sinogram payload")
    return np.frombuffer(body, dtype="<f8").astype(np.float64), m_t, n_t
