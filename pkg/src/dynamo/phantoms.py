"""Synthetic dynamic phantoms and image-sequence file I/O.

An image sequence is one flat vector: frame t (0-based) occupies positions
[t*n_s, (t+1)*n_s) and each frame is column-stacked (pixel (i, j) of the
n_x-by-n_y frame sits at j*n_x + i).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

_MAGIC = b"DYNU"


@dataclass
class ImageSequence:
    n_x: int
    n_y: int
    n_t: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.n_x * self.n_y * self.n_t:
            raise ValueError(
                f"sequence data has {self.data.size} values, expected "
                f"{self.n_x}*{self.n_y}*{self.n_t} = {self.n_x * self.n_y * self.n_t}"
            )

    @property
    def n_s(self) -> int:
        return self.n_x * self.n_y

    @property
    def shape(self):
        return (self.n_x, self.n_y, self.n_t)

    def frame(self, t: int) -> np.ndarray:
        """Frame t as an (n_x, n_y) array (column-stacked layout)."""
        ns = self.n_s
        return self.data[t * ns : (t + 1) * ns].reshape((self.n_x, self.n_y), order="F")

    def frames(self):
        return [self.frame(t) for t in range(self.n_t)]

    @classmethod
    def from_frames(cls, frames) -> "ImageSequence":
        frames = [np.asarray(f, dtype=np.float64) for f in frames]
        n_x, n_y = frames[0].shape
        data = np.concatenate([f.ravel(order="F") for f in frames])
        return cls(n_x, n_y, len(frames), data)


def moving_blocks(
    n_x: int = 90,
    n_y: int = 90,
    n_t: int = 12,
    seed: int = 0,
    block_size: int = 12,
    intensities=(1.0, 0.8, 0.9, 0.7),
    fast_speed: int = 2,
    slow_speed: int = 1,
) -> ImageSequence:
    """Four rigid blocks bouncing inside the frame, two fast and two slow.

    Velocities are integer pixels/frame so motion is an exact permutation of
    pixels; trajectories are re-drawn until no two blocks ever overlap.
    """
    if n_x < 3 * block_size or n_y < 3 * block_size:
        raise ValueError(
            f"grid {n_x}x{n_y} too small for four {block_size}x{block_size} blocks"
        )
    speeds = [fast_speed, fast_speed, slow_speed, slow_speed]
    for attempt in range(500):
        rng = np.random.default_rng((seed, attempt))
        tracks = []
        for v in speeds:
            x = int(rng.integers(0, n_x - block_size + 1))
            y = int(rng.integers(0, n_y - block_size + 1))
            vx = v * int(rng.choice([-1, 1]))
            vy = v * int(rng.choice([-1, 1]))
            pos = []
            for _ in range(n_t):
                pos.append((x, y))
                nx_, ny_ = x + vx, y + vy
                if nx_ < 0 or nx_ > n_x - block_size:
                    vx = -vx
                    nx_ = x + vx
                if ny_ < 0 or ny_ > n_y - block_size:
                    vy = -vy
                    ny_ = y + vy
                x, y = nx_, ny_
            tracks.append(pos)
        if _tracks_disjoint(tracks, block_size, n_t):
            break
    else:
        raise ValueError("could not place four non-overlapping block trajectories")

    frames = []
    for t in range(n_t):
        img = np.zeros((n_x, n_y))
        for track, val in zip(tracks, intensities):
            x, y = track[t]
            img[x : x + block_size, y : y + block_size] = val
        frames.append(img)
    return ImageSequence.from_frames(frames)


def _tracks_disjoint(tracks, size, n_t) -> bool:
    for t in range(n_t):
        for a in range(len(tracks)):
            xa, ya = tracks[a][t]
            for b in range(a + 1, len(tracks)):
                xb, yb = tracks[b][t]
                if abs(xa - xb) < size and abs(ya - yb) < size:
                    return False
    return True


def pinball(n_x: int = 50, n_y: int = 50, n_t: int = 30) -> ImageSequence:
    """A ball crossing a stationary ellipse from left to right.

    Ellipse semi-axes (20, 14) pixels at intensity 0.5 around the grid
    center; ball radius 4 at intensity 1.0, traversing the ellipse interior
    at constant speed along the horizontal axis.
    """
    cx, cy = (n_x - 1) / 2.0, (n_y - 1) / 2.0
    semi_h, semi_v = 20.0 * n_y / 50.0, 14.0 * n_x / 50.0
    radius = 4.0 * min(n_x, n_y) / 50.0
    travel = semi_h - radius - 4.0 * n_y / 50.0
    if travel <= 0:
        raise ValueError(f"grid {n_x}x{n_y} too small for the pinball layout")

    ii, jj = np.meshgrid(np.arange(n_x), np.arange(n_y), indexing="ij")
    ellipse = ((jj - cy) / semi_h) ** 2 + ((ii - cx) / semi_v) ** 2 <= 1.0

    frames = []
    for t in range(n_t):
        frac = t / max(n_t - 1, 1)
        bx, by = cx, cy - travel + 2.0 * travel * frac
        if ((by - cy) / semi_h) ** 2 + ((bx - cx) / semi_v) ** 2 >= (1.0 - radius / semi_h) ** 2:
            raise ValueError("ball path leaves the ellipse interior")
        img = np.where(ellipse, 0.5, 0.0)
        ball = (ii - bx) ** 2 + (jj - by) ** 2 <= radius**2
        img[ball] = 1.0
        frames.append(img)
    return ImageSequence.from_frames(frames)


def save_sequence(seq: ImageSequence, path) -> None:
    """Binary format: magic DYNU, u32 n_x, n_y, n_t, little-endian f64 data."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", seq.n_x, seq.n_y, seq.n_t))
        fh.write(seq.data.astype("<f8").tobytes())


def load_sequence(path) -> ImageSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a DYNU sequence file")
    n_x, n_y, n_t = struct.unpack("<III", raw[4:16])
    n = n_x * n_y * n_t
    body = raw[16:]
    if len(body) != 8 * n:
        raise ValueError(
            f"{path}: header promises {n} values but file holds {len(body) // 8}"
        )
    data = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ImageSequence(n_x, n_y, n_t, data)


def save_pgm(frame: np.ndarray, path, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary PGM with linear rescale; pass lo/hi for a global range."""
    lo = float(frame.min()) if lo is None else lo
    hi = float(frame.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    img = np.clip((frame - lo) / span * 255.0, 0, 255).astype(np.uint8)
    n_x, n_y = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{n_y} {n_x}\n255\n".encode())
        fh.write(img.tobytes())
