import numpy as np
import pytest

from dynamo.flow import FlowField, spatiotemporal_gradients, assemble_upsilon
from dynamo.motion import (
    assemble_mbar,
    assemble_mbar_prime,
    assemble_mhat,
    motion_matrix_bilinear,
    motion_matrix_rounding,
)
from dynamo.phantoms import ImageSequence


def uniform_field(n, vx, vy):
    return FlowField(n, n, np.full((n, n), float(vx)), np.full((n, n), float(vy)))


def rounding_oracle(s: FlowField) -> np.ndarray:
    """Dense scalar-loop construction: row of (x, y) has a one at the rounded,
    clipped target."""
    n_x, n_y = s.n_x, s.n_y
    dense = np.zeros((n_x * n_y, n_x * n_y))
    for x in range(n_x):
        for y in range(n_y):
            tx = min(max(int(round(x + s.s_x[x, y])), 0), n_x - 1)
            ty = min(max(int(round(y + s.s_y[x, y])), 0), n_y - 1)
            dense[y * n_x + x, ty * n_x + tx] = 1.0
    return dense


def bilinear_sample(img, x, y):
    n_x, n_y = img.shape
    x = min(max(x, 0.0), n_x - 1.0)
    y = min(max(y, 0.0), n_y - 1.0)
    x0 = min(int(np.floor(x)), n_x - 2)
    y0 = min(int(np.floor(y)), n_y - 2)
    fx, fy = x - x0, y - y0
    return (
        img[x0, y0] * (1 - fx) * (1 - fy)
        + img[x0 + 1, y0] * fx * (1 - fy)
        + img[x0, y0 + 1] * (1 - fx) * fy
        + img[x0 + 1, y0 + 1] * fx * fy
    )


class TestRounding:
    def test_zero_flow_identity(self):
        m = motion_matrix_rounding(FlowField.zero(4, 4))
        assert np.array_equal(m.toarray(), np.eye(16))

    def test_uniform_shift_matches_scalar_oracle(self):
        s = uniform_field(3, 1, 0)
        m = motion_matrix_rounding(s)
        assert np.array_equal(m.toarray(), rounding_oracle(s))

    def test_random_field_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        n = 6
        s = FlowField(n, n, rng.uniform(-2, 2, (n, n)), rng.uniform(-2, 2, (n, n)))
        m = motion_matrix_rounding(s)
        assert np.array_equal(m.toarray(), rounding_oracle(s))

    def test_row_sums_exactly_one(self):
        rng = np.random.default_rng(1)
        n = 7
        s = FlowField(n, n, rng.uniform(-3, 3, (n, n)), rng.uniform(-3, 3, (n, n)))
        sums = motion_matrix_rounding(s) @ np.ones(n * n)
        assert np.array_equal(sums, np.ones(n * n))

    def test_rigid_shift_reproduces_previous_frame(self):
        rng = np.random.default_rng(2)
        n = 8
        prev = np.zeros((n, n))
        prev[2:5, 2:5] = rng.random((3, 3))
        nxt = np.roll(prev, (1, 0), axis=(0, 1))
        m = motion_matrix_rounding(uniform_field(n, 1, 0))
        got = (m @ nxt.ravel(order="F")).reshape((n, n), order="F")
        assert np.allclose(got[:-1, :], prev[:-1, :], atol=1e-14)


class TestBilinear:
    def test_integer_flow_equals_rounding(self):
        rng = np.random.default_rng(3)
        n = 6
        s = FlowField(
            n, n,
            rng.integers(-2, 3, (n, n)).astype(float),
            rng.integers(-2, 3, (n, n)).astype(float),
        )
        bi = motion_matrix_bilinear(s)
        ro = motion_matrix_rounding(s)
        assert np.array_equal(bi.toarray(), ro.toarray())

    def test_half_pixel_weights(self):
        n = 5
        s = FlowField.zero(n, n)
        s.s_x[2, 2] = 0.5
        m = motion_matrix_bilinear(s).toarray()
        row = 2 * n + 2
        assert m[row, 2 * n + 2] == pytest.approx(0.5)
        assert m[row, 2 * n + 3] == pytest.approx(0.5)
        assert np.count_nonzero(m[row]) == 2

    def test_matches_interpolation_oracle(self):
        rng = np.random.default_rng(4)
        n = 7
        img = rng.random((n, n))
        s = FlowField(n, n, rng.uniform(-1.5, 1.5, (n, n)), rng.uniform(-1.5, 1.5, (n, n)))
        out = (motion_matrix_bilinear(s) @ img.ravel(order="F")).reshape((n, n), order="F")
        for x in range(n):
            for y in range(n):
                expected = bilinear_sample(img, x + s.s_x[x, y], y + s.s_y[x, y])
                assert out[x, y] == pytest.approx(expected, abs=1e-12)

    def test_entries_in_unit_interval_rows_sum_one(self):
        rng = np.random.default_rng(5)
        n = 8
        s = FlowField(n, n, rng.uniform(-2, 2, (n, n)), rng.uniform(-2, 2, (n, n)))
        m = motion_matrix_bilinear(s)
        assert m.data.min() >= 0.0 and m.data.max() <= 1.0
        assert np.allclose(m @ np.ones(n * n), 1.0, atol=1e-12)


class TestBlockOperators:
    def test_two_frame_shape_and_structure(self):
        n = 4
        s = uniform_field(n, 0, 0)
        mbar = assemble_mbar([s])
        assert mbar.shape == (16, 32)
        expected = np.hstack([np.eye(16), -np.eye(16)])
        assert np.array_equal(mbar.toarray(), expected)

    def test_static_sequence_annihilated(self):
        rng = np.random.default_rng(6)
        n = 5
        frame = rng.random((n, n))
        seq = ImageSequence.from_frames([frame, frame, frame])
        flows = [FlowField.zero(n, n), FlowField.zero(n, n)]
        mbar = assemble_mbar(flows)
        assert np.abs(mbar @ seq.data).max() == 0.0

    def test_rigid_translation_annihilated_with_true_flow(self):
        # pattern with wide zero margins translating by (1, 1) per frame
        n, n_t = 12, 4
        rng = np.random.default_rng(7)
        base = np.zeros((n, n))
        base[4:7, 4:7] = rng.random((3, 3))
        frames = [np.roll(base, (t, t), axis=(0, 1)) for t in range(n_t)]
        seq = ImageSequence.from_frames(frames)
        flows = [uniform_field(n, 1, 1) for _ in range(n_t - 1)]
        rev = [uniform_field(n, -1, -1) for _ in range(n_t - 1)]
        mhat = assemble_mhat(
            assemble_mbar(flows, "rounding"), assemble_mbar_prime(rev, "rounding")
        )
        assert np.linalg.norm(mhat @ seq.data) <= 1e-12 * np.linalg.norm(seq.data)

    def test_shape_mismatch_rejected(self):
        s4 = [uniform_field(4, 0, 0)]
        s5 = [uniform_field(5, 0, 0)]
        with pytest.raises(ValueError):
            assemble_mhat(assemble_mbar(s4), assemble_mbar_prime(s5))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            assemble_mbar([])


class TestLinearizationEquivalence:
    def test_first_order_agreement_ratio(self):
        # globally bilinear image: interpolation is exact, so the motion
        # residual and the linearized constraint agree to second order
        n = 16
        ii, jj = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
        img = 0.3 + 0.05 * ii + 0.07 * jj + 0.02 * ii * jj
        d = (0.6, 0.8)
        inner = (slice(3, n - 3), slice(3, n - 3))

        def mismatch(eps):
            s = FlowField(n, n, np.full((n, n), eps * d[0]), np.full((n, n), eps * d[1]))
            m = motion_matrix_bilinear(s)
            lhs = (m @ img.ravel(order="F")).reshape((n, n), order="F") - img
            g = spatiotemporal_gradients(img, img, 1)
            ups = assemble_upsilon(g)
            rhs = (ups @ s.as_vector()).reshape((n, n), order="F") + g.u_t
            return np.linalg.norm((lhs - rhs)[inner])

        e2, e3 = mismatch(1e-2), mismatch(1e-3)
        assert e2 / e3 > 25.0  # second-order decay, ratio ~100
        assert e2 < 1e-4
