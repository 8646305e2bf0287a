import numpy as np
import pytest
from scipy import sparse

from dynamo.flow import (
    FlowField,
    assemble_upsilon,
    auto_flow_scale,
    bilinear_resize,
    flow_regularizer,
    rescaled_solve_of,
    reverse_flow,
    save_flow_csv,
    save_flow_png,
    solve_of,
    spatiotemporal_gradients,
)
from dynamo.mmgks import SolverConfig


def mirror(i, n):
    """Symmetric (edge-repeating) index fold used for the border boxes."""
    while i < 0 or i >= n:
        if i < 0:
            i = -i - 1
        if i >= n:
            i = 2 * n - 1 - i
    return i


def gradients_oracle(a, b, dr):
    """Direct scalar-loop evaluation of the box-averaged difference sums."""
    n_x, n_y = a.shape
    h = max(dr, 1)
    u_x = np.zeros((n_x, n_y))
    u_y = np.zeros((n_x, n_y))
    u_t = np.zeros((n_x, n_y))
    for i in range(n_x):
        for j in range(n_y):
            # u_t: full box average of the forward time difference
            acc = 0.0
            for p in range(-dr, dr + 1):
                for q in range(-dr, dr + 1):
                    ii, jj = mirror(i + p, n_x), mirror(j + q, n_y)
                    acc += b[ii, jj] - a[ii, jj]
            u_t[i, j] = acc / (2 * dr + 1) ** 2
            # u_x, u_y: central differences averaged transversally and over frames
            accx = accy = 0.0
            for img in (a, b):
                for o in range(-dr, dr + 1):
                    accx += (
                        img[mirror(i + h, n_x), mirror(j + o, n_y)]
                        - img[mirror(i - h, n_x), mirror(j + o, n_y)]
                    )
                    accy += (
                        img[mirror(i + o, n_x), mirror(j + h, n_y)]
                        - img[mirror(i + o, n_x), mirror(j - h, n_y)]
                    )
            u_x[i, j] = accx / (2 * (2.0 * h * (2 * dr + 1)))
            u_y[i, j] = accy / (2 * (2.0 * h * (2 * dr + 1)))
    return u_x, u_y, u_t


def gaussian_blob(n, center, sigma=6.0):
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.exp(-(((ii - center[0]) ** 2 + (jj - center[1]) ** 2) / (2 * sigma**2)))


class TestGradients:
    def test_identical_frames_zero_ut(self):
        rng = np.random.default_rng(0)
        a = rng.random((8, 8))
        g = spatiotemporal_gradients(a, a, 1)
        assert np.abs(g.u_t).max() == 0.0

    def test_x_ramp_unit_gradient(self):
        img = np.tile(np.arange(10.0)[:, None], (1, 10))
        g = spatiotemporal_gradients(img, img, 0)
        assert np.allclose(g.u_x[1:-1, :], 1.0)
        assert np.allclose(g.u_y, 0.0)

    def test_random_pair_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((5, 5)), rng.random((5, 5))
        g = spatiotemporal_gradients(a, b, 1)
        ox, oy, ot = gradients_oracle(a, b, 1)
        assert np.allclose(g.u_x, ox, atol=1e-13)
        assert np.allclose(g.u_y, oy, atol=1e-13)
        assert np.allclose(g.u_t, ot, atol=1e-13)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        u1, v1 = rng.random((6, 7)), rng.random((6, 7))
        u2, v2 = rng.random((6, 7)), rng.random((6, 7))
        ga = spatiotemporal_gradients(u1, v1, 1)
        gb = spatiotemporal_gradients(u2, v2, 1)
        gc = spatiotemporal_gradients(2.0 * u1 + 3.0 * u2, 2.0 * v1 + 3.0 * v2, 1)
        assert np.allclose(gc.u_x, 2 * ga.u_x + 3 * gb.u_x, atol=1e-12)
        assert np.allclose(gc.u_t, 2 * ga.u_t + 3 * gb.u_t, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            spatiotemporal_gradients(np.zeros((4, 4)), np.zeros((4, 5)), 1)


class TestUpsilon:
    def test_zero_gradients_zero_operator(self):
        from dynamo.flow import GradientTriple

        g = GradientTriple(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))
        assert assemble_upsilon(g).nnz == 0

    def test_shape(self):
        rng = np.random.default_rng(3)
        g = spatiotemporal_gradients(rng.random((4, 5)), rng.random((4, 5)), 1)
        assert assemble_upsilon(g).shape == (20, 40)

    def test_action_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        g = spatiotemporal_gradients(rng.random((4, 4)), rng.random((4, 4)), 1)
        ups = assemble_upsilon(g)
        sx, sy = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        out = ups @ np.concatenate([sx.ravel(order="F"), sy.ravel(order="F")])
        expected = (g.u_x * sx + g.u_y * sy).ravel(order="F")
        assert np.allclose(out, expected, atol=1e-13)


class TestSolveOf:
    def test_identical_frames_zero_flow(self):
        a = gaussian_blob(16, (8, 8))
        s = solve_of(a, a)
        assert np.abs(s.s_x).max() == 0.0 and np.abs(s.s_y).max() == 0.0

    def test_translated_blob_recovery(self):
        n = 64
        a = gaussian_blob(n, (30.0, 32.0), sigma=8.0)
        b = gaussian_blob(n, (31.0, 32.0), sigma=8.0)  # content moved +1 in x
        s = solve_of(a, b)
        support = a > 0.1
        assert abs(s.s_x[support].mean() - 1.0) < 0.5
        assert abs(s.s_y[support].mean()) < 0.5

    def test_quadratic_path_matches_dense_solve_at_full_dimension(self):
        # fixed healthy gamma; the subspace reaches the full dimension, so the
        # solver must hit the dense normal-equations solution
        from dynamo.mmgks import mmgks

        rng = np.random.default_rng(5)
        n = 10
        a = gaussian_blob(n, (4.2, 5.0), sigma=2.5) + 0.01 * rng.random((n, n))
        b = gaussian_blob(n, (5.0, 5.2), sigma=2.5) + 0.01 * rng.random((n, n))
        gamma = 1e-2
        g = spatiotemporal_gradients(a, b, 1)
        ups = assemble_upsilon(g)
        reg = flow_regularizer(n, n)
        ut = g.u_t.ravel(order="F")
        cfg = SolverConfig(ell=10, max_iters=400, q=2.0, lambda_rule="fixed",
                           lambda_value=gamma, tol=0.0)
        got, trace = mmgks(ups, reg, -ut, cfg)
        assert trace.basis_dim[-1] == 2 * n * n
        dense = np.linalg.solve(
            (ups.T @ ups + gamma * reg.T @ reg).toarray(), -(ups.T @ ut)
        )
        assert np.linalg.norm(got - dense) / np.linalg.norm(dense) < 1e-6

    def test_selected_gamma_solution_matches_restricted_dense_oracle(self):
        # at the gamma the solver picked, its iterate must solve the dense
        # normal equations restricted to the final subspace
        rng = np.random.default_rng(15)
        n = 12
        a = gaussian_blob(n, (5.2, 6.0), sigma=3.0) + 0.01 * rng.random((n, n))
        b = gaussian_blob(n, (6.0, 6.2), sigma=3.0) + 0.01 * rng.random((n, n))
        cfg = SolverConfig(flow_iters=15, tol=0.0)
        s, trace = solve_of(a, b, cfg, return_trace=True)
        gamma = trace.lam[-1]
        v = trace.workspace.V[:, : trace.basis_dim[-1]]
        g = spatiotemporal_gradients(a, b, cfg.flow_delta_r)
        ups = assemble_upsilon(g).toarray()
        reg = flow_regularizer(n, n).toarray()
        ut = g.u_t.ravel(order="F")
        av, rv = ups @ v, reg @ v
        z = np.linalg.solve(av.T @ av + gamma * rv.T @ rv, -av.T @ ut)
        dense_restricted = v @ z
        got = s.as_vector()
        assert np.linalg.norm(got - dense_restricted) / np.linalg.norm(dense_restricted) < 1e-9

    def test_flow_lambda_floor_applied(self):
        a = gaussian_blob(32, (14.0, 16.0), sigma=5.0)
        b = gaussian_blob(32, (15.0, 16.0), sigma=5.0)
        cfg = SolverConfig(flow_iters=5)
        s, trace = solve_of(a, b, cfg, return_trace=True)
        g = spatiotemporal_gradients(a, b, cfg.flow_delta_r)
        floor = cfg.flow_lambda_floor_scale * float(np.mean(g.u_x**2 + g.u_y**2))
        assert all(l >= floor for l in trace.lam)

    def test_invariant_under_global_offset(self):
        # dyadic values keep the finite differences exact under the shift
        rng = np.random.default_rng(6)
        a = rng.integers(0, 64, (12, 12)).astype(float) / 64.0
        b = rng.integers(0, 64, (12, 12)).astype(float) / 64.0
        s1 = solve_of(a, b)
        s2 = solve_of(a + 1.0, b + 1.0)
        assert np.array_equal(s1.s_x, s2.s_x) and np.array_equal(s1.s_y, s2.s_y)

    def test_constant_frames_exact_zero(self):
        a = np.full((10, 10), 0.7)
        s = solve_of(a, a + 0.0)
        assert np.abs(s.as_vector()).max() == 0.0


class TestReverseFlow:
    def test_zero(self):
        s = FlowField.zero(5, 5)
        sp = reverse_flow(s)
        assert np.abs(sp.as_vector()).max() == 0.0

    def test_uniform_unit_shift(self):
        n = 6
        s = FlowField(n, n, np.ones((n, n)), np.zeros((n, n)))
        sp = reverse_flow(s)
        assert np.allclose(sp.s_x[1:, :], -1.0)
        assert np.allclose(sp.s_x[0, :], 0.0)
        assert np.abs(sp.s_y).max() == 0.0

    def test_scatter_relation_random_integer_field(self):
        rng = np.random.default_rng(7)
        n = 9
        sx = rng.integers(-2, 3, (n, n)).astype(float)
        sy = rng.integers(-2, 3, (n, n)).astype(float)
        s = FlowField(n, n, sx, sy)
        sp = reverse_flow(s)
        # last writer in row-major order wins at every filled target
        last_writer = {}
        for x in range(n):
            for y in range(n):
                tx = min(max(int(round(x + sx[x, y])), 0), n - 1)
                ty = min(max(int(round(y + sy[x, y])), 0), n - 1)
                last_writer[(tx, ty)] = (-sx[x, y], -sy[x, y])
        for (tx, ty), (vx, vy) in last_writer.items():
            assert sp.s_x[tx, ty] == vx and sp.s_y[tx, ty] == vy

    def test_involution_on_uniform_field_interior(self):
        n = 8
        s = FlowField(n, n, np.full((n, n), 2.0), np.full((n, n), -1.0))
        back = reverse_flow(reverse_flow(s))
        inner = slice(3, n - 3)
        assert np.allclose(back.s_x[inner, inner], 2.0)
        assert np.allclose(back.s_y[inner, inner], -1.0)


class TestRescaledSolve:
    def test_alpha_one_identical(self):
        a = gaussian_blob(20, (9, 10))
        b = gaussian_blob(20, (10, 10))
        s1 = solve_of(a, b)
        s2 = rescaled_solve_of(a, b, 1.0)
        assert np.array_equal(s1.s_x, s2.s_x)

    def test_uniform_translation_recovered_at_half_scale(self):
        n = 64
        a = gaussian_blob(n, (30.0, 32.0), sigma=9.0)
        b = gaussian_blob(n, (31.0, 32.0), sigma=9.0)
        s = rescaled_solve_of(a, b, 0.5)
        support = a > 0.1
        assert abs(s.s_x[support].mean() - 1.0) < 1.0

    def test_velocity_scaling_rule(self):
        # one pixel at half resolution is two pixels at full resolution
        small = np.ones((4, 4))
        up = bilinear_resize(small, (8, 8)) * (8 / 4)
        assert np.allclose(up, 2.0)

    def test_too_small_rejected(self):
        a = np.random.default_rng(8).random((12, 12))
        with pytest.raises(ValueError):
            rescaled_solve_of(a, a, 0.25)

    def test_alpha_out_of_range(self):
        a = np.zeros((8, 8))
        with pytest.raises(ValueError):
            rescaled_solve_of(a, a, 0.0)


def test_auto_flow_scale():
    assert auto_flow_scale(90, 90) == 0.5
    assert auto_flow_scale(50, 50) == 0.5
    assert auto_flow_scale(128, 128) == 0.25
    assert auto_flow_scale(30, 30) == 1.0


def test_flow_exports(tmp_path):
    rng = np.random.default_rng(9)
    s = FlowField(6, 6, rng.standard_normal((6, 6)), rng.standard_normal((6, 6)))
    csv = tmp_path / "flow.csv"
    save_flow_csv(s, csv)
    lines = csv.read_text().splitlines()
    assert lines[0] == "x,y,s_x,s_y" and len(lines) == 37
    png = tmp_path / "flow.png"
    save_flow_png(s, png)
    assert png.stat().st_size > 0
