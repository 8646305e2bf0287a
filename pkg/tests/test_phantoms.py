import numpy as np
import pytest

from dynamo.phantoms import (
    ImageSequence,
    load_sequence,
    moving_blocks,
    pinball,
    save_pgm,
    save_sequence,
)


class TestImageSequence:
    def test_frame_roundtrip(self):
        rng = np.random.default_rng(0)
        frames = [rng.random((4, 3)) for _ in range(5)]
        seq = ImageSequence.from_frames(frames)
        for t in range(5):
            assert np.array_equal(seq.frame(t), frames[t])

    def test_length_check(self):
        with pytest.raises(ValueError):
            ImageSequence(2, 2, 2, np.zeros(7))

    def test_column_stacked_layout(self):
        frame = np.array([[1.0, 3.0], [2.0, 4.0]])
        seq = ImageSequence.from_frames([frame])
        assert np.array_equal(seq.data, [1.0, 2.0, 3.0, 4.0])


class TestMovingBlocks:
    def test_paper_dimensions(self):
        seq = moving_blocks(90, 90, 12, seed=0)
        assert seq.shape == (90, 90, 12)

    def test_mass_constant_over_time(self):
        seq = moving_blocks(90, 90, 12, seed=1)
        sums = [seq.frame(t).sum() for t in range(12)]
        assert np.allclose(sums, sums[0])

    def test_centroid_displacement_matches_speed(self):
        seq = moving_blocks(90, 90, 12, seed=2)
        speeds = {1.0: 2, 0.8: 2, 0.9: 1, 0.7: 1}
        for value, speed in speeds.items():
            for t in range(11):
                a = np.argwhere(seq.frame(t) == value).mean(axis=0)
                b = np.argwhere(seq.frame(t + 1) == value).mean(axis=0)
                assert np.allclose(np.abs(b - a), speed)

    def test_zero_velocity_static(self):
        seq = moving_blocks(60, 60, 4, seed=3, fast_speed=0, slow_speed=0)
        for t in range(1, 4):
            assert np.array_equal(seq.frame(t), seq.frame(0))

    def test_intensities_in_unit_interval(self):
        seq = moving_blocks(90, 90, 6, seed=4)
        assert seq.data.min() >= 0.0 and seq.data.max() <= 1.0

    def test_too_small(self):
        with pytest.raises(ValueError):
            moving_blocks(20, 20, 3, seed=0)


class TestPinball:
    def test_dimensions(self):
        assert pinball(50, 50, 7).shape == (50, 50, 7)

    def test_stationary_ellipse(self):
        seq = pinball(50, 50, 10)
        base = pinball(50, 50, 1).frame(0)
        ellipse_only = np.where(base == 1.0, 0.5, base)
        for t in range(10):
            f = seq.frame(t)
            assert np.all((f == 1.0) | (f == ellipse_only))

    def test_ball_moves_left_to_right(self):
        seq = pinball(50, 50, 8)
        cols = [np.argwhere(seq.frame(t) == 1.0)[:, 1].mean() for t in range(8)]
        assert np.all(np.diff(cols) > 0)

    def test_intensities_in_unit_interval(self):
        seq = pinball()
        assert seq.data.min() >= 0.0 and seq.data.max() <= 1.0


class TestSequenceIO:
    def test_roundtrip_bit_identical(self, tmp_path):
        seq = moving_blocks(40, 40, 3, seed=5)
        path = tmp_path / "seq.dynu"
        save_sequence(seq, path)
        back = load_sequence(path)
        assert back.shape == seq.shape
        assert np.array_equal(back.data, seq.data)

    def test_truncated_file(self, tmp_path):
        seq = moving_blocks(40, 40, 3, seed=6)
        path = tmp_path / "seq.dynu"
        save_sequence(seq, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(ValueError):
            load_sequence(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dynu"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(ValueError):
            load_sequence(path)

    def test_minimal_header(self, tmp_path):
        seq = ImageSequence(2, 2, 1, np.arange(4.0))
        path = tmp_path / "tiny.dynu"
        save_sequence(seq, path)
        back = load_sequence(path)
        assert back.shape == (2, 2, 1)
        assert np.array_equal(back.data, np.arange(4.0))


def test_pgm_export(tmp_path):
    frame = np.linspace(0, 1, 12).reshape(3, 4)
    path = tmp_path / "f.pgm"
    save_pgm(frame, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    assert len(raw) == len(b"P5\n4 3\n255\n") + 12
