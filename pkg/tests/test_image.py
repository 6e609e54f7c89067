import numpy as np
import pytest

from featsense import image
from featsense.errors import BadKernel
from featsense.image import ImagePipelineParams
from featsense.scan_io import Pose, StructuredScan


class TestGaussianBlur:
    def test_constant_unchanged(self):
        img = np.full((8, 16), 0.37)
        assert np.allclose(image.gaussian_blur(img, 1.0, 5), img)

    def test_impulse_center_weight(self):
        img = np.zeros((11, 11))
        img[5, 5] = 1.0
        out = image.gaussian_blur(img, 1.0, 5)
        k = image._gaussian_kernel(1.0, 5)
        assert out[5, 5] == pytest.approx(k[2] * k[2], rel=1e-12)

    def test_ksize_one_identity(self):
        img = np.random.default_rng(0).uniform(size=(6, 9))
        assert np.array_equal(image.gaussian_blur(img, 1.0, 1), img)

    def test_bad_kernel(self):
        with pytest.raises(BadKernel):
            image.gaussian_blur(np.zeros((4, 4)), 1.0, 4)
        with pytest.raises(BadKernel):
            image.gaussian_blur(np.zeros((4, 4)), 0.0, 5)

    def test_range_bounded(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0.2, 0.9, (10, 20))
        out = image.gaussian_blur(img, 2.0, 7)
        assert out.min() >= img.min() - 1e-12
        assert out.max() <= img.max() + 1e-12

    def test_column_wraparound(self):
        # panorama: an edge at column 0 must see its neighbors across the seam
        img = np.zeros((4, 8))
        img[:, 0] = 1.0
        out = image.gaussian_blur(img, 1.0, 3)
        assert np.allclose(out[:, -1], out[:, 1])


class TestNormalizeHistogram:
    def test_two_values(self):
        img = np.array([[0.2, 0.6], [0.2, 0.6]])
        out = image.normalize_histogram(img)
        assert np.allclose(out, [[0.0, 1.0], [0.0, 1.0]])

    def test_full_range_idempotent(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(size=(5, 7))
        img[0, 0], img[-1, -1] = 0.0, 1.0
        assert np.allclose(image.normalize_histogram(img), img, atol=1e-12)

    def test_constant_to_zero(self):
        img = np.full((3, 3), 0.5)
        assert np.array_equal(image.normalize_histogram(img), np.zeros((3, 3)))


class TestBilateralFilter:
    def test_constant_unchanged(self):
        img = np.full((6, 12), 0.8)
        out = image.bilateral_filter(img, 2.0, 0.1, 5)
        assert np.allclose(out, img)

    def test_step_preserved(self):
        # 1-row step of height 1 with tight range sigma: edge mostly survives
        img = np.zeros((3, 16))
        img[:, 8:] = 1.0
        out = image.bilateral_filter(img, 2.0, 0.05, 5)
        height = out[1, 11] - out[1, 4]
        assert height >= 0.9

    def test_wide_range_sigma_equals_gaussian(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(8, 16))
        out = image.bilateral_filter(img, 1.5, 1e6, 5)
        ref = image.gaussian_blur(img, 1.5, 5)
        assert np.allclose(out, ref, atol=1e-6)

    def test_range_bounded(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0.1, 0.6, (7, 9))
        out = image.bilateral_filter(img, 2.0, 0.2, 5)
        assert out.min() >= img.min() - 1e-12
        assert out.max() <= img.max() + 1e-12


class TestSobel:
    def test_constant_all_false(self):
        assert not image.sobel_edges(np.full((6, 8), 0.4), 0.5).any()

    def test_vertical_step_columns(self):
        img = np.zeros((6, 16))
        img[:, 8:] = 1.0
        mag = image.sobel_magnitude(img)
        # hand evaluation: |gx| = 4 in the two columns adjacent to the step
        assert np.allclose(mag[2, 7], 4.0)
        assert np.allclose(mag[2, 8], 4.0)
        mask = image.sobel_edges(img, 0.5)
        inner = mask[1:-1, 1:-1]
        cols = set(np.argwhere(inner)[:, 1] + 1)
        assert cols == {7, 8}

    def test_threshold_above_max(self):
        img = np.zeros((6, 16))
        img[:, 8:] = 1.0
        assert not image.sobel_edges(img, 4.1 * np.sqrt(2)).any()

    def test_border_frame_false(self):
        rng = np.random.default_rng(5)
        mask = image.sobel_edges(rng.uniform(size=(8, 10)), 1e-9)
        assert not mask[0].any() and not mask[-1].any()
        assert not mask[:, 0].any() and not mask[:, -1].any()


class TestFullPipeline:
    def _scan_from_intensity(self, intensity):
        rows, cols = intensity.shape
        points = np.ones((rows, cols, 3))
        valid = np.ones((rows, cols), dtype=bool)
        return StructuredScan(rows, cols, points, intensity, valid)

    def test_all_invalid_scan(self):
        rows, cols = 6, 12
        scan = StructuredScan(rows, cols, np.zeros((rows, cols, 3)),
                              np.zeros((rows, cols)),
                              np.zeros((rows, cols), dtype=bool))
        assert not image.intensity_edge_mask(scan).any()

    def test_pole_silhouette_columns(self):
        from featsense.synth import Cylinder, Plane, Scene, simulate_scan
        scene = Scene([Plane(np.array([1.0, 0, 0]), 8.0, 0.2),
                       Cylinder(4.0, 0.0, 0.3, -2.0, 4.0, 1.0)])
        scan = simulate_scan(scene, Pose.identity(), rows=16, cols=128,
                             vfov=30.0)
        mask = image.intensity_edge_mask(scan, ImagePipelineParams(
            sobel_threshold=0.3))
        # pole occupies columns around azimuth 0 => column cols/2
        pole_cols = np.argwhere(mask.any(axis=0)).ravel()
        assert len(pole_cols) > 0
        assert np.all(np.abs(pole_cols - 64) < 8)

    def test_salt_pepper_noise_suppressed(self):
        rng = np.random.default_rng(42)
        intensity = np.full((32, 128), 0.5)
        noisy = rng.random((32, 128)) < 0.02
        intensity[noisy] = rng.choice([0.0, 1.0], size=noisy.sum())
        scan = self._scan_from_intensity(intensity)
        mask = image.intensity_edge_mask(scan)
        raw = image.sobel_edges(intensity, ImagePipelineParams().sobel_threshold)
        # smoothing must kill most of the impulse response
        assert mask.sum() < raw.sum() / 3

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        scan = self._scan_from_intensity(rng.uniform(size=(12, 24)))
        m1 = image.intensity_edge_mask(scan)
        m2 = image.intensity_edge_mask(scan)
        assert np.array_equal(m1, m2)

    def test_dimensions_preserved(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(size=(9, 17))
        for fn in (lambda x: image.gaussian_blur(x, 1.0, 5),
                   image.normalize_histogram,
                   lambda x: image.bilateral_filter(x, 2.0, 0.1, 5),
                   lambda x: image.sobel_edges(x, 0.5)):
            assert fn(img).shape == img.shape


def test_write_pgm(tmp_path):
    img = np.linspace(0, 1, 20).reshape(4, 5)
    path = tmp_path / "x.pgm"
    image.write_pgm(img, path)
    data = path.read_bytes()
    assert data.startswith(b"P5\n5 4\n255\n")
    assert len(data) == len(b"P5\n5 4\n255\n") + 20
