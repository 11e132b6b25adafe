import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdrsplat import renderer
from hdrsplat.renderer import (
    AVAILABLE_BACKENDS,
    Camera,
    MissingForwardState,
    SplatList,
    project,
    rasterize,
    rasterize_backward,
    render,
    render_backward,
)
from hdrsplat.scene import SH_C0, GaussianSet

BACKENDS = list(AVAILABLE_BACKENDS)


def axis_camera(size=16, focal=100.0):
    K = np.array([[focal, 0.0, (size - 1) / 2], [0.0, focal, (size - 1) / 2], [0.0, 0.0, 1.0]])
    return Camera(K, np.eye(3), np.zeros(3), size, size)


def random_scene(rng, n=8, degree=1):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    means = rng.uniform(-0.6, 0.6, (n, 3))
    sh = rng.normal(scale=0.3, size=(n, (degree + 1) ** 2, 3))
    sh[:, 0] = rng.uniform(0.5, 2.0, (n, 3))
    return GaussianSet(means, rng.uniform(0.15, 0.4, (n, 3)), q, rng.uniform(-1, 2, n), sh, degree)


def ring_camera(size=16):
    return Camera.look_at([0.3, 0.2, -3.0], [0, 0, 0], [0, 1, 0], 24.0, size, size)


def hand_splats(mean2d, cov2d, opacity, colors):
    m = len(opacity)
    return SplatList(np.arange(m), np.array(mean2d, float), np.array(cov2d, float), np.arange(m, dtype=float) + 1.0,
                     np.array(opacity, float), np.array(colors, float), n_gaussians=m)


def one_gaussian(mean, scale=0.1, logit=0.0, dc=(1.0, 1.0, 1.0)):
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = dc
    return GaussianSet([mean], [[scale] * 3], [[1.0, 0, 0, 0]], [logit], sh, 0)


class TestCamera:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Camera(np.eye(3), np.diag([1.0, 1.0, 1.1]), np.zeros(3), 4, 4)

    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            Camera(np.diag([0.0, 1.0, 1.0]), np.eye(3), np.zeros(3), 4, 4)

    def test_look_at_centre(self):
        cam = Camera.look_at([1.0, 2.0, 3.0], [0, 0, 0], [0, 1, 0], 10, 8, 8)
        np.testing.assert_allclose(cam.center, [1.0, 2.0, 3.0], atol=1e-12)
        np.testing.assert_allclose(cam.R @ (np.zeros(3) - cam.center) / np.linalg.norm(cam.center), [0, 0, 1],
                                   atol=1e-12)

    def test_dict_round_trip(self):
        cam = ring_camera()
        back = Camera.from_dict(cam.to_dict())
        for a in ("K", "R", "t"):
            np.testing.assert_array_equal(getattr(back, a), getattr(cam, a))


class TestProject:
    def test_on_axis_mean_at_principal_point(self):
        cam = axis_camera(16, 100.0)
        s = project(one_gaussian([0.0, 0.0, 2.0]), cam)
        np.testing.assert_array_equal(s.mean2d[0], [7.5, 7.5])

    def test_isotropic_covariance(self):
        f, sigma, z = 100.0, 0.05, 2.0
        s = project(one_gaussian([0.0, 0.0, z], sigma), axis_camera(16, f))
        expect = (f * sigma / z) ** 2 * np.eye(2)
        np.testing.assert_allclose(s.cov2d[0] - renderer.LOWPASS * np.eye(2), expect, rtol=1e-12)

    def test_lowpass_floor(self):
        s = project(random_scene(np.random.default_rng(0)), ring_camera())
        assert np.all(np.linalg.eigvalsh(s.cov2d) >= renderer.LOWPASS - 1e-12)

    def test_near_plane_culling(self):
        cam = axis_camera()
        gs = GaussianSet([[0, 0, 0.005], [0, 0, 0.01], [0, 0, 1.0], [0, 0, -1.0]], np.full((4, 3), 0.1),
                         np.tile([1.0, 0, 0, 0], (4, 1)), np.zeros(4), np.ones((4, 1, 3)), 0)
        assert sorted(project(gs, cam).index.tolist()) == [1, 2]

    def test_depth_order_with_index_tie_break(self):
        cam = axis_camera()
        means = [[0, 0, 3.0], [0.1, 0, 2.0], [-0.1, 0, 3.0], [0, 0.1, 1.0]]
        gs = GaussianSet(means, np.full((4, 3), 0.1), np.tile([1.0, 0, 0, 0], (4, 1)), np.zeros(4),
                         np.ones((4, 1, 3)), 0)
        assert project(gs, cam).index.tolist() == [3, 1, 0, 2]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        gs = random_scene(rng)
        perm = rng.permutation(len(gs))
        shuffled = GaussianSet(gs.means[perm], gs.scales[perm], gs.rotations[perm], gs.opacity_logits[perm],
                               gs.sh[perm], gs.sh_degree)
        cam = ring_camera()
        np.testing.assert_array_equal(render(gs, cam), render(shuffled, cam))

    def test_colors_clamped_at_zero(self):
        s = project(one_gaussian([0, 0, 2.0], dc=(-1.0, 0.5, 1.0)), axis_camera())
        np.testing.assert_allclose(s.color[0], [0.0, 0.5 * SH_C0, SH_C0])
        assert s.raw_color[0, 0] < 0


@pytest.mark.parametrize("backend", BACKENDS)
class TestRasterize:
    def test_single_splat_full_opacity(self, backend):
        cam = axis_camera(8)
        s = hand_splats([[3.0, 4.0]], [np.eye(2)], [1.0], [[0.2, 0.4, 0.6]])
        img = rasterize(s, cam, backend=backend)
        np.testing.assert_array_equal(img[4, 3], [0.2, 0.4, 0.6])

    def test_two_splats(self, backend):
        cam = axis_camera(8)
        c1, c2 = np.array([0.9, 0.1, 0.3]), np.array([0.2, 0.8, 0.5])
        s = hand_splats([[2.0, 2.0], [2.0, 2.0]], [np.eye(2), np.eye(2)], [0.5, 1.0], [c1, c2])
        img = rasterize(s, cam, backend=backend)
        np.testing.assert_allclose(img[2, 2], 0.5 * c1 + 0.5 * c2, atol=1e-12)

    def test_empty_scene(self, backend):
        cam = axis_camera(8)
        s = hand_splats(np.zeros((0, 2)), np.zeros((0, 2, 2)), [], np.zeros((0, 3)))
        np.testing.assert_array_equal(rasterize(s, cam, backend=backend), np.zeros((8, 8, 3)))

    def test_blend_weights_bounded(self, backend):
        rng = np.random.default_rng(2)
        gs = random_scene(rng, 20)
        s = project(gs, ring_camera())
        coverage = rasterize(s.with_colors(np.ones((len(s), 1))), ring_camera(), backend=backend)
        assert np.all(coverage >= 0) and np.all(coverage <= 1 + 1e-12)

    def test_color_linearity(self, backend):
        rng = np.random.default_rng(3)
        s = project(random_scene(rng), ring_camera())
        base = rasterize(s, ring_camera(), backend=backend)
        scaled = rasterize(s.with_colors(3.5 * s.color), ring_camera(), backend=backend)
        np.testing.assert_allclose(scaled, 3.5 * base, atol=1e-12, rtol=0)

    def test_multichannel(self, backend):
        rng = np.random.default_rng(4)
        s = project(random_scene(rng), ring_camera())
        img3 = rasterize(s, ring_camera(), backend=backend)
        img9 = rasterize(s.with_colors(np.concatenate([s.color, 2 * s.color, s.color ** 2], 1)), ring_camera(),
                         backend=backend)
        np.testing.assert_array_equal(img9[..., :3], img3)


class TestBackends:
    @pytest.mark.skipif("compiled" not in BACKENDS, reason="compiled kernels not built")
    def test_backends_agree(self):
        rng = np.random.default_rng(5)
        gs = random_scene(rng, 12)
        cam = ring_camera(20)
        g = rng.normal(size=(20, 20, 3))
        out = {}
        for b in BACKENDS:
            s = project(gs, cam)
            img = rasterize(s, cam, backend=b)
            out[b] = (img, rasterize_backward(s, cam, g))
        np.testing.assert_allclose(out["python"][0], out["compiled"][0], atol=1e-12, rtol=0)
        np.testing.assert_allclose(out["python"][1].color, out["compiled"][1].color, atol=1e-11, rtol=0)
        np.testing.assert_allclose(out["python"][1].opacity, out["compiled"][1].opacity, atol=1e-11, rtol=0)

    @pytest.mark.skipif("compiled" not in BACKENDS, reason="compiled kernels not built")
    def test_threads_bit_identical(self):
        rng = np.random.default_rng(6)
        gs = random_scene(rng, 12)
        cam = ring_camera(24)
        g = rng.normal(size=(24, 24, 3))
        results = []
        for threads in (1, 3, 4):
            s = project(gs, cam)
            img = rasterize(s, cam, backend="compiled", threads=threads)
            grads = rasterize_backward(s, cam, g, threads=threads)
            results.append((img.tobytes(), grads.color.tobytes(), grads.opacity.tobytes()))
        assert results[0] == results[1] == results[2]

    def test_backend_env(self, monkeypatch):
        monkeypatch.setenv("SEHDR_BACKEND", "python")
        assert renderer.default_backend() == "python"
        monkeypatch.setenv("SEHDR_BACKEND", "")
        assert renderer.default_backend() == BACKENDS[-1]

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv("SEHDR_THREADS", "4")
        assert renderer.thread_count() == 4
        monkeypatch.setenv("SEHDR_THREADS", "junk")
        assert renderer.thread_count() == 1


class TestBackward:
    def test_needs_forward_state(self):
        s = project(random_scene(np.random.default_rng(7)), ring_camera())
        with pytest.raises(MissingForwardState):
            rasterize_backward(s, ring_camera(), np.zeros((16, 16, 3)))

    def test_zero_upstream(self):
        gs = random_scene(np.random.default_rng(8))
        s = project(gs, ring_camera())
        rasterize(s, ring_camera())
        g_sh, g_op = render_backward(s, ring_camera(), np.zeros((16, 16, 3)))
        assert np.all(g_sh == 0) and np.all(g_op == 0)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_single_splat_dc_derivative(self, backend):
        cam = axis_camera(9, 60.0)
        gs = one_gaussian([0.0, 0.0, 2.0], 0.05, logit=0.3)
        s = project(gs, cam)
        rasterize(s, cam, backend=backend)
        g = np.zeros((9, 9, 3))
        g[4, 4, 1] = 1.0
        g_sh, _ = render_backward(s, cam, g)
        eta = 1.0 / (1.0 + np.exp(-0.3))  # falloff 1 at the centre pixel
        assert g_sh[0, 0, 1] == pytest.approx(eta * SH_C0, abs=1e-15)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_finite_differences(self, backend):
        rng = np.random.default_rng(9)
        gs = random_scene(rng, 8)
        cam = ring_camera(16)
        up = rng.normal(size=(16, 16, 3))
        s = project(gs, cam)
        rasterize(s, cam, backend=backend)
        g_sh, g_op = render_backward(s, cam, up)

        def obj():
            return float(np.sum(render(gs, cam, backend=backend) * up))

        h = 1e-4
        worst = 0.0
        for arr, grad in ((gs.sh, g_sh), (gs.opacity_logits, g_op)):
            for i in np.ndindex(arr.shape):
                old = arr[i]
                arr[i] = old + h
                fp = obj()
                arr[i] = old - h
                fm = obj()
                arr[i] = old
                num = (fp - fm) / (2 * h)
                worst = max(worst, abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-6))
        assert worst < 1e-4

    def test_upstream_shape_checked(self):
        gs = random_scene(np.random.default_rng(10))
        s = project(gs, ring_camera())
        rasterize(s, ring_camera())
        with pytest.raises(ValueError):
            rasterize_backward(s, ring_camera(), np.zeros((8, 8, 3)))


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_linearity_property(seed, scale):
    rng = np.random.default_rng(seed)
    gs = random_scene(rng, 6)
    cam = ring_camera(12)
    s = project(gs, cam)
    a = rasterize(s, cam)
    b = rasterize(s.with_colors(scale * s.color), cam)
    np.testing.assert_allclose(b, scale * a, atol=1e-12 * max(1.0, scale), rtol=0)
