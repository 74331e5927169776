import numpy as np
from scipy.special import ndtri
from scipy import stats

from diffquant import rng


def test_inverse_cdf_matches_scipy():
    u = np.concatenate([np.linspace(1e-300, 1e-10, 50), np.linspace(1e-6, 1 - 1e-6, 2001),
                        1 - np.logspace(-16, -3, 50)])
    np.testing.assert_allclose(rng.inverse_normal_cdf(u), ndtri(u), rtol=1e-14, atol=1e-14)


def test_streams_are_keyed_by_seed_and_path():
    k = rng.path_keys(42, np.arange(10))
    assert len(set(k.tolist())) == 10
    np.testing.assert_array_equal(k[3:7], rng.path_keys(42, np.arange(3, 7)))
    assert not np.array_equal(k, rng.path_keys(43, np.arange(10)))


def test_counter_access_is_order_free():
    keys = rng.path_keys(1, np.arange(1000))
    a = rng.normals(keys, 17)
    b = rng.normals(keys[::-1], 17)[::-1]
    np.testing.assert_array_equal(a, b)
    u = rng.uniforms(keys, 5)
    assert np.all((u > 0) & (u < 1))
    np.testing.assert_array_equal(rng.normals(keys, 5), rng.inverse_normal_cdf(u))


def test_normals_look_standard():
    z = rng.normals(rng.path_keys(0, np.arange(200_000)), 0)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_substeps_share_the_fine_path():
    keys = rng.path_keys(9, np.arange(64))
    d = 2
    coarse = rng.gaussian_increments(keys, 3, d, substeps=4)
    fine = np.stack([rng.gaussian_increments(keys, 3 * 4 + r, d) for r in range(4)])
    np.testing.assert_allclose(coarse, fine.sum(axis=0) / 2.0, rtol=0, atol=1e-14)


def test_euler_step_matches_numpy_formula():
    keys = rng.path_keys(5, np.arange(50))
    X = np.random.default_rng(0).normal(size=(50, 2))
    B = -X
    S = np.array([[[1.0, 0.3], [0.0, 2.0]]])
    dt = 0.01
    out, norms, top, inside, n_out = rng.euler_step(X, B, S, keys, 7, 1, dt,
                                                    box=([-1.0, -1.0], [1.0, 1.0]))
    xi = rng.gaussian_increments(keys, 7, 2)
    ref = X + B * dt + np.sqrt(dt) * xi @ S[0].T
    np.testing.assert_allclose(out, ref, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(norms, np.linalg.norm(ref, axis=1), rtol=1e-14)
    assert top == norms.max()
    expect = np.all(np.abs(ref) < 1, axis=1)
    np.testing.assert_array_equal(inside.astype(bool), expect)
    assert n_out == (~expect).sum()


def test_euler_step_skips_dead_rows():
    keys = rng.path_keys(5, np.arange(4))
    X = np.ones((4, 1))
    alive = np.array([1, 0, 1, 0], dtype=np.uint8)
    out, norms, *_ = rng.euler_step(X, np.zeros((1, 1)), np.ones((1, 1, 1)), keys, 0, 1, 0.1, alive)
    np.testing.assert_array_equal(out[alive == 0], X[alive == 0])
    assert np.all(out[alive == 1] != 1.0)
