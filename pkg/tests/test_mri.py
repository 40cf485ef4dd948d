import numpy as np
import pytest

from conftest import gradient_errors, projected
from npbrec.data import PhantomSpec, generate_smaps
from npbrec.diffcore import ShapeError, fft2c_array, ifft2c_array
from npbrec.mri import (
    MaskError,
    SamplingMask,
    apply_mask,
    expand,
    forward_model,
    make_equispaced_mask,
    make_mask,
    make_random_mask,
    reduce,
    rss,
)


def random_complex(rng, shape):
    return rng.standard_normal(tuple(shape) + (2,))


def normalized_smaps(rng, nc, h, w):
    s = random_complex(rng, (nc, h, w))
    return s / np.sqrt((s**2).sum(axis=(0, -1), keepdims=True))


# -- masks ----------------------------------------------------------------------------


def test_equispaced_example_w32():
    m = make_equispaced_mask(32, 4, 0.08)
    assert abs(m.num_sampled - 8) <= 1
    sl = m.center_slice()
    assert sl.stop - sl.start >= 3
    assert m.columns[15:18].all()


def test_equispaced_example_w16():
    m = make_equispaced_mask(16, 2, 0.125)
    assert abs(m.num_sampled - 8) <= 1
    assert m.columns[7:9].all()


def test_equispaced_is_deterministic():
    a, b = make_equispaced_mask(64, 4, 0.08, offset=1), make_equispaced_mask(64, 4, 0.08, offset=1)
    np.testing.assert_array_equal(a.columns, b.columns)


@pytest.mark.parametrize("width", [16, 32, 64, 128, 256])
@pytest.mark.parametrize("R", [2, 4, 8])
@pytest.mark.parametrize("offset", [0, 1, 3])
def test_equispaced_budget(width, R, offset):
    cf = 0.08 if R == 4 else (0.04 if R == 8 else 0.16)
    try:
        m = make_equispaced_mask(width, R, cf, offset=offset)
    except MaskError:
        # some small widths cannot host a 2-column center at that fraction
        assert cf * width < 2 or cf * width >= width / R or round(cf * width) >= width / R
        return
    assert abs(m.num_sampled - width / R) <= 1
    nl = int(round(cf * width))
    pad = (width - nl + 1) // 2
    assert m.columns[pad : pad + nl].all()


def test_equispaced_outer_columns_are_regular():
    m = make_equispaced_mask(128, 4, 0.08)
    sl = m.center_slice()
    left = np.flatnonzero(m.columns[: sl.start])
    right = np.flatnonzero(m.columns[sl.stop :])
    gaps = np.concatenate([np.diff(left), np.diff(right)])
    assert gaps.max() - gaps.min() <= 1  # rounding of a fractional spacing


@pytest.mark.parametrize("R", [2, 4, 8])
def test_random_budget_is_exact_for_many_seeds(R):
    for seed in range(100):
        m = make_random_mask(64, R, seed=seed)
        assert m.num_sampled == 64 // R
        assert m.columns[m.center_slice()].all()


def test_random_is_deterministic_per_seed():
    a, b, c = make_random_mask(64, 4, seed=7), make_random_mask(64, 4, seed=7), make_random_mask(64, 4, seed=8)
    np.testing.assert_array_equal(a.columns, b.columns)
    assert not np.array_equal(a.columns, c.columns)


def test_full_sampling():
    assert make_random_mask(32, 1, 0.05).columns.all()
    assert make_equispaced_mask(32, 1, 0.05).columns.all()


def test_center_block_exceeding_budget_rejected():
    with pytest.raises(MaskError):
        make_random_mask(64, 8, 0.2)
    with pytest.raises(MaskError):
        make_equispaced_mask(64, 8, 0.2)


def test_mask_preconditions_rejected():
    with pytest.raises(MaskError):
        make_random_mask(8, 2, 0.25)
    with pytest.raises(MaskError):
        make_random_mask(64, 4, 0.01)
    with pytest.raises(MaskError):
        make_mask("radial", 64, 4)


def test_center_slice_requires_center():
    cols = np.ones(16, dtype=bool)
    cols[8] = False
    with pytest.raises(MaskError):
        SamplingMask(cols, "random", 2, 0.1).center_slice()


# -- forward model ----------------------------------------------------------------------------


def test_single_coil_identity_forward(rng):
    x = random_complex(rng, (16, 16))
    s = np.zeros((1, 16, 16, 2))
    s[..., 0] = 1
    np.testing.assert_allclose(forward_model(x, s), fft2c_array(x)[None], atol=1e-12)


def test_forward_then_reduce_recovers_image(rng):
    x = random_complex(rng, (32, 32))
    s = normalized_smaps(rng, 4, 32, 32)
    back = reduce(ifft2c_array(forward_model(x, s)), s).data
    assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-5


def test_forward_noise_statistics(rng):
    x = random_complex(rng, (64, 64))
    s = normalized_smaps(rng, 1, 64, 64)
    diff = forward_model(x, s, noise_std=0.1, seed=3) - forward_model(x, s)
    assert abs(diff.std() - 0.1) < 0.005
    assert abs(diff.mean()) < 0.01


def test_forward_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        forward_model(random_complex(rng, (16, 16)), random_complex(rng, (2, 16, 32)))


# -- apply_mask -------------------------------------------------------------------------------


def test_apply_mask_cases(rng):
    k = random_complex(rng, (3, 16, 16))
    ones = SamplingMask(np.ones(16, dtype=bool), "random", 1, 0.5)
    np.testing.assert_array_equal(apply_mask(k, ones), k)
    cols = np.zeros(16, dtype=bool)
    cols[7:9] = True
    out = apply_mask(k, SamplingMask(cols, "random", 8, 0.125))
    np.testing.assert_array_equal(out[:, :, 7:9], k[:, :, 7:9])
    assert not out[:, :, :7].any() and not out[:, :, 9:].any()


def test_apply_mask_idempotent(rng):
    k = random_complex(rng, (2, 32, 32))
    m = make_random_mask(32, 4, seed=1)
    once = apply_mask(k, m)
    np.testing.assert_array_equal(apply_mask(once, m), once)


def test_apply_mask_width_mismatch(rng):
    with pytest.raises(ShapeError):
        apply_mask(random_complex(rng, (2, 16, 32)), make_random_mask(16, 2, 0.125))


# -- expand / reduce / rss ---------------------------------------------------------------------


def test_reduce_expand_identity_under_normalization(rng):
    x = random_complex(rng, (16, 16))
    s = normalized_smaps(rng, 5, 16, 16)
    np.testing.assert_allclose(reduce(expand(x, s), s).data, x, atol=1e-12)


def test_reduce_expand_identity_with_phantom_smaps():
    spec = PhantomSpec(size=32, n_coils=6)
    s = generate_smaps(spec, 4).astype(np.float64)
    x = np.random.default_rng(0).standard_normal((32, 32, 2))
    np.testing.assert_allclose(reduce(expand(x, s), s).data, x, atol=1e-5)


def test_single_coil_expand_identity(rng):
    x = random_complex(rng, (8, 16))
    s = np.zeros((1, 8, 16, 2))
    s[..., 0] = 1
    np.testing.assert_array_equal(expand(x, s).data[0], x)


def test_expand_reduce_adjoint(rng):
    x = random_complex(rng, (16, 16))
    y = random_complex(rng, (3, 16, 16))
    s = random_complex(rng, (3, 16, 16))
    lhs = (expand(x, s).data * y).sum()  # real inner product == Re<.,.> over C
    rhs = (x * reduce(y, s).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-5)


def test_expand_reduce_gradients(rng):
    x = random_complex(rng, (4, 4))
    s = random_complex(rng, (2, 4, 4))
    y = random_complex(rng, (2, 4, 4))
    assert max(gradient_errors(projected(expand, (2, 4, 4, 2)), [x, s])) < 1e-4
    assert max(gradient_errors(projected(reduce, (4, 4, 2)), [y, s])) < 1e-4


def test_expand_reduce_shape_checks(rng):
    with pytest.raises(ShapeError):
        expand(random_complex(rng, (8, 8)), random_complex(rng, (2, 8, 4)))
    with pytest.raises(ShapeError):
        reduce(random_complex(rng, (3, 8, 8)), random_complex(rng, (2, 8, 8)))


def test_rss_single_coil_is_magnitude(rng):
    c = random_complex(rng, (1, 8, 8))
    np.testing.assert_allclose(rss(c).data, np.hypot(c[0, ..., 0], c[0, ..., 1]), rtol=1e-14)


def test_rss_two_identical_coils():
    c = np.zeros((2, 4, 4, 2))
    c[..., 0], c[..., 1] = 0.6, 0.8
    np.testing.assert_allclose(rss(c).data, np.full((4, 4), np.sqrt(2)), rtol=1e-14)


def test_rss_matches_scalar_loop(rng):
    c = random_complex(rng, (3, 5, 4))
    out = rss(c).data
    for i in range(5):
        for j in range(4):
            acc = 0.0
            for n in range(3):
                acc += c[n, i, j, 0] * c[n, i, j, 0] + c[n, i, j, 1] * c[n, i, j, 1]
            assert out[i, j] == pytest.approx(np.sqrt(acc), rel=4e-16)  # peak rescaling costs an ulp


def test_rss_gradient(rng):
    c = random_complex(rng, (3, 4, 4))
    assert max(gradient_errors(projected(rss, (4, 4)), [c])) < 1e-4
