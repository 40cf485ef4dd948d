import numpy as np
import pytest

from conftest import gradient_errors, piecewise_gradient_check
from npbrec.data import PhantomSpec, generate_smaps, make_sample
from npbrec.diffcore import Tensor, backward, fft2c_array, ifft2c_array
from npbrec.mri import MaskError, SamplingMask, apply_mask, make_random_mask, rss
from npbrec.model import (
    CheckpointFormatError,
    ModelConfig,
    WeightsMismatchError,
    cascade_step,
    forward_kspace,
    init_model,
    load_checkpoint,
    model_forward,
    parameter_shapes,
    save_checkpoint,
    sme_estimate,
)
from npbrec.training import ssim_loss

TINY = ModelConfig(cascades=2, channels=4, depth=3)


def full_mask(w):
    return SamplingMask(np.ones(w, dtype=bool), "random", 1, 0.5)


def as_params(weights):
    return {n: Tensor(w) for n, w in weights.items()}


@pytest.fixture(scope="module")
def sample():
    return make_sample(PhantomSpec(size=32, n_coils=4), 12)


# -- sensitivity estimation ---------------------------------------------------------------


@pytest.mark.parametrize("zero_last", [True, False])
def test_sme_output_normalized(sample, zero_last):
    w = init_model(TINY, seed=1, dtype=np.float64, zero_last=zero_last)
    mask = make_random_mask(32, 4, seed=0)
    k = apply_mask(sample.kspace_full.astype(np.float64), mask)
    s = sme_estimate(k, mask, as_params(w), TINY).data
    assert np.abs((s**2).sum(axis=(0, -1)) - 1).max() < 1e-5


def test_sme_single_coil_unit_magnitude():
    smp = make_sample(PhantomSpec(size=32, n_coils=1), 3)
    w = init_model(TINY, seed=2, dtype=np.float64, zero_last=False)
    mask = make_random_mask(32, 4, seed=0)
    s = sme_estimate(apply_mask(smp.kspace_full.astype(np.float64), mask), mask, as_params(w), TINY).data
    np.testing.assert_allclose(np.hypot(s[0, ..., 0], s[0, ..., 1]), 1.0, atol=1e-6)


def complex_correlation(a, b):
    ac = a[..., 0] + 1j * a[..., 1]
    bc = b[..., 0] + 1j * b[..., 1]
    return abs(np.vdot(ac, bc)) / (np.linalg.norm(ac) * np.linalg.norm(bc))


@pytest.mark.parametrize("acs_mask", ["full", "R4"])
def test_sme_recovers_true_maps_on_bump_image(acs_mask):
    n = 64
    yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="ij")
    bump = np.zeros((n, n, 2))
    bump[..., 0] = np.exp(-(yy**2 + xx**2) / (2 * 0.6**2))
    smaps = generate_smaps(PhantomSpec(size=n, n_coils=4), 21)
    k = fft2c_array(np.stack([smaps[..., 0] * bump[..., 0], smaps[..., 1] * bump[..., 0]], axis=-1))
    mask = full_mask(n) if acs_mask == "full" else make_random_mask(n, 4, seed=0)
    w = init_model(TINY, seed=0, dtype=np.float64)  # zero last layer: SME residual is identity
    est = sme_estimate(apply_mask(k, mask), mask, as_params(w), TINY).data
    for i in range(4):
        assert complex_correlation(est[i], smaps[i]) > 0.9


def test_sme_needs_center():
    cols = np.ones(32, dtype=bool)
    cols[16] = False
    w = init_model(TINY, dtype=np.float64)
    with pytest.raises(MaskError):
        sme_estimate(np.zeros((2, 32, 32, 2)), SamplingMask(cols, "random", 2, 0.1), as_params(w), TINY)


# -- cascade update ------------------------------------------------------------------------


def cascade_inputs(rng, eta):
    k = rng.standard_normal((3, 16, 16, 2))
    kt = rng.standard_normal((3, 16, 16, 2))
    s = rng.standard_normal((3, 16, 16, 2))
    cfg = ModelConfig(cascades=1, channels=4, depth=2, eta_init=eta)
    return k, kt, s, cfg


def test_cascade_zero_cnn_unit_eta_is_data_consistency(rng):
    k, kt, s, cfg = cascade_inputs(rng, 1.0)
    mask = make_random_mask(16, 2, 0.125, seed=4)
    out = cascade_step(k, kt, mask.as_array(), s, as_params(init_model(cfg, dtype=np.float64)), "cascade0", cfg).data
    np.testing.assert_array_equal(out[:, :, mask.columns], kt[:, :, mask.columns])
    np.testing.assert_array_equal(out[:, :, ~mask.columns], k[:, :, ~mask.columns])


def test_cascade_zero_eta_zero_cnn_fixed_point(rng):
    k, kt, s, cfg = cascade_inputs(rng, 0.0)
    mask = make_random_mask(16, 2, 0.125, seed=4)
    out = cascade_step(k, kt, mask.as_array(), s, as_params(init_model(cfg, dtype=np.float64)), "cascade0", cfg).data
    np.testing.assert_array_equal(out, k)


def test_cascade_matches_update_formula(rng):
    # oracle: the update assembled from plain array operations
    from npbrec.model import cnn_forward
    from npbrec.mri import expand, reduce

    k, kt, s, cfg = cascade_inputs(rng, 0.7)
    mask = make_random_mask(16, 2, 0.125, seed=4)
    w = init_model(cfg, seed=3, dtype=np.float64, zero_last=False)
    p = as_params(w)
    img = reduce(ifft2c_array(k), s).data
    g = fft2c_array(expand(cnn_forward(Tensor(img[None]), p, "cascade0", cfg).data, s).data)
    m = mask.as_array()
    expected = k - 0.7 * m * (k - kt) + g
    out = cascade_step(k, kt, m, s, p, "cascade0", cfg).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_cascade_gradients_eta_and_weights(rng):
    k, kt, s, cfg = cascade_inputs(rng, 0.8)
    k, kt, s = k[:2, :8, :8], kt[:2, :8, :8], s[:2, :8, :8]
    mask = make_random_mask(16, 2, 0.125, seed=4)
    m = mask.as_array()[:, :8]
    w = init_model(cfg, seed=5, dtype=np.float64, zero_last=False)
    names = sorted(n for n in w if n.startswith("cascade0"))
    r = rng.standard_normal(k.shape)

    def f(*ts):
        p = dict(zip(names, ts))
        return (cascade_step(k, kt, m, s, p, "cascade0", cfg) * r).sum()

    assert max(gradient_errors(f, [w[n] for n in names], probe=12)) < 1e-4


# -- model forward -------------------------------------------------------------------------------


def test_forward_shape_and_nonnegative(sample):
    w = init_model(TINY, seed=0, zero_last=False)
    mask = make_random_mask(32, 4, seed=1)
    out = model_forward(sample.masked_kspace(mask), mask, w, TINY).data
    assert out.shape == (32, 32) and out.min() >= 0 and out.dtype == np.float32


def test_forward_deterministic(sample):
    w = init_model(TINY, seed=0, zero_last=False)
    mask = make_random_mask(32, 4, seed=1)
    a = model_forward(sample.masked_kspace(mask), mask, w, TINY, seed=3).data
    b = model_forward(sample.masked_kspace(mask), mask, w, TINY, seed=3).data
    assert a.tobytes() == b.tobytes()


def test_forward_zero_cnn_full_sampling_closed_form(sample):
    w = init_model(TINY, seed=0, dtype=np.float64)
    k = sample.kspace_full.astype(np.float64)
    out = model_forward(k, full_mask(32), w, TINY).data
    ref = rss(ifft2c_array(k)).data
    assert np.abs(out - ref).max() < 1e-5


def test_forward_zero_cnn_masked_is_zero_filled(sample):
    w = init_model(TINY, seed=0, dtype=np.float64)
    mask = make_random_mask(32, 4, seed=2)
    k = apply_mask(sample.kspace_full.astype(np.float64), mask)
    out = model_forward(k, mask, w, TINY).data
    np.testing.assert_allclose(out, rss(ifft2c_array(k)).data, atol=1e-12)


def test_forward_kspace_keeps_measured_columns_exactly(sample):
    w = init_model(TINY, seed=0, dtype=np.float64)
    for n in w:
        if n.endswith(".eta"):
            w[n] = np.ones_like(w[n])
    mask = make_random_mask(32, 4, seed=3)
    k = apply_mask(sample.kspace_full.astype(np.float64), mask)
    out = forward_kspace(k, mask, w, TINY).data
    cols = mask.as_array(np.float64).reshape(-1) == 1
    assert out[:, :, cols].tobytes() == k[:, :, cols].tobytes()
    np.testing.assert_allclose(model_forward(k, mask, w, TINY).data, rss(ifft2c_array(out)).data, atol=0)


def test_mc_dropout_changes_output(sample):
    cfg = ModelConfig(cascades=2, channels=4, depth=3, with_dropout=True, dropout_p=0.2)
    w = init_model(cfg, seed=0, zero_last=False)
    mask = make_random_mask(32, 4, seed=1)
    k = sample.masked_kspace(mask)
    plain = model_forward(k, mask, w, cfg).data
    a = model_forward(k, mask, w, cfg, mc_dropout=True, seed=1).data
    b = model_forward(k, mask, w, cfg, mc_dropout=True, seed=2).data
    assert not np.array_equal(a, b) and not np.array_equal(a, plain)
    np.testing.assert_array_equal(model_forward(k, mask, w, cfg).data, plain)


def test_weights_config_mismatch(sample):
    w = init_model(TINY)
    w.pop("cascade1.eta")
    with pytest.raises(WeightsMismatchError):
        model_forward(sample.masked_kspace(full_mask(32)), full_mask(32), w, TINY)
    w = init_model(TINY)
    w["sme.conv0.weight"] = np.zeros((4, 2, 5, 5), dtype=np.float32)
    with pytest.raises(WeightsMismatchError):
        model_forward(sample.masked_kspace(full_mask(32)), full_mask(32), w, TINY)


def tiny_gradient_problem(arch, slope=0.1):
    # tiny model at target scale: 64x64, 4 coils, 2 cascades, double precision
    cfg = ModelConfig(cascades=2, channels=4, depth=3, architecture=arch, slope=slope)
    smp = make_sample(PhantomSpec(size=64, n_coils=4), 5)
    mask = make_random_mask(64, 4, seed=0)
    k = apply_mask(smp.kspace_full.astype(np.float64), mask)
    gt = smp.image_gt.astype(np.float64)
    w = init_model(cfg, seed=1, dtype=np.float64, zero_last=False)
    rng = np.random.default_rng(0)
    for n in w:
        if n.endswith(".bias"):
            w[n] = rng.uniform(-0.3, 0.3, w[n].shape)
    names = list(w)

    def f(*ts):
        return ssim_loss(model_forward(k, mask, dict(zip(names, ts)), cfg), gt)

    return f, [w[n] for n in names]


def test_full_model_gradient_check_smooth_activation():
    # slope 1 removes every kink, so plain central differences apply to all parameters
    f, arrays = tiny_gradient_problem("residual", slope=1.0)
    assert max(gradient_errors(f, arrays, probe=3)) < 1e-4


@pytest.mark.parametrize("arch", ["residual", "unet"])
def test_full_model_gradient_check(arch):
    f, arrays = tiny_gradient_problem(arch)
    errors, compared, probed = piecewise_gradient_check(f, arrays, probe=3)
    assert compared >= 0.8 * probed
    assert max(errors) < 1e-4


def test_no_dead_parameters(sample):
    w = init_model(TINY, seed=0, dtype=np.float64, zero_last=False)
    mask = make_random_mask(32, 4, seed=1)
    ts = {n: Tensor(v, requires_grad=True) for n, v in w.items()}
    loss = ssim_loss(model_forward(sample.masked_kspace(mask), mask, ts, TINY), sample.image_gt.astype(np.float64))
    grads = dict(zip(ts, backward(loss, list(ts.values()))))
    # the first cascade starts from k0 == k_tilde, so its data-consistency term is identically zero
    assert not grads.pop("cascade0.eta").any()
    assert all(np.abs(g).max() > 0 for g in grads.values())


# -- init -----------------------------------------------------------------------------------------


def test_init_deterministic_and_shapes():
    a, b = init_model(TINY, seed=4), init_model(TINY, seed=4)
    assert list(a) == list(b)
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)
    assert {n: v.shape for n, v in a.items()} == parameter_shapes(TINY)
    assert all(a[f"cascade{m}.eta"][0] == 1.0 for m in range(2))


def test_init_zero_last_layers():
    w = init_model(TINY, seed=4)
    for prefix in ("sme", "cascade0", "cascade1"):
        assert not w[f"{prefix}.conv2.weight"].any()
        assert w[f"{prefix}.conv1.weight"].any()


def test_init_fan_in_statistics():
    cfg = ModelConfig(cascades=1, channels=64, depth=3)
    w = init_model(cfg, seed=0, dtype=np.float64)["cascade0.conv1.weight"]
    bound = 1 / np.sqrt(64 * 3 * 3)
    # uniform(-b, b) has std b / sqrt(3)
    assert abs(w.std() - bound / np.sqrt(3)) < 0.2 * bound / np.sqrt(3)
    assert np.abs(w).max() <= bound
    assert abs(w.mean()) < 0.05 * bound


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(cascades=0)
    with pytest.raises(ValueError):
        ModelConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        ModelConfig(architecture="transformer")


# -- checkpoints -----------------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, sample):
    cfg = ModelConfig(cascades=2, channels=4, depth=3, architecture="unet")
    w = init_model(cfg, seed=9, zero_last=False)
    p = save_checkpoint(tmp_path / "c.bin", w, cfg, step=17)
    back, cfg2, step = load_checkpoint(p)
    assert cfg2 == cfg and step == 17 and list(back) == list(w)
    assert all(back[n].tobytes() == w[n].tobytes() for n in w)
    mask = make_random_mask(32, 4, seed=1)
    k = sample.masked_kspace(mask)
    assert model_forward(k, mask, back, cfg).data.tobytes() == model_forward(k, mask, w, cfg).data.tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    p = save_checkpoint(tmp_path / "c.bin", init_model(TINY), TINY, 1)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)
    p.write_bytes(b"garbage")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_checkpoint_bytes_deterministic(tmp_path):
    w = init_model(TINY, seed=2)
    a = save_checkpoint(tmp_path / "a.bin", w, TINY, 3).read_bytes()
    b = save_checkpoint(tmp_path / "b.bin", w, TINY, 3).read_bytes()
    assert a == b
