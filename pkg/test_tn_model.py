#!/usr/bin/env python3
"""Tests for feature maps, squeeze, the MPS block and the composed models."""

import math

import numpy as np
import pytest

from errors import CacheMismatch, ConfigError, DomainError, NumericalError, ShapeMismatch, SizeLimit
from optim import cross_entropy_with_logits
from tn_model import (
    BatchNorm,
    FeatureMap,
    LotenetModel,
    MlpModel,
    MltnModel,
    MpsBlock,
    SqueezeSpec,
    build_tenetx,
    contract_full_tensor,
    joint_feature_map_oracle,
    local_feature_map,
    lotenet_backward,
    lotenet_forward,
    mlp_backward,
    mlp_forward,
    mltn_backward,
    mltn_forward,
    mps_backward,
    mps_forward,
    mps_param_count,
    mps_to_full_tensor,
    plan_lotenet,
    plan_mltn,
    rearrange,
    squeeze,
    unsqueeze,
)


def random_block(rng, n_sites, feature_dim, bond_dim, output_dim, output_site=None):
    block = MpsBlock(n_sites, feature_dim, bond_dim, output_dim, output_site)
    for tensor in block.site_tensors:
        tensor[...] = rng.standard_normal(tensor.shape)
    return block


def assert_close_to_fd(loss_fn, params, grads, h=1e-5, rtol=1e-4, atol=1e-6):
    """Compare every analytic gradient entry against a central difference of loss_fn."""
    for name, p in params.items():
        flat = p.reshape(-1)
        analytic = grads[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = loss_fn()
            flat[i] = saved - h
            down = loss_fn()
            flat[i] = saved
            numeric = (up - down) / (2 * h)
            assert abs(numeric - analytic[i]) <= rtol * abs(analytic[i]) + atol, (
                f"{name}[{i}]: analytic {analytic[i]:.8g}, numeric {numeric:.8g}"
            )


def identity_chain(n_sites=3, bond_dim=2, output_dim=2):
    """d = 1 chain whose every transfer matrix is the identity and whose output site emits e0."""
    block = MpsBlock(n_sites, 1, bond_dim, output_dim, output_site=1)
    eye = np.eye(bond_dim)
    for j in range(n_sites):
        core = block.core(j)
        base = eye[: core.shape[1], : core.shape[2]]
        if j == block.output_site:
            core[...] = 0.0
            core[0, :, :, 0] = base
        else:
            core[0] = base
    return block


# --- Feature maps ---

def test_sinusoidal_map_examples():
    out = local_feature_map(np.array([0.0, 1.0, 0.5]), FeatureMap.SINUSOIDAL)
    assert out.shape == (3, 2)
    np.testing.assert_allclose(out[0], [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(out[1], [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(out[2], [math.sqrt(0.5), math.sqrt(0.5)], rtol=1e-12)


def test_sinusoidal_rows_are_unit_norm():
    x = np.random.default_rng(0).random((5, 7))
    out = local_feature_map(x, FeatureMap.SINUSOIDAL)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, rtol=1e-12)


def test_linear_map_sums_to_one_and_squeeze_adds_unit_axis():
    x = np.array([[0.2, 0.9]])
    np.testing.assert_allclose(local_feature_map(x, FeatureMap.LINEAR).sum(axis=-1), 1.0)
    lifted = local_feature_map(x, FeatureMap.SQUEEZE)
    assert lifted.shape == (1, 2, 1)
    assert FeatureMap.SQUEEZE.local_dim == 1 and FeatureMap.SINUSOIDAL.local_dim == 2


@pytest.mark.parametrize("value", [-0.1, 1.5, float("nan")])
def test_sinusoidal_map_rejects_out_of_range(value):
    with pytest.raises(DomainError):
        local_feature_map(np.array([value]), FeatureMap.SINUSOIDAL)


# --- Joint feature map ---

def test_joint_map_single_site_is_the_vector():
    phi = joint_feature_map_oracle([[0.3, 0.7]])
    np.testing.assert_array_equal(phi.array, [0.3, 0.7])


def test_joint_map_basis_case():
    phi = joint_feature_map_oracle([[1.0, 0.0], [0.0, 1.0]])
    expected = np.zeros((2, 2))
    expected[0, 1] = 1.0
    np.testing.assert_array_equal(phi.array, expected)


def test_joint_map_three_sites_elementwise():
    v1, v2, v3 = np.random.default_rng(1).standard_normal((3, 2))
    phi = joint_feature_map_oracle([v1, v2, v3])
    for i in range(2):
        for j in range(2):
            for k in range(2):
                assert phi[i, j, k] == pytest.approx(v1[i] * v2[j] * v3[k], rel=1e-14)


def test_joint_map_limits():
    with pytest.raises(SizeLimit):
        joint_feature_map_oracle([np.ones(2)] * 21)
    with pytest.raises(ShapeMismatch):
        joint_feature_map_oracle([np.ones(2), np.ones(3)])


# --- Squeeze / rearrange ---

def test_squeeze_worked_example():
    image = np.arange(1.0, 17.0).reshape(4, 4)
    sites = squeeze(image, SqueezeSpec(2, 4, 4))
    np.testing.assert_array_equal(
        sites, [[1, 2, 5, 6], [3, 4, 7, 8], [9, 10, 13, 14], [11, 12, 15, 16]]
    )


def test_squeeze_stride_one_is_flattening():
    image = np.random.default_rng(2).random((3, 5))
    sites = squeeze(image, SqueezeSpec(1, 3, 5))
    assert sites.shape == (15, 1)
    np.testing.assert_array_equal(sites[:, 0], image.reshape(-1))


def test_squeeze_first_layer_of_128_pixel_pipeline():
    spec = SqueezeSpec(4, 128, 128)
    assert (spec.n_sites, spec.feature_dim) == (1024, 16)
    assert squeeze(np.zeros((128, 128)), spec).shape == (1024, 16)


def test_squeeze_rejects_non_divisible_input():
    with pytest.raises(ShapeMismatch):
        SqueezeSpec(3, 8, 8)
    with pytest.raises(ShapeMismatch):
        squeeze(np.zeros((4, 8)), SqueezeSpec(2, 4, 4))


@pytest.mark.parametrize("stride", [1, 2, 4])
def test_unsqueeze_inverts_squeeze(stride):
    spec = SqueezeSpec(stride, 8, 8)
    batch = np.random.default_rng(stride).random((3, 8, 8))
    np.testing.assert_array_equal(unsqueeze(squeeze(batch, spec), spec), batch)
    np.testing.assert_array_equal(unsqueeze(squeeze(batch[0], spec), spec), batch[0])


def test_rearrange_examples():
    np.testing.assert_array_equal(rearrange(np.array([1.0, 2.0, 3.0, 4.0]), 2), [[1, 2], [3, 4]])
    assert rearrange(np.zeros(1024), 32).shape == (32, 32)
    with pytest.raises(ShapeMismatch):
        rearrange(np.zeros(10), 3)


def test_rearrange_inverts_stride_one_squeeze():
    image = np.random.default_rng(3).random((4, 4))
    sites = squeeze(image, SqueezeSpec(1, 4, 4))
    np.testing.assert_array_equal(rearrange(sites[:, 0], 4), image)


# --- MPS block ---

def test_site_shapes_follow_open_boundary_convention():
    block = MpsBlock(4, 2, 3, 2, output_site=2)
    assert [block.site_shape(j) for j in range(4)] == [(2, 3), (2, 3, 3), (2, 3, 3, 2), (2, 3)]
    assert MpsBlock(5, 1, 2, 1).output_site == 2
    with pytest.raises(ConfigError):
        MpsBlock(1, 2, 2, 2)
    with pytest.raises(ConfigError):
        MpsBlock(3, 2, 2, 2, output_site=3)


def test_param_count_examples():
    assert mps_param_count(MpsBlock(4, 2, 3, 2, output_site=2)) == 66
    assert mps_param_count(MpsBlock(6, 3, 1, 1)) == 6 * 3
    d, beta = 3, 4
    small = MpsBlock(4, d, beta, 2, output_site=1)
    large = MpsBlock(5, d, beta, 2, output_site=1)
    assert mps_param_count(large) - mps_param_count(small) == d * beta * beta


def test_identity_chain_emits_first_basis_vector():
    logits, _ = mps_forward(identity_chain(), np.ones((3, 1)))
    np.testing.assert_array_equal(logits, [1.0, 0.0])


def test_noise_free_initialisation_multiplies_site_features():
    block = MpsBlock.initialize(5, 1, 3, 4, noise=0.0, gain=0.5)
    x = np.array([[0.5], [2.0], [1.5], [3.0], [0.25]])
    logits, _ = mps_forward(block, x)
    np.testing.assert_allclose(logits, np.prod(x) * 0.5 ** 5 * np.ones(4), rtol=1e-12)


def test_forward_matches_full_tensor_oracle():
    rng = np.random.default_rng(4)
    for _ in range(120):
        n_sites = int(rng.integers(2, 7))
        d, beta, m = (int(v) for v in rng.integers(1, [4, 5, 4]))
        block = random_block(rng, n_sites, d, beta, m, int(rng.integers(n_sites)))
        sites = rng.standard_normal((n_sites, d))
        logits, _ = mps_forward(block, sites)
        expected = contract_full_tensor(mps_to_full_tensor(block), joint_feature_map_oracle(list(sites))).array
        assert np.linalg.norm(logits - expected) <= 1e-10 * np.linalg.norm(expected)


def test_full_tensor_of_bond_one_chain_is_an_outer_product():
    rng = np.random.default_rng(5)
    block = random_block(rng, 2, 3, 1, 2, output_site=1)
    theta = mps_to_full_tensor(block).array
    a0 = block.site_tensors[0][:, 0]
    a1 = block.site_tensors[1][:, 0, :]
    np.testing.assert_allclose(theta, np.einsum("i,jm->ijm", a0, a1), rtol=1e-12)


def test_full_tensor_of_identity_chain_reproduces_its_logits():
    block = identity_chain()
    theta = mps_to_full_tensor(block)
    assert theta.shape == (1, 1, 1, 2)
    np.testing.assert_array_equal(theta.array.reshape(2), [1.0, 0.0])


def test_full_tensor_size_limit():
    with pytest.raises(SizeLimit):
        mps_to_full_tensor(MpsBlock(21, 2, 1, 1))


def test_forward_is_linear_in_each_site():
    rng = np.random.default_rng(6)
    block = random_block(rng, 5, 2, 3, 2)
    sites = rng.standard_normal((5, 2))
    base, _ = mps_forward(block, sites)
    for j in range(5):
        scaled = block.copy()
        scaled.site_tensors[j] *= 2.5
        logits, _ = mps_forward(scaled, sites)
        assert np.linalg.norm(logits - 2.5 * base) <= 1e-11 * np.linalg.norm(base)


def test_stabilisation_does_not_change_logits():
    rng = np.random.default_rng(7)
    block = random_block(rng, 12, 3, 4, 3)
    sites = rng.standard_normal((6, 12, 3))
    stable, _ = mps_forward(block, sites, stabilize=True)
    raw, _ = mps_forward(block, sites, stabilize=False)
    assert np.linalg.norm(stable - raw) <= 1e-10 * np.linalg.norm(raw)


def test_batched_forward_matches_per_sample():
    rng = np.random.default_rng(8)
    block = random_block(rng, 4, 2, 2, 3)
    sites = rng.standard_normal((3, 4, 2))
    batched, _ = mps_forward(block, sites)
    for b in range(3):
        single, _ = mps_forward(block, sites[b])
        assert np.linalg.norm(batched[b] - single) <= 1e-12 * np.linalg.norm(single)


def test_forward_rejects_bad_sites_and_vanishing_products():
    block = random_block(np.random.default_rng(9), 3, 2, 2, 2, output_site=2)
    with pytest.raises(ShapeMismatch):
        mps_forward(block, np.ones((3, 3)))
    block.site_tensors[0][...] = 0.0
    with pytest.raises(NumericalError):
        mps_forward(block, np.ones((3, 2)))
    block.site_tensors[0][...] = np.nan
    with pytest.raises(NumericalError):
        mps_forward(block, np.ones((3, 2)))


def test_backward_of_zero_gradient_is_zero():
    rng = np.random.default_rng(10)
    block = random_block(rng, 4, 2, 3, 2)
    _, cache = mps_forward(block, rng.standard_normal((4, 2)))
    grad_sites, grad_input = mps_backward(block, cache, np.zeros(2))
    assert all(not g.any() for g in grad_sites)
    assert not grad_input.any()


@pytest.mark.parametrize("output_site", [0, 1, 2])
def test_backward_matches_finite_differences(output_site):
    rng = np.random.default_rng(11 + output_site)
    block = random_block(rng, 3, 2, 2, 2, output_site)
    sites = rng.standard_normal((3, 2))
    upstream = rng.standard_normal(2)

    def loss():
        return float(upstream @ mps_forward(block, sites)[0])

    _, cache = mps_forward(block, sites)
    grad_sites, grad_input = mps_backward(block, cache, upstream)
    params = {f"site{j}": t for j, t in enumerate(block.site_tensors)}
    grads = {f"site{j}": g for j, g in enumerate(grad_sites)}
    params["input"], grads["input"] = sites, grad_input
    assert_close_to_fd(loss, params, grads, rtol=1e-5)


def test_identity_chain_input_gradient():
    block = identity_chain()
    sites = np.ones((3, 1))
    _, cache = mps_forward(block, sites)
    _, grad_input = mps_backward(block, cache, np.array([1.0, 0.0]))
    np.testing.assert_allclose(grad_input, np.ones((3, 1)), rtol=1e-12)
    assert_close_to_fd(
        lambda: float(mps_forward(block, sites)[0][0]), {"input": sites}, {"input": grad_input}
    )


def test_backward_rejects_foreign_cache():
    rng = np.random.default_rng(14)
    block = random_block(rng, 3, 2, 2, 2)
    other = random_block(rng, 3, 2, 3, 2)
    _, cache = mps_forward(other, rng.standard_normal((3, 2)))
    with pytest.raises(CacheMismatch):
        mps_backward(block, cache, np.ones(2))
    _, cache = mps_forward(block, rng.standard_normal((3, 2)))
    with pytest.raises(CacheMismatch):
        mps_backward(block, cache, np.ones(3))


# --- Batch norm ---

def test_batch_norm_training_output_is_standardised():
    norm = BatchNorm(2, shift_init=0.0)
    x = np.random.default_rng(15).standard_normal((8, 3, 3, 2)) * 4.0 + 7.0
    y, _ = norm.forward(x, training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1.0, rtol=1e-4)
    np.testing.assert_allclose(norm.running_mean, 0.1 * x.mean(axis=(0, 1, 2)), rtol=1e-12)


def test_batch_norm_calibrate_matches_training_normalisation():
    x = np.random.default_rng(16).standard_normal((4, 2, 2, 1)) + 3.0
    calibrated = BatchNorm(1).calibrate(x)
    trained, _ = BatchNorm(1).forward(x, training=True)
    np.testing.assert_allclose(calibrated, trained, rtol=1e-12)


def test_batch_norm_rejects_bad_settings():
    with pytest.raises(ConfigError):
        BatchNorm(1, momentum=1.5)
    with pytest.raises(ShapeMismatch):
        BatchNorm(2).forward(np.zeros((2, 2, 1)), training=False)


# --- Dimension chain ---

def test_plan_reproduces_128_pixel_pipeline():
    plans = plan_mltn(128, 128, [4, 4, 4], 2)
    assert [(p.grid_height, p.grid_width) for p in plans] == [(32, 32), (8, 8), (2, 2)]
    assert [p.feature_dim for p in plans] == [16, 16, 16]
    assert [p.output_dim for p in plans] == [1024, 64, 2]


def test_plan_site_counts_follow_stride_products():
    plans = plan_mltn(64, 64, [2, 2, 4], 3)
    product = 1
    for p in plans:
        product *= p.stride ** 2
        assert p.n_sites == 64 * 64 // product
        assert p.feature_dim == p.stride ** 2


@pytest.mark.parametrize(
    "height, width, strides",
    [(128, 128, [16, 16]), (8, 4, [2, 2]), (4, 4, [4]), (8, 8, [])],
)
def test_plan_rejects_broken_chains(height, width, strides):
    with pytest.raises(ConfigError):
        plan_mltn(height, width, strides, 2)


def test_lotenet_plan_needs_patch_strides_above_one():
    with pytest.raises(ConfigError):
        plan_lotenet(8, 8, [1, 2], 2, 2, 4)
    plans = plan_lotenet(8, 8, [2, 2], 2, 2, 3)
    assert (plans[0].n_blocks, plans[0].n_sites, plans[0].feature_dim, plans[0].output_dim) == (16, 4, 2, 3)
    assert plans[1].feature_dim == 4 * 3


# --- MLTN ---

def small_mltn(seed=0, calibration=None, feature_map=FeatureMap.SQUEEZE):
    return MltnModel.build(
        8, 8, [2, 2], 2, 2, feature_map, rng=np.random.default_rng(seed), calibration=calibration
    )


def test_mltn_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    images = rng.random((4, 8, 8))
    labels = np.array([0, 1, 1, 0])
    model = small_mltn(calibration=images)

    def loss():
        logits, _ = mltn_forward(model, images, training=True)
        return cross_entropy_with_logits(logits, labels)[0]

    logits, cache = mltn_forward(model, images, training=True)
    _, grad_logits = cross_entropy_with_logits(logits, labels)
    grads = mltn_backward(model, cache, grad_logits, want_input_grad=True)
    assert set(grads.params) == set(model.parameters())
    assert_close_to_fd(loss, model.parameters(), grads.params)
    assert_close_to_fd(loss, {"input": images}, {"input": grads.input})


def test_mltn_zero_upstream_gives_zero_grads():
    images = np.random.default_rng(18).random((3, 8, 8))
    model = small_mltn(calibration=images)
    _, cache = model.forward(images, training=True)
    grads = model.backward(cache, np.zeros((3, 2)))
    assert all(not g.any() for g in grads.params.values())


def test_mltn_duplicated_batch_doubles_gradient():
    rng = np.random.default_rng(19)
    image = rng.random((1, 8, 8))
    upstream = rng.standard_normal((1, 2))
    model = small_mltn(calibration=rng.random((4, 8, 8)))
    _, cache = model.forward(image, training=False)
    single = model.backward(cache, upstream).params
    _, cache = model.forward(np.concatenate([image, image]), training=False)
    double = model.backward(cache, np.concatenate([upstream, upstream])).params
    for name, g in single.items():
        assert np.linalg.norm(double[name] - 2.0 * g) <= 1e-10 * np.linalg.norm(g)


def test_mltn_eval_batch_matches_single_samples():
    images = np.random.default_rng(20).random((2, 8, 8))
    model = small_mltn(calibration=images)
    batched, _ = model.forward(images)
    for b in range(2):
        single, _ = model.forward(images[b:b + 1])
        assert np.linalg.norm(batched[b] - single[0]) <= 1e-10 * np.linalg.norm(single[0])


def test_mltn_rejects_wrong_image_size_and_foreign_cache():
    model = small_mltn()
    with pytest.raises(ShapeMismatch):
        model.forward(np.zeros((1, 4, 4)))
    other = MltnModel.build(8, 8, [2], 2, 2, rng=np.random.default_rng(0))
    _, cache = other.forward(np.full((1, 8, 8), 0.5))
    with pytest.raises(CacheMismatch):
        model.backward(cache, np.zeros((1, 2)))


def test_black_block_under_squeeze_map_names_the_remedy():
    rng = np.random.default_rng(21)
    calibration = 0.2 + 0.6 * rng.random((4, 8, 8))
    images = calibration.copy()
    images[0, :2, :2] = 0.0
    with pytest.raises(NumericalError, match="--feature-map linear"):
        small_mltn(calibration=calibration).forward(images)
    logits, _ = small_mltn(calibration=calibration, feature_map=FeatureMap.LINEAR).forward(images)
    assert np.all(np.isfinite(logits))


def test_mltn_constructor_checks_the_chain():
    model = small_mltn()
    with pytest.raises(ConfigError):
        MltnModel(model.layers[:1], 2)


def test_tenetx_is_the_stride_one_sinusoidal_mltn():
    images = np.random.default_rng(21).random((3, 4, 4))
    tenetx = build_tenetx(4, 4, 3, 2, rng=np.random.default_rng(5))
    mltn = MltnModel.build(4, 4, [1], 3, 2, FeatureMap.SINUSOIDAL, rng=np.random.default_rng(5))
    assert tenetx.kind == "tenetx" and len(tenetx.layers) == 1
    a, _ = tenetx.forward(images)
    b, _ = mltn.forward(images)
    np.testing.assert_array_equal(a, b)

    sites = local_feature_map(images, FeatureMap.SINUSOIDAL).reshape(3, 16, 2)
    direct, _ = mps_forward(tenetx.layers[0].mps, sites)
    np.testing.assert_allclose(a, direct, rtol=1e-12)


def test_full_size_parameter_counts():
    rng = np.random.default_rng(0)
    mltn = MltnModel.build(128, 128, [4, 4, 4], 5, 2, rng=rng)
    tenetx = build_tenetx(128, 128, 5, 2, rng=rng)
    lotenet = LotenetModel.build(128, 128, [4, 4, 4], 5, 2, rng=rng)
    coarse = MltnModel.build(128, 128, [16, 4], 5, 2, rng=rng)
    assert mltn.param_count() == 869_684
    assert tenetx.param_count() == 819_170
    assert lotenet.param_count() == 1_007_696
    assert lotenet.param_count() > mltn.param_count()
    assert coarse.param_count() < tenetx.param_count()
    scalar_patches = LotenetModel.build(128, 128, [4, 4, 4], 5, 2, channels=1, rng=rng)
    assert scalar_patches.param_count() < mltn.param_count()


def test_long_chain_stays_finite():
    rng = np.random.default_rng(22)
    images = rng.random((4, 128, 128))
    model = MltnModel.build(128, 128, [4, 4, 4], 5, 2, rng=rng, calibration=images)
    assert model.layers[0].mps.n_sites == 1024
    logits, cache = model.forward(images, training=True)
    assert np.all(np.isfinite(logits))
    _, grad_logits = cross_entropy_with_logits(logits, [0, 1, 0, 1])
    grads = model.backward(cache, grad_logits).params
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_non_finite_weights_abort_with_layer_diagnostic():
    images = np.random.default_rng(23).random((2, 8, 8))
    model = small_mltn(calibration=images)
    model.layers[1].mps.site_tensors[0][...] = np.inf
    with pytest.raises(NumericalError):
        model.forward(images)


def test_describe_lists_every_layer():
    lines = small_mltn().describe()
    assert len(lines) == 2
    assert "squeeze k=2" in lines[0] and "2 logits" in lines[1]


# --- LoTeNet ---

def test_lotenet_single_layer_reduces_to_mltn():
    images = np.random.default_rng(24).random((3, 8, 8))
    lotenet = LotenetModel.build(8, 8, [2], 2, 2, FeatureMap.SINUSOIDAL, rng=np.random.default_rng(6))
    mltn = MltnModel.build(8, 8, [2], 2, 2, FeatureMap.SINUSOIDAL, rng=np.random.default_rng(6))
    a, _ = lotenet_forward(lotenet, images)
    b, _ = mltn.forward(images)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_lotenet_patches_are_row_major_blocks():
    images = np.random.default_rng(25).random((2, 8, 8))
    model = LotenetModel.build(
        8, 8, [4, 1], 2, 2, FeatureMap.SINUSOIDAL, channels=4, rng=np.random.default_rng(7)
    )
    assert len(model.patch_layers[0].blocks) == 4
    logits, cache = model.forward(images)
    assert logits.shape == (2, 2)
    top_right = local_feature_map(images[:, :4, 4:], FeatureMap.SINUSOIDAL).reshape(2, 16, 2)
    np.testing.assert_array_equal(cache.layers[0].mps[1].sites, top_right)


def test_lotenet_gradients_match_finite_differences():
    rng = np.random.default_rng(26)
    images = 0.01 + 0.98 * rng.random((3, 8, 8))
    labels = np.array([1, 0, 1])
    model = LotenetModel.build(
        8, 8, [2, 2], 2, 2, FeatureMap.SINUSOIDAL, channels=2, rng=rng, calibration=images
    )

    def loss():
        logits, _ = model.forward(images, training=True)
        return cross_entropy_with_logits(logits, labels)[0]

    logits, cache = model.forward(images, training=True)
    _, grad_logits = cross_entropy_with_logits(logits, labels)
    grads = lotenet_backward(model, cache, grad_logits, want_input_grad=True)
    assert set(grads.params) == set(model.parameters())
    assert_close_to_fd(loss, model.parameters(), grads.params)
    assert_close_to_fd(loss, {"input": images}, {"input": grads.input})


# --- MLP ---

def test_mlp_identity_layer_selects_inputs():
    weight = np.zeros((4, 2))
    weight[1, 0] = weight[3, 1] = 1.0
    model = MlpModel([weight], [np.zeros(2)])
    batch = np.arange(8.0).reshape(2, 2, 2)
    np.testing.assert_array_equal(mlp_forward(model, batch), [[1.0, 3.0], [5.0, 7.0]])


def test_mlp_zero_input_gives_zero_logits():
    model = MlpModel.build(16, [8, 4, 2], np.random.default_rng(27))
    np.testing.assert_array_equal(mlp_forward(model, np.zeros((3, 4, 4))), np.zeros((3, 2)))


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(28)
    model = MlpModel.build(16, [8, 4, 2], rng)
    batch = rng.standard_normal((5, 4, 4))
    labels = np.array([0, 1, 1, 0, 1])

    def loss():
        return cross_entropy_with_logits(mlp_forward(model, batch), labels)[0]

    _, grad_logits = cross_entropy_with_logits(mlp_forward(model, batch), labels)
    grads = mlp_backward(model, batch, grad_logits)
    assert_close_to_fd(loss, model.parameters(), grads.params)
    assert_close_to_fd(loss, {"input": batch}, {"input": grads.input})


def test_mlp_rejects_inconsistent_layers():
    with pytest.raises(ShapeMismatch):
        MlpModel([np.zeros((4, 3)), np.zeros((2, 2))], [np.zeros(3), np.zeros(2)])
    with pytest.raises(ShapeMismatch):
        mlp_forward(MlpModel.build(16, [2]), np.zeros((1, 3, 3)))
