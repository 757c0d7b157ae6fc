import numpy as np
import pytest
from conftest import rel_err

from anomem import autodiff as ad
from anomem.encoder import EncoderSpec, StageSpec, encode, encoder_forward, encoder_init, preprocess
from anomem.errors import DimensionError, ValidationError


def _toy_spec(**kw):
    return EncoderSpec((8, 8, 2), [StageSpec(3, 1, 2), StageSpec(4, 1, 2)], 4, **kw)


def test_same_seed_bit_identical():
    a, b = encoder_init(EncoderSpec(), 3), encoder_init(EncoderSpec(), 3)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    c = encoder_init(EncoderSpec(), 4)
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)


def test_default_spec_channel_widths():
    state = encoder_init(EncoderSpec(), 0)
    assert [k.shape[-1] for k in state.kernels[0]] == [64, 64]
    assert [k.shape[-1] for k in state.kernels[1]] == [128, 128]
    assert state.kernels[0][0].shape == (3, 3, 3, 64)
    assert EncoderSpec().map_shapes() == [(8, 8, 64), (128,)]


def test_kernel_variance_matches_fan_in():
    spec = EncoderSpec((32, 32, 3), [StageSpec(64, 2, 2), StageSpec(128, 1, 2)], 128)
    k = encoder_init(spec, 0).kernels[0][1].data  # 3*3*64*64 ≈ 37k draws
    fan_in = 9 * 64
    assert abs(k.var() * fan_in / 2.0 - 1.0) < 0.2


def test_default_forward_shapes():
    state = encoder_init(EncoderSpec(), 0)
    z1, z2 = encoder_forward(state, np.zeros((2, 32, 32, 3)))
    assert z1.shape == (2, 8, 8, 64) and z2.shape == (2, 128)


def test_zero_input_gives_zero_features():
    state = encoder_init(EncoderSpec(), 0)
    for z in encoder_forward(state, np.zeros((1, 32, 32, 3))):
        np.testing.assert_array_equal(z.data, 0.0)


def test_no_cross_sample_coupling():
    rng = np.random.default_rng(0)
    state = encoder_init(_toy_spec(), 1)
    img = rng.random((1, 8, 8, 2))
    pair = np.concatenate([img, rng.random((1, 8, 8, 2))])
    for one, two in zip(encode(state, img), encode(state, pair)):
        np.testing.assert_allclose(one.data[0], two.data[0], atol=1e-12)


def test_batch_order_equivariance():
    rng = np.random.default_rng(1)
    state = encoder_init(_toy_spec(), 2)
    imgs = rng.random((4, 8, 8, 2))
    perm = np.array([2, 0, 3, 1])
    for a, b in zip(encode(state, imgs), encode(state, imgs[perm])):
        np.testing.assert_allclose(a.data[perm], b.data, atol=1e-12)


@pytest.mark.parametrize("preact", [True, False])
def test_first_stage_kernel_gradient(preact):
    rng = np.random.default_rng(2)
    state = encoder_init(_toy_spec(preact_taps=preact), 5)
    imgs = preprocess(state.spec, rng.random((2, 8, 8, 2)))
    w1, w2 = rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(2, 4))
    k = state.kernels[0][0]

    def loss():
        z1, z2 = encoder_forward(state, imgs)
        return ad.add(ad.sum(ad.mul(z1, w1)), ad.sum(ad.mul(z2, w2)))

    ad.backward(loss())
    assert rel_err(k.grad, ad.finite_difference_grad(loss, k)) < 1e-4


def test_preact_taps_carry_signed_features():
    rng = np.random.default_rng(3)
    state = encoder_init(EncoderSpec(), 0)
    z1, _ = encode(state, rng.random((2, 32, 32, 3)))
    assert z1.data.min() < 0
    plain = encoder_init(EncoderSpec(preact_taps=False), 0)
    z1, _ = encode(plain, rng.random((2, 32, 32, 3)))
    assert z1.data.min() >= 0


def test_preprocess_centres_pixels():
    spec = EncoderSpec()
    np.testing.assert_allclose(preprocess(spec, np.full((1, 2, 2, 3), 0.5)), 0.0)
    np.testing.assert_allclose(preprocess(spec, np.ones((1, 1, 1, 3))), 2.0)


def test_image_shape_mismatch():
    state = encoder_init(EncoderSpec(), 0)
    with pytest.raises(DimensionError):
        encoder_forward(state, np.zeros((1, 16, 16, 3)))


@pytest.mark.parametrize(
    "spec",
    [
        EncoderSpec(stages=[]),
        EncoderSpec(stages=[StageSpec(64, 2, 1), StageSpec(128, 2, 2)]),
        EncoderSpec(embed_dim=64),
        EncoderSpec((4, 4, 3)),
    ],
)
def test_inconsistent_spec_rejected(spec):
    with pytest.raises(ValidationError):
        encoder_init(spec, 0)
