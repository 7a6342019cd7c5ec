import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.fft import dctn

from ngiattack import defenses as Df


def _images(seed, shape=(3, 1, 28, 28)):
    return np.random.default_rng(seed).uniform(size=shape)


# ------------------------------------------------------------------ bit reduction


def test_bit_reduce_examples():
    x8 = np.arange(256, dtype=np.float64).reshape(1, 1, 16, 16) / 255.0
    np.testing.assert_array_equal(Df.bit_reduce(x8, 8), x8)
    assert Df.bit_reduce(np.full((1, 1, 1, 1), 0.6), 1).item() == 1.0
    assert Df.bit_reduce(np.full((1, 1, 1, 1), 0.4), 1).item() == 0.0
    levels = np.unique(Df.bit_reduce(_images(0), 2))
    assert len(levels) <= 4 and set(np.round(levels * 3, 12)) <= {0.0, 1.0, 2.0, 3.0}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 8))
def test_bit_reduce_idempotent_and_in_range(seed, bits):
    x = _images(seed, (2, 1, 5, 5))
    once = Df.bit_reduce(x, bits)
    np.testing.assert_array_equal(Df.bit_reduce(once, bits), once)
    assert once.shape == x.shape and once.min() >= 0 and once.max() <= 1
    assert np.abs(once - x).max() <= 0.5 / (2**bits - 1) + 1e-12


# ------------------------------------------------------------------ JPEG


def test_jpeg_quality_100_is_lossless():
    x = _images(1)
    assert np.abs(Df.jpeg_quantize(x, 100) - x).max() < 1e-6
    assert (Df.quant_table(100) == 0).all()


def test_jpeg_constant_image_stays_constant():
    x = np.full((1, 1, 16, 24), 0.3)
    for q in (10, 50, 90):
        out = Df.jpeg_quantize(x, q)
        np.testing.assert_allclose(out, out.flat[0], atol=1e-12)
        assert abs(out.flat[0] - 0.3) <= 16 * max(Df.quant_table(q)[0, 0], 1) / (8 * 255)


def test_jpeg_quant_table_scaling():
    assert (Df.quant_table(50) == Df.LUMA_TABLE).all()
    assert (Df.quant_table(10) >= Df.quant_table(50)).all()
    assert (Df.quant_table(90) <= Df.quant_table(50)).all()
    with pytest.raises(ValueError):
        Df.quant_table(0)


def test_jpeg_energy_does_not_grow_on_zero_mean_blocks():
    rng = np.random.default_rng(2)
    for q in (5, 25, 50, 75, 95):
        for _ in range(20):
            block = rng.normal(scale=0.15, size=(1, 1, 8, 8))
            block -= block.mean()
            x = np.clip(block + 128 / 255, 0, 1)
            centred_in = x - 128 / 255
            centred_out = Df.jpeg_quantize(x, q) - 128 / 255
            assert np.linalg.norm(centred_out) <= np.linalg.norm(centred_in) + 1e-9


def test_jpeg_dct_is_orthonormal():
    b = np.random.default_rng(3).normal(size=(8, 8))
    assert abs(np.linalg.norm(dctn(b, norm="ortho")) - np.linalg.norm(b)) < 1e-12


def test_jpeg_non_multiple_of_eight_and_multichannel():
    x = _images(4, (2, 3, 13, 19))
    out = Df.jpeg_quantize(x, 60)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    # channels are coded independently
    np.testing.assert_array_equal(out[:, 1:2], Df.jpeg_quantize(x[:, 1:2], 60))


def test_jpeg_low_quality_loses_detail():
    x = _images(5)
    err = [np.abs(Df.jpeg_quantize(x, q) - x).mean() for q in (10, 50, 90)]
    assert err[0] > err[1] > err[2]


# ------------------------------------------------------------------ resize + pad


def test_rand_resize_pad_shapes_and_determinism():
    x = _images(6)
    a = Df.rand_resize_pad_defend(x, np.random.default_rng(0))
    b = Df.rand_resize_pad_defend(x, np.random.default_rng(0))
    assert a.shape == x.shape
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, Df.rand_resize_pad_defend(x, np.random.default_rng(1)))


def test_rand_resize_pad_degenerate_range_is_identity():
    x = _images(7)
    np.testing.assert_array_equal(Df.rand_resize_pad_defend(x, np.random.default_rng(0), min_ratio=1.0), x)


def test_rand_resize_pad_side_range():
    rng = np.random.default_rng(0)
    for _ in range(50):
        idx = Df.rand_resize_pad_index(28, 28, rng)
        side = int((idx >= 0).sum(axis=0).max())
        assert 26 <= side <= 28


# ------------------------------------------------------------------ smoothing


class _Stub:
    """Predicts class 1 when the mean pixel exceeds 0.5, else class 0."""

    class spec:
        num_classes = 3

    def predict(self, x):
        return (x.reshape(len(x), -1).mean(axis=1) > 0.5).astype(np.int64)


def test_smoothed_predict_zero_sigma_matches_base(zoo, mnist):
    m = zoo["cnn-b"]
    x = mnist[1].images[:40]
    np.testing.assert_array_equal(Df.smoothed_predict(m, x, 0.0, 7, np.random.default_rng(0)), m.predict(x))


def test_smoothed_predict_counts_and_single_vote():
    x = np.full((4, 1, 2, 2), 0.5)
    pred, counts = Df.smoothed_predict(_Stub(), x, 0.3, 9, np.random.default_rng(0), return_counts=True)
    assert (counts.sum(axis=1) == 9).all()
    assert counts.shape == (4, 3) and (counts[:, 2] == 0).all()
    one = Df.smoothed_predict(_Stub(), x[:1], 0.3, 1, np.random.default_rng(1))
    noise = np.random.default_rng(1).standard_normal((1, 1, 2, 2))
    assert one[0] == _Stub().predict(x[:1] + 0.3 * noise)[0]


def test_smoothed_predict_ties_go_to_smallest_class():
    class Alternating(_Stub):
        calls = 0

        def predict(self, x):
            return np.arange(len(x)) % 2

    pred, counts = Df.smoothed_predict(Alternating(), np.zeros((1, 1, 2, 2)), 0.1, 4, np.random.default_rng(0), True)
    assert counts[0, 0] == counts[0, 1] == 2 and pred[0] == 0


# ------------------------------------------------------------------ wrapper and config


@pytest.mark.parametrize(
    "kw, msg",
    [
        (dict(kind="nrp"), "unknown defense"),
        (dict(bits=0), "1 <= b <= 8"),
        (dict(bits=9), "1 <= b <= 8"),
        (dict(quality=0), "0 < q <= 100"),
        (dict(sigma=-1), "sigma"),
        (dict(votes=0), "votes"),
    ],
)
def test_defense_config_validation(kw, msg):
    with pytest.raises(Df.DefenseConfigError, match=msg):
        Df.DefenseConfig(**kw)


@pytest.mark.parametrize("kind", Df.KINDS)
def test_defended_clean_accuracy_close_to_undefended(zoo, mnist, kind):
    test = mnist[1].subset(slice(0, 300))
    base = zoo["cnn-b"]
    defended = Df.DefendedModel(base, Df.DefenseConfig(kind=kind))
    assert base.accuracy(test) - defended.accuracy(test) < 0.10


@pytest.mark.parametrize("kind", Df.KINDS)
def test_defended_predictions_are_partition_independent(zoo, mnist, kind):
    x = mnist[1].images[:20]
    d = Df.DefendedModel(zoo["mlp-d"], Df.DefenseConfig(kind=kind, sigma=0.3))
    whole = d.predict(x)
    parts = np.concatenate([d.predict(x[:7], np.arange(7)), d.predict(x[7:], np.arange(7, 20))])
    np.testing.assert_array_equal(whole, parts)
    if kind in ("bit_red", "jpeg_q", "rand_resize_pad"):
        out = d.purify(x)
        assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


def test_defended_model_has_no_gradient(zoo):
    d = Df.DefendedModel(zoo["mlp-d"], Df.DefenseConfig())
    assert not hasattr(d, "loss_and_input_gradient")
