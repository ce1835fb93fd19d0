import numpy as np
import pytest

from stutterlab.encoder import EncoderConfig, encode, init_encoder_params
from stutterlab.errors import ValidationError
from stutterlab.nn import autograd as ag
from stutterlab.nn.autograd import Tensor
from stutterlab.nn.gradcheck import grad_check
from stutterlab.nn.layers import NetContext
from stutterlab.nn.params import ParamStore


@pytest.fixture()
def small_encoder():
    cfg = EncoderConfig(layers=2, dim=8, heads=2, ffn_dim=12, dropout=0.1)
    store = ParamStore(np.float64)
    init_encoder_params(store, cfg, 5, np.random.default_rng(1))
    return store, cfg


def test_row_count_preserved(small_encoder):
    store, cfg = small_encoder
    for t in (1, 3, 7, 20):
        x = Tensor(np.random.default_rng(t).normal(size=(t, 5)))
        h = encode(NetContext(store, training=False), cfg, x)
        assert h.shape == (t, cfg.dim)


def test_eval_determinism(small_encoder):
    store, cfg = small_encoder
    x = Tensor(np.random.default_rng(2).normal(size=(6, 5)))
    a = encode(NetContext(store, training=False), cfg, x)
    b = encode(NetContext(store, training=False), cfg, x)
    assert np.array_equal(a.data, b.data)


def test_permutation_sensitivity(small_encoder):
    store, cfg = small_encoder
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 5))
    perm = rng.permutation(8)
    base = encode(NetContext(store, training=False), cfg, Tensor(x)).data
    shuffled = encode(NetContext(store, training=False), cfg, Tensor(x[perm])).data
    # un-permute the outputs; positional encoding must make them differ
    assert not np.allclose(shuffled[np.argsort(perm)], base)


def test_input_gradient_passes_finite_differences(small_encoder):
    store, cfg = small_encoder

    def f(point):
        ctx = NetContext(store, training=False)
        x = Tensor(point["x"], requires_grad=True)
        h = encode(ctx, cfg, x)
        loss = ag.mean_all(ag.mul(h, h))
        loss.backward()
        return loss.item(), {"x": x.grad}

    x0 = np.random.default_rng(4).normal(size=(4, 5))
    assert grad_check(f, {"x": x0}) < 1e-5


def test_feature_dim_mismatch_rejected(small_encoder):
    store, cfg = small_encoder
    with pytest.raises(ValidationError) as err:
        encode(NetContext(store, training=False), cfg, Tensor(np.zeros((3, 4))))
    assert "feature dim" in str(err.value)


def test_empty_input_rejected(small_encoder):
    store, cfg = small_encoder
    with pytest.raises(ValidationError):
        encode(NetContext(store, training=False), cfg, Tensor(np.zeros((0, 5))))


def test_dropout_only_in_training_mode(small_encoder):
    store, cfg = small_encoder
    x = Tensor(np.random.default_rng(5).normal(size=(6, 5)))
    eval_out = encode(NetContext(store, training=False), cfg, x).data
    train_out = encode(NetContext(store, rng=np.random.default_rng(0), training=True),
                       cfg, x).data
    assert not np.array_equal(eval_out, train_out)
    repeat = encode(NetContext(store, rng=np.random.default_rng(0), training=True),
                    cfg, x).data
    assert np.array_equal(train_out, repeat)


def test_config_validation():
    with pytest.raises(ValidationError):
        EncoderConfig(dim=30, heads=4).validate()
    with pytest.raises(ValidationError):
        EncoderConfig(layers=0).validate()
    with pytest.raises(ValidationError):
        EncoderConfig(dropout=1.0).validate()
