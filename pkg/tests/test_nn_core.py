import numpy as np
import pytest

from stutterlab.errors import GradCheckError, ValidationError
from stutterlab.nn import autograd as ag
from stutterlab.nn.autograd import Tensor
from stutterlab.nn.gradcheck import grad_check
from stutterlab.nn.layers import NetContext, init_dense, mean_pool
from stutterlab.nn.optim import OptimState, optimizer_step
from stutterlab.nn.params import ParamStore, lora_param_count


def rng_for(seed=0):
    return np.random.default_rng(seed)


def test_gradcheck_quadratic_near_roundoff():
    def f(point):
        x = Tensor(point["x"], requires_grad=True)
        loss = ag.sum_all(ag.mul(x, x))
        loss.backward()
        return loss.item(), {"x": x.grad}

    err = grad_check(f, {"x": rng_for().normal(size=9)})
    assert err < 1e-8


def test_gradcheck_rejects_nonfinite_loss():
    def f(point):
        return float("nan"), {"x": np.zeros(2)}

    with pytest.raises(GradCheckError):
        grad_check(f, {"x": np.zeros(2)})


@pytest.mark.parametrize("trial", range(5))
def test_primitive_chain_gradients(trial):
    rng = rng_for(trial)

    def f(point):
        x = Tensor(point["x"], requires_grad=True)
        w = Tensor(point["w"], requires_grad=True)
        g = Tensor(point["g"], requires_grad=True)
        b = Tensor(point["b"], requires_grad=True)
        h = ag.layer_norm(x, g, b)
        h = ag.silu(ag.matmul(h, w))
        h = ag.relu(ag.add(h, h))
        h = ag.log_softmax_rows(h)
        s = ag.sigmoid(ag.softmax_rows(h))
        loss = ag.mean_all(ag.mul(s, h))
        loss.backward()
        return loss.item(), {"x": x.grad, "w": w.grad, "g": g.grad, "b": b.grad}

    point = {"x": rng.normal(size=(4, 6)), "w": rng.normal(size=(6, 3)),
             "g": rng.normal(1.0, 0.2, size=6), "b": rng.normal(size=6)}
    assert grad_check(f, point) < 1e-8


def test_embedding_and_gather_gradients():
    rng = rng_for(3)
    ids = np.array([0, 2, 1, 2, 3])

    def f(point):
        table = Tensor(point["table"], requires_grad=True)
        e = ag.embedding(table, ids)
        lp = ag.log_softmax_rows(e)
        picked = ag.gather(lp, np.arange(4), np.array([1, 0, 2, 1]))
        loss = ag.mean_all(picked)
        loss.backward()
        return loss.item(), {"table": table.grad}

    assert grad_check(f, {"table": rng.normal(size=(4, 5))}) < 1e-8


def test_attention_op_gradients():
    rng = rng_for(4)
    t, d = 5, 8
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, 1)] = -np.inf

    def f(point):
        q = Tensor(point["q"], requires_grad=True)
        k = Tensor(point["k"], requires_grad=True)
        v = Tensor(point["v"], requires_grad=True)
        out = ag.multi_head_attention(q, k, v, heads=2, mask=mask)
        loss = ag.mean_all(ag.mul(out, out))
        loss.backward()
        return loss.item(), {"q": q.grad, "k": k.grad, "v": v.grad}

    assert grad_check(f, {n: rng.normal(size=(t, d)) for n in "qkv"}) < 1e-8


def test_dropout_modes():
    rng = rng_for(5)
    x = Tensor(rng.normal(size=(20, 10)))
    assert ag.dropout(x, 0.3, None, training=False) is x
    m1 = ag.dropout(x, 0.3, np.random.default_rng(9), training=True)
    m2 = ag.dropout(x, 0.3, np.random.default_rng(9), training=True)
    assert np.array_equal(m1.data, m2.data)
    assert not np.array_equal(m1.data, x.data)
    with pytest.raises(ValueError):
        ag.dropout(x, 0.3, None, training=True)


# --- ParamStore / LoRA -----------------------------------------------------


def test_lora_param_count_values():
    assert lora_param_count(64, 64, 8) == 1024
    assert lora_param_count(32, 16, 0) == 0
    with pytest.raises(ValidationError):
        lora_param_count(0, 4, 2)


def test_lora_scaling_from_rank_and_alpha():
    store = ParamStore()
    store.add("w", np.zeros((4, 4)))
    store.attach_lora("w", rank=8, alpha=16.0, dropout=0.1, rng=rng_for())
    assert store["w"].lora.scaling == 2.0


def test_lora_identity_at_attach():
    rng = rng_for(6)
    store = ParamStore(np.float32)
    init_dense(store, "fc", 6, 4, rng)
    x = Tensor(rng.normal(size=(3, 6)).astype(np.float32))
    base = NetContext(store, training=False).dense("fc", x).data.copy()
    store.attach_lora("fc.w", rank=2, alpha=4.0, dropout=0.0, rng=rng)
    adapted = NetContext(store, training=False).dense("fc", x).data
    assert np.array_equal(base, adapted)


def test_duplicate_and_mismatched_names_rejected():
    store = ParamStore()
    store.add("a", np.zeros(3))
    with pytest.raises(ValidationError):
        store.add("a", np.zeros(3))
    with pytest.raises(ValidationError):
        store.load_arrays({"a": np.zeros(4)})


# --- optimizer --------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    store = ParamStore()
    store.add("w", np.ones(4))
    state = OptimState.for_store(store)
    optimizer_step(store, {"w": np.zeros(4)}, state, lr=0.1)
    assert np.array_equal(store["w"].data, np.ones(4, dtype=np.float32))


def test_adam_scalar_hand_value():
    # w=1, grad=1, lr=0.1, step 1: bias-corrected update is 1/(1+1e-8)
    store = ParamStore(np.float64)
    store.add("w", np.array([1.0]))
    state = OptimState.for_store(store)
    optimizer_step(store, {"w": np.array([1.0])}, state, lr=0.1)
    expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
    assert abs(store["w"].data[0] - expected) < 1e-12


def test_grads_must_cover_exactly_trainable_set():
    store = ParamStore()
    store.add("w", np.ones(2))
    store.add("frozen", np.ones(2), trainable=False)
    state = OptimState.for_store(store)
    with pytest.raises(ValidationError):
        optimizer_step(store, {"w": np.ones(2), "frozen": np.ones(2)}, state)
    with pytest.raises(ValidationError):
        optimizer_step(store, {}, state)


def test_frozen_tensor_bytes_stable_across_steps():
    rng = rng_for(7)
    store = ParamStore(np.float32)
    store.add("w", rng.normal(size=(3, 3)))
    store.add("frozen", rng.normal(size=(3, 3)), trainable=False)
    before = store["frozen"].data.tobytes()
    state = OptimState.for_store(store)
    for step in range(5):
        optimizer_step(store, {"w": rng.normal(size=(3, 3)).astype(np.float32)}, state, lr=1e-2)
    assert store["frozen"].data.tobytes() == before


def test_grad_shape_mismatch_rejected():
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    state = OptimState.for_store(store)
    with pytest.raises(ValidationError):
        optimizer_step(store, {"w": np.ones(3)}, state)


# --- mean pool --------------------------------------------------------------


def test_mean_pool_values():
    out = mean_pool(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])))
    assert np.allclose(out.data, [2.0, 3.0])
    single = mean_pool(Tensor(np.array([[5.0, 6.0, 7.0]])))
    assert np.allclose(single.data, [5.0, 6.0, 7.0])
    with pytest.raises(ValueError):
        mean_pool(Tensor(np.zeros((0, 3))))


def test_mean_pool_gradient_distributes_uniformly():
    def f(point):
        h = Tensor(point["h"], requires_grad=True)
        loss = ag.sum_all(mean_pool(h))
        loss.backward()
        return loss.item(), {"h": h.grad}

    h0 = rng_for(8).normal(size=(5, 4))
    assert grad_check(f, {"h": h0}) < 1e-8
    # analytic gradient is exactly 1/T everywhere
    h = Tensor(h0, requires_grad=True)
    ag.sum_all(mean_pool(h)).backward()
    assert np.allclose(h.grad, 1.0 / 5.0)
