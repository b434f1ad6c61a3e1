import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbplanner import autodiff as ad
from dbplanner.autodiff import Linear, Module, ShapeError, Tensor
from dbplanner.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dbplanner.optim import AdamW, NonFiniteGradient, cosine_lr


def finite_diff(f, x: Tensor, step=1e-4):
    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f().item()
        flat[i] = orig - step
        down = f().item()
        flat[i] = orig
        fd.reshape(-1)[i] = (up - down) / (2 * step)
    return fd


def test_softmax_symmetric_input():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_matmul_identity():
    x = np.random.default_rng(1).uniform(-1, 1, (3, 5))
    out = ad.matmul(Tensor(np.eye(3)), Tensor(x))
    assert np.array_equal(out.data, x)


def test_layer_norm_hand_values():
    out = ad.layer_norm(Tensor([1.0, 2.0, 3.0]), axis=-1)
    assert np.allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)
    assert abs(out.data.mean()) < 1e-12
    # population variance, up to the 1e-5 epsilon inside the square root
    assert abs(out.data.var() - 1.0) < 1e-4


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.tsum(ad.mul(x, x))
    ad.backward(loss)
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, x))


def test_detach_blocks_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.mul(x, x).detach()
    loss = ad.tsum(ad.mul(y, y))
    ad.backward(loss)
    assert x.grad is None


def test_unreached_node_has_no_grad():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    _unused = ad.mul(y, y)
    ad.backward(ad.tsum(ad.mul(x, x)))
    assert y.grad is None


def test_composite_graph_matches_finite_differences(rng):
    x = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)

    def f():
        h = ad.relu(ad.matmul(x, w))
        s = ad.softmax(h, axis=1)
        return ad.tsum(ad.layer_norm(s, axis=-1))

    ad.backward(f())
    fd = finite_diff(f, x)
    denom = np.maximum(np.abs(fd), 1.0)
    assert (np.abs(x.grad - fd) / denom).max() < 1e-6


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as e:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "matmul" in str(e.value)
    assert "(2, 3)" in str(e.value)


def test_forward_deterministic():
    def run():
        r = np.random.default_rng(7)
        a = Tensor(r.uniform(-1, 1, (4, 4)))
        return ad.softmax(ad.matmul(a, a), axis=1).data
    assert np.array_equal(run(), run())


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).uniform(-30, 30, (3, 7))
    out = ad.softmax(Tensor(x), axis=1)
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_detach_is_absorbing(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.uniform(-2, 2, 5), requires_grad=True)
    mixed = ad.add(ad.mul(x, x).detach(), ad.mul(x, Tensor(2.0)))
    ad.backward(ad.tsum(mixed))
    assert np.array_equal(x.grad, np.full(5, 2.0))


def test_no_grad_disables_recording():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()


def test_unbroadcast_shapes():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    ad.backward(ad.tsum(ad.add(a, b)))
    assert a.grad.shape == (3, 1) and np.array_equal(a.grad, np.full((3, 1), 4.0))
    assert b.grad.shape == (4,) and np.array_equal(b.grad, np.full(4, 3.0))


class _Net(Module):
    def __init__(self, rng):
        super().__init__()
        self.lin1 = Linear(3, 4, rng)
        self.lin2 = Linear(4, 2, rng)
        self.scale = Tensor(np.ones(2), requires_grad=True)


def test_module_named_parameters_order(rng):
    net = _Net(rng)
    names = [n for n, _ in net.named_parameters()]
    assert names == ["scale", "lin1.weight", "lin1.bias", "lin2.weight", "lin2.bias"]


def test_module_state_roundtrip(rng, tmp_path):
    net = _Net(rng)
    path = str(tmp_path / "net.ckpt")
    save_checkpoint(path, net.state(), {"kind": "test"})
    params, meta = load_checkpoint(path)
    assert meta == {"kind": "test"}
    fresh = _Net(np.random.default_rng(99))
    fresh.load_state(params)
    for (_, a), (_, b) in zip(net.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(a.data, b.data)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(p))


def test_checkpoint_shape_mismatch(rng, tmp_path):
    net = _Net(rng)
    state = net.state()
    state["lin1.weight"] = np.zeros((2, 2))
    path = str(tmp_path / "net.ckpt")
    save_checkpoint(path, state)
    with pytest.raises(ShapeError):
        net.load_state(load_checkpoint(path)[0])


# -- AdamW ---------------------------------------------------------------

def test_adamw_zero_grad_fresh_state_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_closed_form():
    lr, eps, g = 0.01, 1e-8, 0.7
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = AdamW([("p", p)], lr=lr, eps=eps, weight_decay=0.0)
    p.grad = np.array([g])
    opt.step()
    # fresh state: bias-corrected m = g, v = g^2 -> update = lr*g/(|g|+eps)
    expected = 0.5 - lr * g / (abs(g) + eps)
    assert abs(p.data[0] - expected) < 1e-15


def test_adamw_decoupled_weight_decay():
    lr = 2e-4
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = AdamW([("p", p)], lr=lr, weight_decay=0.01)
    p.grad = np.array([0.0])
    opt.step()
    assert abs(p.data[0] - 3.0 * (1.0 - lr * 0.01)) < 1e-15


def test_adamw_nonfinite_gradient_names_parameter():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([("encoder.weight", p)])
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradient) as e:
        opt.step()
    assert "encoder.weight" in str(e.value)


# -- cosine schedule -------------------------------------------------------

def test_cosine_lr_ramp_endpoint():
    assert cosine_lr(500, 10000, 2e-4, warmup_steps=500) == pytest.approx(2e-4)


def test_cosine_lr_final_step_is_zero():
    assert cosine_lr(10000, 10000, 2e-4, warmup_steps=500) == 0.0


def test_cosine_lr_warmup_default_is_500():
    import inspect
    sig = inspect.signature(cosine_lr)
    assert sig.parameters["warmup_steps"].default == 500


def test_cosine_lr_zero_total_steps_rejected():
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1e-4)


def test_cosine_lr_midpoint():
    # halfway through the decay span the cosine sits at base/2
    assert cosine_lr(5250, 10000, 2e-4, warmup_steps=500) == pytest.approx(1e-4)
