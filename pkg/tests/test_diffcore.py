import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teamform import diffcore as dc
from teamform.errors import ContractError, DimensionError


def central_diff(f, x, step=1e-5):
    """Plain numpy central differences of scalar f at array x."""
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        hi = f(x)
        x[i] = orig - step
        lo = f(x)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def test_matmul_identity_and_hand_values():
    out = dc.matmul(dc.Tensor([[1, 0], [0, 1]]), dc.Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    out = dc.matmul(dc.Tensor([[1, 2]]), dc.Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[11]])


def test_matmul_gradient_matches_finite_differences(rng):
    a_val, b_val = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    a = dc.Tensor(a_val.copy(), requires_grad=True)
    b = dc.Tensor(b_val, requires_grad=True)
    dc.matmul(a, b).sum().backward()
    numeric = central_diff(lambda x: float(np.sum(x @ b_val)), a_val.copy())
    np.testing.assert_allclose(a.grad, np.tile(b_val.sum(axis=1), (4, 1)), rtol=1e-12)
    rel = np.abs(a.grad - numeric) / np.maximum(np.abs(numeric), 1e-12)
    assert rel.max() < 1e-6


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))


def test_softmax_masked_examples():
    out = dc.softmax_masked(dc.Tensor([0.0, 0.0, 0.0]), np.array([1, 1, 1]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)
    out = dc.softmax_masked(dc.Tensor([5.0, 2.0, 7.0]), np.array([1, 0, 1]))
    e2 = np.exp(2.0)
    np.testing.assert_allclose(out.data, [1 / (1 + e2), 0.0, e2 / (1 + e2)], rtol=1e-12)
    assert out.data[1] == 0.0
    np.testing.assert_allclose(out.data, [0.1192, 0, 0.8808], atol=1e-4)


def test_softmax_fully_masked_slice_raises():
    with pytest.raises(ContractError, match="fully masked slice 0"):
        dc.softmax_masked(dc.Tensor([9.0, 9.0]), np.array([0, 0]))
    with pytest.raises(ContractError, match="fully masked slice 1"):
        dc.softmax_masked(dc.Tensor(np.zeros((2, 3))), np.array([[1, 0, 0], [0, 0, 0]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one_and_masked_are_zero(rows, cols, seed):
    r = np.random.default_rng(seed)
    logits = r.normal(scale=5, size=(rows, cols))
    mask = r.random((rows, cols)) < 0.6
    mask[np.arange(rows), r.integers(0, cols, rows)] = True
    out = dc.softmax_masked(dc.Tensor(logits), mask).data
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


def test_grad_check_quadratic():
    x = dc.Tensor([1.0, 2.0, 3.0])
    report = dc.grad_check(lambda t: dc.tsum(t * t), [x], step=1e-5, tolerance=1e-8)
    assert report.passed and report.worst < 1e-8


def test_grad_check_rejects_vector_output():
    with pytest.raises(ContractError):
        dc.grad_check(lambda t: t * 2.0, [dc.Tensor([1.0, 2.0])])


def _apply(op, xs):
    a, b = xs
    return {
        "add": lambda: a + b,
        "sub": lambda: a - b,
        "mul": lambda: a * b,
        "div": lambda: a / (dc.tabs(b) + 1.0),
        "matmul": lambda: dc.matmul(a, dc.transpose(b, (1, 0))),
        "tanh": lambda: dc.tanh(a) * b,
        "sigmoid": lambda: dc.sigmoid(a) + b,
        "elu": lambda: dc.elu(a) * b,
        "exp": lambda: dc.exp(a * 0.3) + b,
        "normalize": lambda: dc.l2_normalize(a) * b,
        "max": lambda: dc.tmax(a + b, axis=-1),
        "softmax": lambda: dc.softmax_masked(a, np.ones(a.shape)) * b,
        "concat": lambda: dc.concat([a, b], axis=0),
        "stack": lambda: dc.stack([a, b], axis=1),
        "getitem": lambda: a[..., 1:] * b[..., :-1],
        "reshape": lambda: dc.reshape(a, (-1,)) * dc.reshape(b, (-1,)),
        "swap": lambda: dc.swapaxes(a, 0, 1) + dc.swapaxes(b, 0, 1),
        "mean": lambda: dc.mean(a * b, axis=0),
        "broadcast": lambda: a + b[0],
        "gather": lambda: dc.one_hot_gather(a * b, np.zeros(a.shape[:-1], dtype=int)),
    }[op]()


OPS = ["add", "sub", "mul", "div", "matmul", "tanh", "sigmoid", "elu", "exp", "normalize",
       "max", "softmax", "concat", "stack", "getitem", "reshape", "swap", "mean", "broadcast",
       "gather"]


@settings(max_examples=120, deadline=None)
@given(st.sampled_from(OPS), st.integers(1, 4), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_every_operation_matches_finite_differences(op, rows, cols, seed):
    r = np.random.default_rng(seed)
    a = dc.Tensor(r.normal(size=(rows, cols)))
    b = dc.Tensor(r.normal(size=(rows, cols)))
    weights = r.normal(size=_apply(op, (a, b)).shape)
    report = dc.grad_check(lambda x, y: dc.tsum(_apply(op, (x, y)) * weights), [a, b])
    assert report.worst < 1e-4, (op, report.max_rel_errors)


def test_no_grad_records_nothing():
    x = dc.Tensor([1.0], requires_grad=True)
    with dc.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._backward is None


def _store(value=1.0):
    s = dc.ParameterStore()
    s.add("w", np.array([value]))
    return s


def test_optimizer_zero_gradient_leaves_parameters():
    s = _store()
    s["w"].grad = np.zeros(1)
    dc.optimizer_step(s, 5e-4)
    assert s["w"].data[0] == 1.0
    assert s.step == 1
    assert s["w"].grad is None


def test_optimizer_descends_on_positive_gradient():
    s = _store()
    s["w"].grad = np.ones(1)
    dc.optimizer_step(s, 5e-4)
    assert s["w"].data[0] < 1.0


def test_optimizer_is_deterministic(rng):
    grads = rng.normal(size=(5, 1))
    a, b = _store(0.3), _store(0.3)
    for g in grads:
        for s in (a, b):
            s["w"].grad = g.copy()
            dc.optimizer_step(s)
    assert a["w"].data.tobytes() == b["w"].data.tobytes()


def test_optimizer_nan_gradient_names_parameter():
    s = _store()
    s["w"].grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="'w'"):
        dc.optimizer_step(s)


def test_duplicate_parameter_name_rejected():
    s = _store()
    with pytest.raises(ContractError):
        s.add("w", np.zeros(1))


def test_sync_target_bit_identical(rng):
    src, dst = dc.ParameterStore(), dc.ParameterStore()
    src.add("a", rng.normal(size=(3, 2)))
    dst.add("a", np.zeros((3, 2)))
    dc.sync_target(src, dst)
    assert src["a"].data.tobytes() == dst["a"].data.tobytes()


def test_checkpoint_round_trip(tmp_path, rng):
    s = dc.ParameterStore()
    s.add("layer.w", rng.normal(size=(3, 4)))
    s.add("layer.b", rng.normal(size=(4,)))
    s.add("scalar", np.array(2.5))
    path = tmp_path / "p.tfrm"
    dc.save_checkpoint(s, path)
    raw = path.read_bytes()
    assert raw[:4] == b"TFRM"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 3
    loaded = dc.load_checkpoint(path)
    assert list(loaded) == list(s)
    for name in s:
        assert loaded[name].data.tobytes() == s[name].data.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.tfrm"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ContractError):
        dc.load_checkpoint(path)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_non_finite():
    dc.DEBUG = True
    try:
        with pytest.raises(FloatingPointError):
            dc.log(dc.Tensor([-1.0]))
    finally:
        dc.DEBUG = False
