import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, strategies as st

from ct2xray.errors import ContractViolation
from ct2xray.ops import (GradCheckError, ParamStore, double_backward_available,
                         grad_check, grad_check_params, primitive_suite)
import ct2xray.ops as ops


# ---------------------------------------------------------------------------
# primitive behavior
# ---------------------------------------------------------------------------

def test_softmax_symmetry():
    out = ops.softmax_last(torch.zeros(3))
    assert torch.allclose(out, torch.full((3,), 1 / 3))


def test_leaky_slope_behavior():
    assert float(ops.leaky_rectifier(torch.tensor(-1.0), slope=0.2)) == pytest.approx(-0.2)
    assert float(ops.leaky_rectifier(torch.tensor(2.0), slope=0.2)) == pytest.approx(2.0)


def test_gradient_of_sum_of_squares():
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    ops.total(ops.square(x)).backward()
    assert torch.allclose(x.grad, torch.tensor([2.0, 4.0]))


@given(st.integers(0, 2 ** 32 - 1))
def test_softmax_rows_stochastic(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 6, generator=g) * 5
    out = ops.softmax_last(x)
    assert (out >= 0).all()
    assert torch.allclose(out.sum(dim=-1), torch.ones(4), atol=1e-6)


def test_shape_mismatch_names_shapes():
    with pytest.raises(ContractViolation, match=r"\(2, 3\)"):
        ops.matmul(torch.zeros(2, 3), torch.zeros(2, 3))
    with pytest.raises(ContractViolation, match="channel mismatch"):
        ops.conv2d(torch.zeros(1, 2, 8, 8), torch.zeros(4, 3, 3, 3))


# ---------------------------------------------------------------------------
# gradient checks of every primitive: 64-bit against 1e-6, 32-bit gradients
# against a 64-bit finite-difference reference at 1e-4; 50 randomized trials
# ---------------------------------------------------------------------------

def _cases(g, dtype):
    r = lambda *s: torch.randn(*s, generator=g, dtype=dtype)
    u = lambda *s: torch.rand(*s, generator=g, dtype=dtype) + 0.5
    return {
        "conv3d": (lambda x, w, b: ops.conv3d(x, w, b, stride=1, padding=1),
                   [r(1, 2, 4, 4, 4), r(3, 2, 3, 3, 3) / 3, r(3)]),
        "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
                   [r(1, 2, 6, 6), r(3, 2, 3, 3) / 3, r(3)]),
        "batch_norm": (
            lambda x, w, b: ops.batch_norm(x, None, None, w, b, training=True),
            [r(4, 3, 5), r(3).abs() + 0.5, r(3)]),
        "leaky_rectifier": (
            lambda x: ops.leaky_rectifier(x, 0.2),
            [r(4, 5) + torch.sign(r(4, 5)) * 0.1]),  # keep away from the kink
        "tanh": (ops.tanh, [r(3, 4)]),
        "softmax_last": (ops.softmax_last, [r(3, 5)]),
        "matmul": (ops.matmul, [r(3, 4), r(4, 2)]),
        "concat": (lambda a, b: ops.concat([a, b], dim=1), [r(2, 3), r(2, 4)]),
        "adaptive_avg_pool2d": (lambda x: ops.adaptive_avg_pool2d(x, 2),
                                [r(1, 2, 6, 6)]),
        "upsample_nearest": (lambda x: ops.upsample_nearest(x, 2), [r(1, 2, 3, 3)]),
        "affine": (ops.affine, [r(3, 4), r(2, 4), r(2)]),
        "channel_mean_std": (lambda x: sum(t.sum() for t in ops.channel_mean_std(x)),
                             [u(2, 3, 4, 4)]),
        "add": (ops.add, [r(3, 3), r(3, 3)]),
        "mul": (ops.mul, [r(3, 3), r(3, 3)]),
        "sub": (ops.sub, [r(3, 3), r(3, 3)]),
        "mean": (ops.mean, [r(4, 4)]),
        "sum": (ops.total, [r(4, 4)]),
        "abs": (lambda x: ops.absval(x), [r(4, 4) + torch.sign(r(4, 4)) * 0.1]),
        "square": (ops.square, [r(4, 4)]),
        "sqrt": (ops.sqrt, [u(4, 4)]),
    }


def _scalarize(fn, weights):
    def wrapped(*tensors):
        out = fn(*tensors)
        if out.numel() == 1:
            return out.reshape(())
        return (out * weights[: out.numel()].reshape(out.shape)).sum()
    return wrapped


@pytest.mark.parametrize("name", sorted(_cases(torch.Generator().manual_seed(0),
                                               torch.float64)))
def test_primitive_gradients_f64(name):
    worst = 0.0
    for trial in range(50):
        g = torch.Generator().manual_seed(1000 + trial)
        fn, inputs = _cases(g, torch.float64)[name]
        weights = torch.randn(4096, generator=g, dtype=torch.float64)
        report = grad_check(_scalarize(fn, weights), inputs, max_probes=6,
                            seed=trial)
        worst = max(worst, report.max_rel_err)
    assert worst < 1e-6, f"{name}: worst rel err {worst:.3e}"


@pytest.mark.parametrize("name", sorted(_cases(torch.Generator().manual_seed(0),
                                               torch.float64)))
def test_primitive_gradients_f32(name):
    # 32-bit analytic gradients against the 64-bit central-difference oracle
    worst = 0.0
    for trial in range(50):
        g = torch.Generator().manual_seed(2000 + trial)
        fn, inputs = _cases(g, torch.float32)[name]
        weights = torch.randn(4096, generator=g, dtype=torch.float32)
        report = grad_check(_scalarize(fn, weights), inputs, max_probes=4,
                            seed=trial, fd_dtype=torch.float64, eps=1e-6)
        worst = max(worst, report.max_rel_err)
    assert worst < 1e-4, f"{name}: worst rel err {worst:.3e}"


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

def test_grad_check_sum_of_squares():
    x = torch.randn(10, dtype=torch.float64)
    report = grad_check(lambda t: (t ** 2).sum(), x)
    assert report.ok(1e-6)


def test_grad_check_constant_function():
    x = torch.randn(5, dtype=torch.float64)
    report = grad_check(lambda t: (t * 0).sum() + 1.0, x)
    assert report.max_rel_err == 0.0


def test_grad_check_raises_at_tolerance():
    # a wrong "gradient" comes from a non-differentiable detach trick
    x = torch.randn(4, dtype=torch.float64)

    def crooked(t):
        return (t.detach() * t).sum()  # analytic grad misses half the product rule

    with pytest.raises(GradCheckError):
        grad_check(crooked, x, tolerance=1e-6)


def test_grad_check_params_matches_backward():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(4, 3), nn.Tanh(), nn.Linear(3, 1)).double()
    x = torch.randn(2, 4, dtype=torch.float64)
    report = grad_check_params(lambda: net(x).sum(),
                               dict(net.named_parameters()))
    assert report.ok(1e-6)


def test_grad_check_reports_nonfinite():
    x = torch.tensor([0.5], dtype=torch.float64)
    with pytest.raises(GradCheckError, match="non-finite"):
        grad_check(lambda t: (t / 0.0).sum(), x)


def test_double_backward_available():
    assert double_backward_available() is True


def test_primitive_suite_is_complete():
    suite = primitive_suite()
    required = {"conv3d", "conv2d", "batch_norm", "leaky_rectifier", "tanh",
                "softmax_last", "matmul", "concat", "adaptive_avg_pool2d",
                "upsample_nearest", "affine", "channel_mean_std", "add", "mul",
                "sub", "mean", "sum", "abs", "square", "sqrt"}
    assert required <= set(suite)
    assert all(callable(f) for f in suite.values())


# ---------------------------------------------------------------------------
# ParamStore
# ---------------------------------------------------------------------------

def test_param_store_round_trip(tmp_path):
    store = ParamStore(seed=42)
    g = torch.Generator().manual_seed(1)
    store.put("g.conv.weight", torch.randn(3, 2, 3, 3, generator=g))
    store.put("d.head.bias", torch.randn(5, generator=g, dtype=torch.float64))
    store.put("e_ct.bn.count", torch.tensor([7], dtype=torch.int64))
    store.save(tmp_path / "ckpt")
    loaded = ParamStore.load(tmp_path / "ckpt")
    assert loaded.seed == 42
    assert loaded.names() == store.names()
    for name, tensor in store.items():
        assert torch.equal(loaded.get(name), tensor)


def test_param_store_save_load_save_byte_identical(tmp_path):
    store = ParamStore(seed=3)
    g = torch.Generator().manual_seed(2)
    store.put("a", torch.randn(17, generator=g))
    store.put("b.c", torch.randn(4, 4, generator=g))
    d1, d2 = tmp_path / "one", tmp_path / "two"
    store.save(d1)
    ParamStore.load(d1).save(d2)
    for name in ("manifest.json", "params.f32"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_param_store_duplicate_name():
    store = ParamStore()
    store.put("x", torch.zeros(1))
    with pytest.raises(ContractViolation, match="duplicate"):
        store.put("x", torch.zeros(1))


def test_param_store_module_round_trip(tmp_path):
    torch.manual_seed(0)
    a = nn.Sequential(nn.Linear(3, 4), nn.BatchNorm1d(4))
    b = nn.Linear(4, 2)
    store = ParamStore.from_modules({"enc": a, "head": b}, seed=9)
    assert any(n.startswith("enc.1.running_mean") for n in store.names())
    store.save(tmp_path / "ck")

    torch.manual_seed(1)
    a2 = nn.Sequential(nn.Linear(3, 4), nn.BatchNorm1d(4))
    b2 = nn.Linear(4, 2)
    ParamStore.load(tmp_path / "ck").to_modules({"enc": a2, "head": b2})
    for p, q in zip(a.parameters(), a2.parameters()):
        assert torch.equal(p, q)
    for p, q in zip(b.parameters(), b2.parameters()):
        assert torch.equal(p, q)
