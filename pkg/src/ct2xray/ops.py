"""Differentiable primitives, gradient verification, and parameter storage.

All trainable components are built from the reverse-mode primitives listed in
``primitive_suite``. The wrappers delegate to torch's autodiff engine and add
shape validation that names the offending shapes. ``grad_check`` is the
independent oracle: central finite differences probed against the analytic
gradient, with the reference optionally evaluated at higher precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation, FormatError

LEAKY_SLOPE = 0.2  # default negative slope used throughout the networks


def _shape(t):
    return tuple(t.shape)


def _require(cond, msg):
    if not cond:
        raise ContractViolation(msg)


# ---------------------------------------------------------------------------
# primitive set
# ---------------------------------------------------------------------------

def conv3d(x, weight, bias=None, stride=1, padding=0):
    _require(x.dim() == 5, f"conv3d expects NCDHW input, got {_shape(x)}")
    _require(weight.dim() == 5, f"conv3d expects 5D weight, got {_shape(weight)}")
    _require(x.shape[1] == weight.shape[1],
             f"conv3d channel mismatch: input {_shape(x)} vs weight {_shape(weight)}")
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    _require(x.dim() == 4, f"conv2d expects NCHW input, got {_shape(x)}")
    _require(weight.dim() == 4, f"conv2d expects 4D weight, got {_shape(weight)}")
    _require(x.shape[1] == weight.shape[1],
             f"conv2d channel mismatch: input {_shape(x)} vs weight {_shape(weight)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def batch_norm(x, running_mean, running_var, weight=None, bias=None,
               training=True, momentum=0.1, eps=1e-5):
    """Per-batch statistics while training, running averages at inference.

    ``momentum`` follows torch's convention (weight of the new observation),
    so 0.1 corresponds to a 0.9 running-average decay.
    """
    _require(x.dim() >= 2, f"batch_norm expects batched input, got {_shape(x)}")
    return F.batch_norm(x, running_mean, running_var, weight, bias,
                        training=training, momentum=momentum, eps=eps)


def leaky_rectifier(x, slope=LEAKY_SLOPE):
    return F.leaky_relu(x, negative_slope=slope)


def tanh(x):
    return torch.tanh(x)


def softmax_last(x):
    return torch.softmax(x, dim=-1)


def matmul(a, b):
    _require(a.shape[-1] == b.shape[-2],
             f"matmul inner-dim mismatch: {_shape(a)} @ {_shape(b)}")
    return a @ b


def concat(tensors, dim=-1):
    ref = tensors[0].shape
    for t in tensors[1:]:
        ok = len(t.shape) == len(ref) and all(
            t.shape[i] == ref[i] for i in range(len(ref)) if i != dim % len(ref))
        _require(ok, f"concat shape mismatch along dim {dim}: "
                     f"{[_shape(t) for t in tensors]}")
    return torch.cat(list(tensors), dim=dim)


def adaptive_avg_pool2d(x, output_size):
    _require(x.dim() == 4, f"adaptive_avg_pool2d expects NCHW, got {_shape(x)}")
    return F.adaptive_avg_pool2d(x, output_size)


def upsample_nearest(x, factor=2):
    _require(x.dim() in (4, 5), f"upsample_nearest expects NCHW/NCDHW, got {_shape(x)}")
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def affine(x, weight, bias=None):
    _require(x.shape[-1] == weight.shape[-1],
             f"affine feature mismatch: input {_shape(x)} vs weight {_shape(weight)}")
    return F.linear(x, weight, bias)


def channel_mean_std(x, eps=1e-8):
    """Per-channel spatial mean and std of an NCHW map (AdaIN statistics)."""
    _require(x.dim() == 4, f"channel_mean_std expects NCHW, got {_shape(x)}")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return mean, torch.sqrt(var + eps)


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def sub(a, b):
    return a - b


def mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def total(x, dim=None):
    return x.sum() if dim is None else x.sum(dim=dim)


def absval(x):
    return torch.abs(x)


def square(x):
    return x * x


def sqrt(x):
    return torch.sqrt(x)


def primitive_suite():
    """The full set of differentiable primitives the networks are built from."""
    return {
        "conv3d": conv3d,
        "conv2d": conv2d,
        "batch_norm": batch_norm,
        "leaky_rectifier": leaky_rectifier,
        "tanh": tanh,
        "softmax_last": softmax_last,
        "matmul": matmul,
        "concat": concat,
        "adaptive_avg_pool2d": adaptive_avg_pool2d,
        "upsample_nearest": upsample_nearest,
        "affine": affine,
        "channel_mean_std": channel_mean_std,
        "add": add,
        "mul": mul,
        "sub": sub,
        "mean": mean,
        "sum": total,
        "abs": absval,
        "square": square,
        "sqrt": sqrt,
    }


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_probes: int
    worst: str = ""

    def ok(self, tolerance):
        return math.isfinite(self.max_rel_err) and self.max_rel_err < tolerance


class GradCheckError(ContractViolation):
    pass


def _rel_err(a, b, floor=1e-3):
    return abs(a - b) / max(abs(a), abs(b), floor)


def _probe_indices(n, max_probes, rng):
    if n <= max_probes:
        return np.arange(n)
    return rng.choice(n, size=max_probes, replace=False)


def _scalar(fn, tensors):
    out = fn(*tensors)
    if out.numel() != 1:
        raise GradCheckError(f"grad_check needs a scalar-valued function, got {_shape(out)}")
    if not torch.isfinite(out).all():
        _name_nonfinite(fn, tensors)
    return float(out)


def _name_nonfinite(fn, tensors):
    # rerun under anomaly detection so the failing primitive gets named
    try:
        with torch.autograd.set_detect_anomaly(True):
            out = fn(*tensors)
            if out.requires_grad:
                out.backward()
    except RuntimeError as exc:
        raise GradCheckError(f"non-finite intermediate: {exc}") from exc
    raise GradCheckError("non-finite output of checked function")


def grad_check(fn, inputs, tolerance=None, eps=None, max_probes=32, seed=0,
               fd_dtype=None, rel_floor=1e-3):
    """Compare the reverse-mode gradient of a scalar ``fn`` against central
    finite differences.

    ``inputs`` is a tensor or sequence of tensors treated as differentiation
    leaves; ``fn`` must be a pure function of them. A random coordinate
    subset (up to ``max_probes`` per input) is probed. ``fd_dtype`` evaluates
    the finite-difference reference at a different precision, which keeps the
    oracle accurate when the gradient under test runs in 32-bit.

    Returns a ``GradCheckReport``; when ``tolerance`` is given, a failing
    check raises ``GradCheckError``.
    """
    if isinstance(inputs, torch.Tensor):
        inputs = [inputs]
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    if out.numel() != 1:
        raise GradCheckError(f"grad_check needs a scalar-valued function, got {_shape(out)}")
    if not torch.isfinite(out).all():
        _name_nonfinite(fn, leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    for i, g in enumerate(grads):
        if g is not None and not torch.isfinite(g).all():
            raise GradCheckError(f"non-finite analytic gradient for input {i}")

    rng = np.random.default_rng(seed)
    fd_inputs = [t.detach().clone() for t in inputs]
    if fd_dtype is not None:
        fd_inputs = [t.to(fd_dtype) if t.is_floating_point() else t for t in fd_inputs]
    base_eps = eps
    worst = GradCheckReport(0.0, 0, "")
    n_probes = 0
    for i, t in enumerate(fd_inputs):
        if not t.is_floating_point():
            continue
        flat = t.reshape(-1)
        # central-difference sweet spot: truncation ~h^2, round-off ~eps_mach/h
        h_default = 1e-5 if flat.dtype == torch.float64 else 1e-3
        analytic = (torch.zeros_like(flat) if grads[i] is None
                    else grads[i].reshape(-1).to(flat.dtype))
        for idx in _probe_indices(flat.numel(), max_probes, rng):
            idx = int(idx)
            h = (base_eps if base_eps is not None
                 else h_default * max(1.0, abs(float(flat[idx]))))
            orig = float(flat[idx])
            flat[idx] = orig + h
            f_plus = _scalar(fn, fd_inputs)
            flat[idx] = orig - h
            f_minus = _scalar(fn, fd_inputs)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            err = _rel_err(float(analytic[idx]), numeric, rel_floor)
            n_probes += 1
            if err > worst.max_rel_err:
                worst = GradCheckReport(err, 0, f"input {i} flat index {idx}")
    report = GradCheckReport(worst.max_rel_err, n_probes, worst.worst)
    if tolerance is not None and not report.ok(tolerance):
        raise GradCheckError(
            f"gradient check failed: max rel err {report.max_rel_err:.3e} "
            f"at {report.worst} (tolerance {tolerance:.1e})")
    return report


def grad_check_params(loss_fn, named_params, tolerance=None, eps=1e-6,
                      max_probes=8, seed=0, rel_floor=1e-3):
    """Finite-difference check of ``loss_fn()`` against the gradients it
    produces on ``named_params`` (a name -> Parameter mapping).

    Parameters are perturbed in place and restored; the analytic gradient is
    read from ``.grad`` after a fresh backward. Intended to run in 64-bit.
    """
    params = dict(named_params)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise GradCheckError("non-finite loss in grad_check_params")
    loss.backward()

    rng = np.random.default_rng(seed)
    worst = GradCheckReport(0.0, 0, "")
    n_probes = 0
    for name, p in params.items():
        analytic = (torch.zeros_like(p) if p.grad is None else p.grad).reshape(-1)
        flat = p.data.reshape(-1)
        for idx in _probe_indices(flat.numel(), max_probes, rng):
            idx = int(idx)
            h = eps * max(1.0, abs(float(flat[idx])))
            orig = float(flat[idx])
            # .data writes bypass autograd; grad mode stays on because the
            # loss may itself contain an inner gradient (R1)
            flat[idx] = orig + h
            f_plus = float(loss_fn().detach())
            flat[idx] = orig - h
            f_minus = float(loss_fn().detach())
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            err = _rel_err(float(analytic[idx]), numeric, rel_floor)
            n_probes += 1
            if err > worst.max_rel_err:
                worst = GradCheckReport(err, 0, f"{name}[{idx}]")
    report = GradCheckReport(worst.max_rel_err, n_probes, worst.worst)
    if tolerance is not None and not report.ok(tolerance):
        raise GradCheckError(
            f"gradient check failed: max rel err {report.max_rel_err:.3e} "
            f"at {report.worst} (tolerance {tolerance:.1e})")
    return report


@lru_cache(maxsize=1)
def double_backward_available():
    """Whether the engine can differentiate a squared input-gradient norm with
    respect to parameters. When False, training must fall back to the
    finite-difference R1 surrogate."""
    try:
        x = torch.randn(2, 1, 8, 8, requires_grad=True)
        w = torch.randn(4, 1, 3, 3, requires_grad=True)
        score = F.leaky_relu(F.conv2d(x, w, padding=1), 0.2).sum()
        (g,) = torch.autograd.grad(score, x, create_graph=True)
        penalty = (g ** 2).sum()
        torch.autograd.grad(penalty, w)
    except RuntimeError:
        return False
    return True


# ---------------------------------------------------------------------------
# parameter storage
# ---------------------------------------------------------------------------

_DTYPES = {
    "f32": (torch.float32, "<f4"),
    "f64": (torch.float64, "<f8"),
    "i64": (torch.int64, "<i8"),
}
_DTYPE_NAMES = {v[0]: k for k, v in _DTYPES.items()}

MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.f32"


class ParamStore:
    """Named, shaped tensor collection with raw-file checkpoint round-trip.

    On disk: ``manifest.json`` lists entry names, shapes, dtypes and byte
    offsets plus the creation seed; ``params.f32`` holds the little-endian
    raw values concatenated in manifest order. save -> load -> save is
    byte-identical.
    """

    def __init__(self, seed=None):
        self.seed = seed
        self._entries = {}

    def put(self, name, tensor):
        if name in self._entries:
            raise ContractViolation(f"duplicate parameter name: {name}")
        if tensor.dtype not in _DTYPE_NAMES:
            raise ContractViolation(f"unsupported dtype {tensor.dtype} for {name}")
        self._entries[name] = tensor.detach().clone()

    def get(self, name):
        return self._entries[name]

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def total_scalars(self):
        return sum(t.numel() for t in self._entries.values())

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"creation_seed": self.seed, "entries": []}
        blob = bytearray()
        for name, tensor in self._entries.items():
            dtype_name = _DTYPE_NAMES[tensor.dtype]
            raw = np.ascontiguousarray(
                tensor.detach().cpu().numpy().astype(_DTYPES[dtype_name][1]))
            manifest["entries"].append({
                "name": name,
                "shape": list(tensor.shape),
                "dtype": dtype_name,
                "offset_bytes": len(blob),
            })
            blob += raw.tobytes()
        (directory / MANIFEST_NAME).write_text(
            json.dumps(manifest, indent=1, sort_keys=True))
        (directory / PARAMS_NAME).write_bytes(bytes(blob))
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.exists():
            raise FormatError(f"missing {MANIFEST_NAME} in {directory}")
        manifest = json.loads(manifest_path.read_text())
        blob = (directory / PARAMS_NAME).read_bytes()
        store = cls(seed=manifest.get("creation_seed"))
        for entry in manifest["entries"]:
            torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset_bytes"]
            nbytes = count * np.dtype(np_dtype).itemsize
            if start + nbytes > len(blob):
                raise FormatError(
                    f"entry {entry['name']} overruns {PARAMS_NAME} "
                    f"({start + nbytes} > {len(blob)} bytes)")
            arr = np.frombuffer(blob, dtype=np_dtype, count=count,
                                offset=start).reshape(shape)
            store._entries[entry["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
        return store

    @classmethod
    def from_modules(cls, modules, seed=None):
        """Collect parameters and buffers of ``{namespace: nn.Module}``."""
        store = cls(seed=seed)
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                store.put(f"{prefix}.{name}", p.data)
            for name, b in module.named_buffers():
                store.put(f"{prefix}.{name}", b.data)
        return store

    def to_modules(self, modules):
        """Copy stored values back into ``{namespace: nn.Module}``."""
        for prefix, module in modules.items():
            tensors = dict(module.named_parameters())
            tensors.update(dict(module.named_buffers()))
            for name, t in tensors.items():
                key = f"{prefix}.{name}"
                if key not in self._entries:
                    raise FormatError(f"checkpoint is missing entry {key}")
                src = self._entries[key]
                if tuple(src.shape) != tuple(t.shape):
                    raise FormatError(
                        f"shape mismatch for {key}: checkpoint {_shape(src)} "
                        f"vs module {_shape(t)}")
                with torch.no_grad():
                    t.copy_(src.to(t.dtype))
