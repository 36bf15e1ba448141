"""Differentiable dense-array substrate.

Everything network-shaped in this package is written as plain functions over a
:class:`ParamSet` using the op catalog below. Reverse-mode gradients come from
torch autograd; :func:`fd_check` is an independent central-difference oracle.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

ARCHIVE_VERSION = 1


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}")


class NumericalError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_DTYPE = torch.float32


def default_dtype() -> torch.dtype:
    return _DTYPE


@contextlib.contextmanager
def verification_mode() -> Iterator[None]:
    """Switch the substrate to 64-bit floats for gradient verification."""
    global _DTYPE
    prev, prev_torch = _DTYPE, torch.get_default_dtype()
    _DTYPE = torch.float64
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        _DTYPE = prev
        torch.set_default_dtype(prev_torch)


def _finite(op: str, out: torch.Tensor) -> torch.Tensor:
    # NaN/Inf anywhere propagates into the sum; a single reduction is far cheaper than isfinite().all()
    if not math.isfinite(out.sum().item()):
        raise NumericalError(f"{op}: non-finite values in output")
    return out


# ---------------------------------------------------------------------------
# op catalog


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _finite("matmul", a @ b)


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` is (out, in)."""
    if x.shape[-1] != w.shape[1] or (b is not None and b.shape != (w.shape[0],)):
        raise ShapeError("linear", x.shape, w.shape, () if b is None else b.shape)
    return _finite("linear", F.linear(x, w, b))


def conv2d(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None, stride: int = 1) -> torch.Tensor:
    """Zero-padded 'same' convolution (stride 1) or halving convolution (stride 2)."""
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape)
    return _finite("conv2d", F.conv2d(x, w, b, stride=stride, padding=w.shape[-1] // 2))


def conv_transpose2d(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Stride-2 transposed convolution with a 4x4 kernel; doubles H and W. ``w`` is (in, out, 4, 4)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2:] != (4, 4):
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("conv_transpose2d", w.shape, b.shape)
    return _finite("conv_transpose2d", F.conv_transpose2d(x, w, b, stride=2, padding=1))


def group_norm(x: torch.Tensor, groups: int, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if x.ndim < 2 or x.shape[1] % groups or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError("group_norm", x.shape, gamma.shape, beta.shape)
    return _finite("group_norm", F.group_norm(x, groups, gamma, beta, eps))


def silu(x: torch.Tensor) -> torch.Tensor:
    return _finite("silu", F.silu(x))


def softplus(x: torch.Tensor) -> torch.Tensor:
    return _finite("softplus", F.softplus(x))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return _finite("softmax", torch.softmax(x, dim=dim))


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention. q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv)."""
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return _finite("attention", softmax(scores, dim=-1) @ v)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return _finite("add", a + b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return _finite("mul", a * b)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    return _finite("mse", ((a - b) ** 2).mean())


# ---------------------------------------------------------------------------
# parameters


class ParamSet:
    """Named tensors, each either trainable or frozen."""

    def __init__(self, tensors: dict[str, torch.Tensor] | None = None, frozen: set[str] | None = None):
        self.tensors: dict[str, torch.Tensor] = dict(tensors or {})
        self.frozen: set[str] = set(frozen or ())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def add(self, name: str, value: torch.Tensor, trainable: bool = True) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.tensors[name] = value
        if not trainable:
            self.frozen.add(name)

    def is_trainable(self, name: str) -> bool:
        return name not in self.frozen

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def freeze(self, prefix: str = "") -> "ParamSet":
        self.frozen.update(n for n in self.tensors if n.startswith(prefix))
        return self

    def unfreeze(self, prefix: str = "") -> "ParamSet":
        self.frozen.difference_update([n for n in self.frozen if n.startswith(prefix)])
        return self

    def subset(self, prefix: str) -> "ParamSet":
        names = [n for n in self.tensors if n.startswith(prefix)]
        return ParamSet({n: self.tensors[n] for n in names}, self.frozen & set(names))

    def merged(self, *others: "ParamSet") -> "ParamSet":
        out = ParamSet(self.tensors, self.frozen)
        for o in others:
            for n, t in o.tensors.items():
                out.add(n, t, o.is_trainable(n))
        return out

    def to(self, dtype: torch.dtype) -> "ParamSet":
        return ParamSet({n: t.detach().to(dtype) for n, t in self.tensors.items()}, self.frozen)

    def clone(self) -> "ParamSet":
        return ParamSet({n: t.detach().clone() for n, t in self.tensors.items()}, self.frozen)

    def num_elements(self, prefix: str = "") -> int:
        return sum(t.numel() for n, t in self.tensors.items() if n.startswith(prefix))

    def requires_grad_(self) -> "ParamSet":
        for n, t in self.tensors.items():
            t.requires_grad_(self.is_trainable(n))
        return self

    def save(self, path: str | Path) -> None:
        entries = [(n, t, {"trainable": self.is_trainable(n)}) for n, t in self.tensors.items()]
        write_envelope(path, {"kind": "paramset"}, entries)

    @classmethod
    def load(cls, path: str | Path) -> "ParamSet":
        meta, entries = read_envelope(path)
        if meta.get("kind") != "paramset":
            raise ValueError(f"{path}: not a ParamSet archive")
        ps = cls()
        for e, arr in entries:
            ps.add(e["name"], torch.from_numpy(arr.copy()).to(_DTYPE), e["trainable"])
        return ps


# ---------------------------------------------------------------------------
# archive envelope: one line of JSON manifest, then little-endian f32 payloads


def write_envelope(path: str | Path, meta: dict, entries: list[tuple[str, torch.Tensor | np.ndarray, dict]]) -> None:
    manifest_entries, payloads, offset = [], [], 0
    for name, value, extra in entries:
        arr = np.ascontiguousarray(
            value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value),
            dtype="<f4",
        )
        manifest_entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset, **extra})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format_version": ARCHIVE_VERSION, **meta, "entries": manifest_entries}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for p in payloads:
            fh.write(p)


def read_envelope(path: str | Path) -> tuple[dict, list[tuple[dict, np.ndarray]]]:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    if manifest.get("format_version") != ARCHIVE_VERSION:
        raise ValueError(f"{path}: format_version {manifest.get('format_version')!r}, expected {ARCHIVE_VERSION}")
    out = []
    for e in manifest.pop("entries"):
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        out.append((e, arr))
    return manifest, out


# ---------------------------------------------------------------------------
# gradients, verification, optimisation


def grad(loss: torch.Tensor, params: ParamSet, allow_unused: bool = True) -> dict[str, torch.Tensor]:
    """d(loss)/d(param) for every trainable entry of ``params``.

    Parameters that do not influence ``loss`` get a zero gradient.
    """
    if loss.numel() != 1:
        raise ShapeError("grad", loss.shape, ())
    names = [n for n in params.trainable_names() if params[n].requires_grad]
    gs = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=allow_unused)
    return {n: (torch.zeros_like(params[n]) if g is None else g.detach()) for n, g in zip(names, gs)}


@dataclass
class FDReport:
    max_rel_error: float
    worst: str = ""
    checked: int = 0
    per_param: dict[str, float] = field(default_factory=dict)

    def __repr__(self) -> str:
        return f"FDReport(max_rel_error={self.max_rel_error:.3e}, worst={self.worst!r}, checked={self.checked})"


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    """Relative difference; values smaller than ``floor`` are compared on an absolute scale.

    The floor keeps structurally-zero gradients (e.g. a bias feeding a per-channel
    normalization) from turning central-difference roundoff into a large ratio.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(f: Callable[[ParamSet], torch.Tensor], params: ParamSet, eps: float = 1e-5,
             names: list[str] | None = None, floor: float = 1e-6) -> FDReport:
    """Compare autograd gradients of ``f`` against central differences, element by element.

    Must be called under :func:`verification_mode` with float64 params. Central-difference
    roundoff grows with |f|, so the relative-error floor is ``floor * max(1, |f|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params.requires_grad_()
    loss = f(params)
    scale = max(1.0, abs(loss.item()))
    analytic = grad(loss, params)
    report = FDReport(0.0)
    with torch.no_grad():
        for name in names or params.trainable_names():
            t = params[name]
            flat = t.view(-1)
            g = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f(params).item()
                flat[i] = orig - eps
                fm = f(params).item()
                flat[i] = orig
                err = rel_error((fp - fm) / (2 * eps), g[i].item(), floor * scale)
                worst = max(worst, err)
            report.per_param[name] = worst
            report.checked += flat.numel()
            if worst >= report.max_rel_error:
                report.max_rel_error, report.worst = worst, name
    return report


class Adam:
    """Adam with bias correction; frozen entries are never touched."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}

    def step(self, params: ParamSet, grads: dict[str, torch.Tensor]) -> None:
        missing = [n for n in params.trainable_names() if n not in grads]
        if missing:
            raise KeyError(f"missing gradient for trainable parameter(s): {', '.join(missing)}")
        self.step_count += 1
        b1c = 1 - self.beta1 ** self.step_count
        b2c = 1 - self.beta2 ** self.step_count
        with torch.no_grad():
            for n in params.trainable_names():
                g = grads[n]
                m = self.m.get(n)
                if m is None:
                    m = self.m[n] = torch.zeros_like(g)
                    self.v[n] = torch.zeros_like(g)
                v = self.v[n]
                m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
                params[n].sub_(self.lr * (m / b1c) / ((v / b2c).sqrt() + self.eps))

    def state_entries(self) -> list[tuple[str, torch.Tensor, dict]]:
        out = [("__step__", torch.tensor([float(self.step_count)]), {"trainable": False})]
        for n in self.m:
            out.append((f"__m__.{n}", self.m[n], {"trainable": False}))
            out.append((f"__v__.{n}", self.v[n], {"trainable": False}))
        return out
