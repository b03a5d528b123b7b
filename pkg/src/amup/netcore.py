"""Minimal float64 layer engine with hand-written forward, backward and JVP.

Tensors are plain ``numpy.ndarray`` objects in float64, channel-last:
``(B, d)`` for vector inputs, ``(B, N, C)`` for 1D maps and ``(B, H, W, C)``
for 2D maps. Convolutions use stride 1 and keep the spatial size
("same" semantics) under both circular and zero padding. Biases are not
allocated; every linear map is a pure weight tensor.

Supported families:

* ``mlp``    -- dense layers, ``z1 = W1 x``, ``z_l = W_l relu(z_{l-1})``.
* ``cnn1d``/``cnn2d`` -- the same chain with convolutions; the head is
  global average pooling followed by a dense map.
* ``resnet`` -- dense or conv stem ``z0 = W0 x`` followed by ``depth``
  pre-activation blocks ``z_l = z_{l-1} + F_l(sigma(z_{l-1}))`` where
  ``F_l`` stacks ``branch_depth`` linear maps separated by activations.
  Each block is one depth unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.special import ndtr

if TYPE_CHECKING:  # pragma: no cover
    from amup.init import InitPolicy

FAMILIES = ("mlp", "cnn1d", "cnn2d", "resnet")
PADDINGS = ("circular", "zero")
ACTIVATIONS = ("relu", "gelu", "identity")
LOSSES = ("mse", "ce")

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a pre-activation, output or gradient stops being finite."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


# ---------------------------------------------------------------- activations


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "gelu":
        return x * ndtr(x)
    if kind == "identity":
        return x
    raise ValueError(f"unsupported activation {kind!r}")


def activate_prime(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (x > 0.0).astype(np.float64)
    if kind == "gelu":
        return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unsupported activation {kind!r}")


# ---------------------------------------------------------------- kernels


def centered_kernel(k: int) -> tuple[tuple[int], ...]:
    """1D offsets ``-(k//2) .. k - 1 - k//2`` (symmetric for odd ``k``)."""
    if k < 1:
        raise ValueError("kernel size must be positive")
    lo = -(k // 2)
    return tuple((lo + i,) for i in range(k))


def box_kernel(kh: int, kw: int) -> tuple[tuple[int, int], ...]:
    """2D rectangular stencil of ``kh x kw`` offsets centred on the origin."""
    rows = [d for (d,) in centered_kernel(kh)]
    cols = [d for (d,) in centered_kernel(kw)]
    return tuple((r, c) for r in rows for c in cols)


def _normalize_offsets(kernel, ndim: int) -> tuple[tuple[int, ...], ...]:
    if isinstance(kernel, (int, np.integer)):
        if ndim == 1:
            return centered_kernel(int(kernel))
        return box_kernel(int(kernel), int(kernel))
    offsets = []
    for off in kernel:
        off = (int(off),) if np.ndim(off) == 0 else tuple(int(v) for v in off)
        if len(off) != ndim:
            raise ShapeError(f"offset {off} does not match {ndim}D spatial layout")
        offsets.append(off)
    if not offsets:
        raise ShapeError("kernel support must be non-empty")
    if len(set(offsets)) != len(offsets):
        raise ShapeError("kernel offsets must be distinct")
    return tuple(offsets)


# ---------------------------------------------------------------- spec


@dataclass(frozen=True)
class Layer:
    """One linear map of the unrolled network (one weight tensor)."""

    kind: str  # "dense" | "conv"
    c_in: int
    c_out: int
    offsets: tuple = ()
    role: str = "hidden"  # input | hidden | stem | branch | head
    unit: int = 0  # depth unit; 0 for a ResNet stem, depth + 1 for the head

    @property
    def k(self) -> int:
        return max(1, len(self.offsets))

    @property
    def fan_in(self) -> int:
        return self.c_in * self.k

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.c_out, self.c_in)
        return (self.c_out, self.c_in, len(self.offsets))


@dataclass(frozen=True)
class ArchSpec:
    """Declarative architecture description.

    ``width`` may be one int or one entry per depth unit. ``kernel`` is a
    kernel size or an offset list shared by all units; ``unit_kernels``
    overrides it with one kernel per unit. ``spatial`` is ``()`` for vector
    inputs, ``(N,)`` for 1D and ``(H, W)`` for 2D inputs; a ResNet picks
    dense or conv branches from it.
    """

    family: str
    depth: int
    width: int | tuple[int, ...]
    in_channels: int
    spatial: tuple[int, ...] = ()
    kernel: object = 3
    padding: str = "circular"
    activation: str = "relu"
    out_dim: int = 10
    branch_depth: int = 1
    res_c: float = 2.0
    head_init: str = "mup"
    gelu_gain: bool = True
    unit_kernels: tuple | None = None
    kernels: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.head_init not in ("mup", "he"):
            raise ValueError("head_init must be 'mup' or 'he'")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.branch_depth < 1:
            raise ValueError("branch_depth must be >= 1")
        if self.res_c <= 0:
            raise ValueError("res_c must be positive")
        if self.in_channels < 1 or self.out_dim < 1:
            raise ValueError("in_channels and out_dim must be positive")
        spatial = tuple(int(s) for s in self.spatial)
        object.__setattr__(self, "spatial", spatial)
        if any(s < 1 for s in spatial):
            raise ValueError("spatial sizes must be positive")
        want = {"mlp": (0,), "cnn1d": (1,), "cnn2d": (2,), "resnet": (0, 1, 2)}[self.family]
        if len(spatial) not in want:
            raise ShapeError(f"{self.family} needs a {want}-dimensional spatial layout")

        widths = (self.width,) * self.depth if np.ndim(self.width) == 0 else tuple(self.width)
        widths = tuple(int(w) for w in widths)
        if len(widths) != self.depth or any(w < 1 for w in widths):
            raise ShapeError("width must be a positive int or one entry per depth unit")
        if self.family == "resnet" and len(set(widths)) != 1:
            raise ShapeError("identity skips need equal widths in every residual block")
        object.__setattr__(self, "width", widths)

        if spatial:
            nd = len(spatial)
            if self.unit_kernels is not None:
                if len(self.unit_kernels) != self.depth:
                    raise ShapeError("unit_kernels needs one kernel per depth unit")
                kernels = tuple(_normalize_offsets(kk, nd) for kk in self.unit_kernels)
            else:
                kernels = (_normalize_offsets(self.kernel, nd),) * self.depth
            for ks in kernels:
                for off in ks:
                    for r, d in enumerate(off):
                        if abs(d) >= spatial[r]:
                            raise ShapeError("kernel span must be smaller than the feature map")
        else:
            kernels = ((),) * self.depth
        object.__setattr__(self, "kernels", kernels)

    @property
    def is_conv(self) -> bool:
        return bool(self.spatial)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (*self.spatial, self.in_channels)

    def layers(self) -> list[Layer]:
        kind = "conv" if self.is_conv else "dense"
        out: list[Layer] = []
        if self.family == "resnet":
            n = self.width[0]
            out.append(Layer(kind, self.in_channels, n, self.kernels[0], "stem", 0))
            for unit in range(1, self.depth + 1):
                for _ in range(self.branch_depth):
                    out.append(Layer(kind, n, n, self.kernels[unit - 1], "branch", unit))
        else:
            c_prev = self.in_channels
            for unit in range(1, self.depth + 1):
                role = "input" if unit == 1 else "hidden"
                out.append(Layer(kind, c_prev, self.width[unit - 1], self.kernels[unit - 1], role, unit))
                c_prev = self.width[unit - 1]
        out.append(Layer("dense", self.width[-1], self.out_dim, (), "head", self.depth + 1))
        return out

    def fingerprint(self) -> str:
        import hashlib

        text = repr(
            (
                self.family, self.depth, self.width, self.in_channels, self.spatial,
                self.kernels, self.padding, self.activation, self.out_dim,
                self.branch_depth, self.res_c, self.head_init, self.gelu_gain,
            )
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_(self, **changes) -> "ArchSpec":
        """Copy with changes; a uniform width follows a new ``depth``."""
        if "depth" in changes and "width" not in changes and len(set(self.width)) == 1:
            changes["width"] = self.width[0]
        return replace(self, **changes)


# ---------------------------------------------------------------- model/trace


@dataclass(frozen=True)
class Model:
    spec: ArchSpec
    params: tuple[np.ndarray, ...]
    seed: int
    policies: tuple["InitPolicy", ...] = ()

    def __post_init__(self):
        shapes = [layer.weight_shape for layer in self.spec.layers()]
        if len(shapes) != len(self.params):
            raise ShapeError(f"expected {len(shapes)} weight tensors, got {len(self.params)}")
        for i, (p, s) in enumerate(zip(self.params, shapes)):
            if p.shape != s:
                raise ShapeError(f"param {i} has shape {p.shape}, expected {s}")

    def replace_params(self, params: Sequence[np.ndarray]) -> "Model":
        return Model(self.spec, tuple(params), self.seed, self.policies)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))


@dataclass
class ForwardTrace:
    """Everything a backward or JVP pass needs.

    ``z[l-1]`` is the pre-activation of depth unit ``l`` (``l = 1..L``).
    ``inputs[i]``/``pre[i]`` are the input and output of weight tensor ``i``.
    """

    x: np.ndarray
    z: list[np.ndarray]
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    out: np.ndarray
    z0: np.ndarray | None = None  # ResNet stem output

    def __len__(self) -> int:
        return len(self.z)


Gradients = list


# ---------------------------------------------------------------- linear ops


def _shift(a: np.ndarray, off: tuple[int, ...], circular: bool) -> np.ndarray:
    """``s[p] = a[p + off]`` over the spatial axes (1..nd) of a batch tensor."""
    if not any(off):
        return a
    axes = tuple(range(1, 1 + len(off)))
    if circular:
        return np.roll(a, shift=tuple(-d for d in off), axis=axes)
    out = np.zeros_like(a)
    dst = [slice(None)]
    src = [slice(None)]
    for d, n in zip(off, a.shape[1 : 1 + len(off)]):
        if d >= 0:
            dst.append(slice(0, n - d))
            src.append(slice(d, n))
        else:
            dst.append(slice(-d, n))
            src.append(slice(0, n + d))
    out[tuple(dst)] = a[tuple(src)]
    return out


def _im2col(a: np.ndarray, offsets, circular: bool) -> np.ndarray:
    return np.stack([_shift(a, off, circular) for off in offsets], axis=-1)


def linear(layer: Layer, w: np.ndarray, a: np.ndarray, circular: bool) -> np.ndarray:
    if layer.kind == "dense":
        return a @ w.T
    cols = _im2col(a, layer.offsets, circular)
    lead = cols.shape[:-2]
    z = cols.reshape(-1, layer.c_in * layer.k) @ w.reshape(layer.c_out, -1).T
    return z.reshape(*lead, layer.c_out)


def linear_weight_grad(layer: Layer, a: np.ndarray, d: np.ndarray, circular: bool) -> np.ndarray:
    if layer.kind == "dense":
        return d.reshape(-1, layer.c_out).T @ a.reshape(-1, layer.c_in)
    cols = _im2col(a, layer.offsets, circular)
    g = d.reshape(-1, layer.c_out).T @ cols.reshape(-1, layer.c_in * layer.k)
    return g.reshape(layer.weight_shape)


def linear_input_grad(layer: Layer, w: np.ndarray, d: np.ndarray, circular: bool) -> np.ndarray:
    if layer.kind == "dense":
        return d @ w
    dcols = (d.reshape(-1, layer.c_out) @ w.reshape(layer.c_out, -1)).reshape(
        *d.shape[:-1], layer.c_in, layer.k
    )
    out = np.zeros(d.shape[:-1] + (layer.c_in,))
    for j, off in enumerate(layer.offsets):
        out += _shift(dcols[..., j], tuple(-v for v in off), circular)
    return out


def _pool(a: np.ndarray, spec: ArchSpec) -> np.ndarray:
    if not spec.is_conv:
        return a
    return a.mean(axis=tuple(range(1, 1 + len(spec.spatial))))


def _unpool(d: np.ndarray, spec: ArchSpec) -> np.ndarray:
    if not spec.is_conv:
        return d
    n = int(np.prod(spec.spatial))
    shape = (d.shape[0],) + (1,) * len(spec.spatial) + (d.shape[1],)
    return np.broadcast_to(d.reshape(shape) / n, (d.shape[0], *spec.spatial, d.shape[1])).copy()


def _check(z: np.ndarray, unit: int, what: str = "pre-activation") -> None:
    if not np.isfinite(z).all():
        raise NonFiniteError(f"non-finite {what} at depth unit {unit}", layer=unit)


def _check_batch(spec: ArchSpec, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 1 + len(spec.input_shape) or batch.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input {spec.input_shape}")
    return batch


# ---------------------------------------------------------------- passes


def forward(model: Model, batch: np.ndarray) -> ForwardTrace:
    spec = model.spec
    x = _check_batch(spec, batch)
    layers = spec.layers()
    circ = spec.padding == "circular"
    act = spec.activation
    inputs: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    z: list[np.ndarray] = []
    z0 = None
    with np.errstate(over="ignore", invalid="ignore"):
        if spec.family == "resnet":
            inputs.append(x)
            h = linear(layers[0], model.params[0], x, circ)
            _check(h, 0)
            pre.append(h)
            z0 = h
            i = 1
            for unit in range(1, spec.depth + 1):
                u = activate(h, act)
                v = None
                for t in range(spec.branch_depth):
                    inputs.append(u)
                    v = linear(layers[i], model.params[i], u, circ)
                    pre.append(v)
                    i += 1
                    if t < spec.branch_depth - 1:
                        u = activate(v, act)
                h = h + v
                _check(h, unit)
                z.append(h)
        else:
            a = x
            for unit in range(1, spec.depth + 1):
                inputs.append(a)
                h = linear(layers[unit - 1], model.params[unit - 1], a, circ)
                _check(h, unit)
                pre.append(h)
                z.append(h)
                a = activate(h, act)
        feat = _pool(activate(z[-1], act), spec)
        inputs.append(feat)
        out = feat @ model.params[-1].T
        _check(out, spec.depth + 1, "output")
        pre.append(out)
    return ForwardTrace(x=x, z=z, inputs=inputs, pre=pre, out=out, z0=z0)


def _targets(out: np.ndarray, targets: np.ndarray, loss: str) -> np.ndarray:
    targets = np.asarray(targets)
    if loss == "ce":
        if targets.ndim == 1:
            if targets.shape[0] != out.shape[0]:
                raise ShapeError("label count does not match batch")
            if targets.min() < 0 or targets.max() >= out.shape[1]:
                raise ShapeError("label out of range")
            onehot = np.zeros_like(out)
            onehot[np.arange(out.shape[0]), targets.astype(np.int64)] = 1.0
            return onehot
        if targets.shape != out.shape:
            raise ShapeError(f"targets {targets.shape} do not match outputs {out.shape}")
        return targets.astype(np.float64)
    if loss == "mse":
        if targets.shape != out.shape:
            raise ShapeError(f"targets {targets.shape} do not match outputs {out.shape}")
        return targets.astype(np.float64)
    raise ValueError(f"loss must be one of {LOSSES}")


def softmax(logits: np.ndarray) -> np.ndarray:
    s = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def loss_value(out: np.ndarray, targets: np.ndarray, loss: str) -> float:
    """Batch-mean loss: ``0.5 * ||out - y||^2`` (MSE) or softmax CE."""
    y = _targets(out, targets, loss)
    if loss == "mse":
        return float(0.5 * np.sum((out - y) ** 2) / out.shape[0])
    s = out - out.max(axis=1, keepdims=True)
    logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    return float(-np.sum(y * logp) / out.shape[0])


def loss_grad(out: np.ndarray, targets: np.ndarray, loss: str) -> np.ndarray:
    """Gradient of :func:`loss_value` with respect to the network output."""
    y = _targets(out, targets, loss)
    if loss == "mse":
        return (out - y) / out.shape[0]
    return (softmax(out) - y) / out.shape[0]


def backward(model: Model, trace: ForwardTrace, targets: np.ndarray, loss: str = "mse") -> Gradients:
    spec = model.spec
    layers = spec.layers()
    circ = spec.padding == "circular"
    act = spec.activation
    params = model.params
    grads: list[np.ndarray | None] = [None] * len(params)

    g = loss_grad(trace.out, targets, loss)
    grads[-1] = g.T @ trace.inputs[-1]
    d = _unpool(g @ params[-1], spec) * activate_prime(trace.z[-1], act)

    if spec.family == "resnet":
        m = spec.branch_depth
        i = len(params) - 2
        for unit in range(spec.depth, 0, -1):
            z_prev = trace.z[unit - 2] if unit > 1 else trace.z0
            dv = d
            for t in range(m - 1, -1, -1):
                grads[i] = linear_weight_grad(layers[i], trace.inputs[i], dv, circ)
                du = linear_input_grad(layers[i], params[i], dv, circ)
                if t > 0:
                    dv = du * activate_prime(trace.pre[i - 1], act)
                i -= 1
            d = d + du * activate_prime(z_prev, act)
        grads[0] = linear_weight_grad(layers[0], trace.inputs[0], d, circ)
    else:
        for unit in range(spec.depth, 0, -1):
            i = unit - 1
            grads[i] = linear_weight_grad(layers[i], trace.inputs[i], d, circ)
            if unit > 1:
                d = linear_input_grad(layers[i], params[i], d, circ) * activate_prime(
                    trace.z[unit - 2], act
                )
    return grads


def jvp(model: Model, trace: ForwardTrace, tangent: Sequence[np.ndarray | None]) -> tuple[list[np.ndarray], np.ndarray]:
    """Forward-mode directional derivative of every depth unit and the output.

    ``tangent`` is aligned with ``model.params``; ``None`` entries are zero.
    Returns ``(dz, dout)`` with ``dz[l-1] = d z_l / d(theta) . tangent``.
    """
    spec = model.spec
    layers = spec.layers()
    circ = spec.padding == "circular"
    act = spec.activation
    params = model.params
    if len(tangent) != len(params):
        raise ShapeError("tangent must align with model parameters")
    for t, p in zip(tangent, params):
        if t is not None and t.shape != p.shape:
            raise ShapeError("tangent entry shape mismatch")

    def direct(i: int) -> np.ndarray | None:
        if tangent[i] is None:
            return None
        return linear(layers[i], tangent[i], trace.inputs[i], circ)

    dz: list[np.ndarray] = []
    if spec.family == "resnet":
        dh = direct(0)
        if dh is None:
            dh = np.zeros_like(trace.z0)
        h_prev = trace.z0
        i = 1
        for unit in range(1, spec.depth + 1):
            du = activate_prime(h_prev, act) * dh
            dv = None
            for t in range(spec.branch_depth):
                dv = linear(layers[i], params[i], du, circ)
                extra = direct(i)
                if extra is not None:
                    dv = dv + extra
                if t < spec.branch_depth - 1:
                    du = activate_prime(trace.pre[i], act) * dv
                i += 1
            dh = dh + dv
            h_prev = trace.z[unit - 1]
            dz.append(dh)
    else:
        dh = direct(0)
        if dh is None:
            dh = np.zeros_like(trace.z[0])
        dz.append(dh)
        for unit in range(2, spec.depth + 1):
            i = unit - 1
            dh = linear(layers[i], params[i], activate_prime(trace.z[unit - 2], act) * dh, circ)
            extra = direct(i)
            if extra is not None:
                dh = dh + extra
            dz.append(dh)
    dfeat = _pool(activate_prime(trace.z[-1], act) * dz[-1], spec)
    dout = dfeat @ params[-1].T
    extra = direct(len(params) - 1)
    if extra is not None:
        dout = dout + extra
    return dz, dout


def sgd_step(model: Model, grads: Gradients, eta: float) -> Model:
    """Plain SGD ``W <- W - eta * g``; the input model is left untouched."""
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    if len(grads) != len(model.params):
        raise ShapeError("gradients must align with model parameters")
    new = []
    for i, (p, g) in enumerate(zip(model.params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {i} shape mismatch")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for weight tensor {i}", layer=i)
        new.append(p - eta * g)
    return model.replace_params(new)


def coverage_count(spec: ArchSpec, h: int) -> np.ndarray:
    """Number of ``(p, offset)`` pairs of conv layer ``h`` reading each input site.

    The result has the spatial shape of the layer input; entry ``u`` is the
    visit count of site ``u``.
    """
    if not spec.is_conv:
        raise ValueError("coverage is only defined for convolutional layers")
    layers = [layer for layer in spec.layers() if layer.kind == "conv"]
    units = {layer.unit for layer in layers}
    if h not in units:
        raise ValueError(f"layer {h} is not a convolutional layer of this spec")
    offsets = spec.kernels[max(h, 1) - 1]
    ones = np.ones((1, *spec.spatial, 1))
    circ = spec.padding == "circular"
    counts = sum(_shift(ones, tuple(-v for v in off), circ) for off in offsets)
    return counts[0, ..., 0].astype(np.int64)
