"""Dense/conv layer kernels with exact analytic gradients.

Arrays are float32 in C order; every reduction (convolution sums, batch
statistics, norms) accumulates in float64 before results are stored back as
float32. Layers are plain functions over a spec (immutable hyperparameters)
and a state (parameters, running buffers, and the context saved by the most
recent forward pass).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, ClassVar, Union

import numpy as np

from .errors import NonFiniteError, ShapeError, ValidationError

F32 = np.float32
F64 = np.float64


@dataclass(frozen=True)
class Conv2dSpec:
    kind: ClassVar[str] = "conv2d"
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("conv2d channel counts must be positive")
        if self.kernel_size < 1:
            raise ValidationError("conv2d kernel_size must be >= 1")
        if self.stride < 1:
            raise ValidationError("conv2d stride must be >= 1")
        if self.padding < 0:
            raise ValidationError("conv2d padding must be >= 0")


@dataclass(frozen=True)
class DenseSpec:
    kind: ClassVar[str] = "dense"
    in_features: int
    out_features: int

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ValidationError("dense feature counts must be positive")


@dataclass(frozen=True)
class BatchNormSpec:
    kind: ClassVar[str] = "batch_norm"
    num_features: int
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.num_features < 1:
            raise ValidationError("batch_norm num_features must be positive")
        if not self.epsilon > 0:
            raise ValidationError("batch_norm epsilon must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("batch_norm momentum must be in [0, 1)")


@dataclass(frozen=True)
class ReluSpec:
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class GlobalAvgPoolSpec:
    kind: ClassVar[str] = "global_avg_pool"


@dataclass(frozen=True)
class DropoutSpec:
    kind: ClassVar[str] = "dropout"
    rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValidationError("dropout rate must be in [0, 1)")


LayerSpec = Union[
    Conv2dSpec, DenseSpec, BatchNormSpec, ReluSpec, GlobalAvgPoolSpec, DropoutSpec
]

SPEC_KINDS = {
    cls.kind: cls
    for cls in (Conv2dSpec, DenseSpec, BatchNormSpec, ReluSpec, GlobalAvgPoolSpec, DropoutSpec)
}


@dataclass
class LayerState:
    """Learned parameters, running buffers, and last-forward context."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    ctx: dict[str, Any] = field(default_factory=dict)


def param_names(spec: LayerSpec) -> tuple[str, ...]:
    """Declaration order of learned parameters; fixed for serialization."""
    if spec.kind in ("conv2d", "dense"):
        return ("weight", "bias")
    if spec.kind == "batch_norm":
        return ("gamma", "beta")
    return ()


def buffer_names(spec: LayerSpec) -> tuple[str, ...]:
    """Declaration order of running buffers; fixed for serialization."""
    if spec.kind == "batch_norm":
        return ("running_mean", "running_var")
    return ()


def init_layer_state(spec: LayerSpec, rng: np.random.Generator) -> LayerState:
    """Fresh state: He fan-in init for weights, zero biases, unit-scale norm."""
    state = LayerState()
    if spec.kind == "conv2d":
        fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size
        shape = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
        state.params["weight"] = (
            rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        ).astype(F32)
        state.params["bias"] = np.zeros(spec.out_channels, dtype=F32)
    elif spec.kind == "dense":
        shape = (spec.in_features, spec.out_features)
        state.params["weight"] = (
            rng.standard_normal(shape) * np.sqrt(2.0 / spec.in_features)
        ).astype(F32)
        state.params["bias"] = np.zeros(spec.out_features, dtype=F32)
    elif spec.kind == "batch_norm":
        n = spec.num_features
        state.params["gamma"] = np.ones(n, dtype=F32)
        state.params["beta"] = np.zeros(n, dtype=F32)
        state.buffers["running_mean"] = np.zeros(n, dtype=F32)
        state.buffers["running_var"] = np.ones(n, dtype=F32)
    return state


def layer_output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape for a per-sample input shape (no batch axis)."""
    if spec.kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
            raise ShapeError(
                f"conv2d expects (in_channels={spec.in_channels}, H, W), got {in_shape}"
            )
        c, h, w = in_shape
        oh = (h + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
        ow = (w + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d kernel {spec.kernel_size} too large for input {in_shape}")
        return (spec.out_channels, oh, ow)
    if spec.kind == "dense":
        if in_shape != (spec.in_features,):
            raise ShapeError(f"dense expects ({spec.in_features},), got {in_shape}")
        return (spec.out_features,)
    if spec.kind == "batch_norm":
        if len(in_shape) not in (1, 3) or in_shape[0] != spec.num_features:
            raise ShapeError(
                f"batch_norm expects leading dim {spec.num_features}, got {in_shape}"
            )
        return in_shape
    if spec.kind == "global_avg_pool":
        if len(in_shape) != 3:
            raise ShapeError(f"global_avg_pool expects (C, H, W), got {in_shape}")
        return (in_shape[0],)
    return in_shape


def _require_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in input to {where}")


def _check_input(spec: LayerSpec, x: np.ndarray) -> None:
    if spec.kind == "conv2d":
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ShapeError(
                f"conv2d expects (N, {spec.in_channels}, H, W), got {x.shape}"
            )
    elif spec.kind == "dense":
        if x.ndim != 2 or x.shape[1] != spec.in_features:
            raise ShapeError(f"dense expects (N, {spec.in_features}), got {x.shape}")
    elif spec.kind == "batch_norm":
        if x.ndim not in (2, 4) or x.shape[1] != spec.num_features:
            raise ShapeError(
                f"batch_norm expects (N, {spec.num_features}, ...), got {x.shape}"
            )
    elif spec.kind == "global_avg_pool":
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """(N, C, H, W) -> patch matrix (N, C*k*k, OH*OW), channel-major rows."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c, k, k, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    return np.ascontiguousarray(win).reshape(n, c * k * k, oh * ow), oh, ow


def _col2im(gcols: np.ndarray, x_shape, k: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    g6 = gcols.reshape(n, c, k, k, oh, ow)
    gx = np.zeros((n, c, hp, wp), dtype=F64)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g6[
                :, :, i, j
            ]
    if padding:
        gx = gx[:, :, padding : hp - padding, padding : wp - padding]
    return gx


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_shape(x: np.ndarray) -> tuple[int, ...]:
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


def _forward(
    spec: LayerSpec,
    state: LayerState,
    x: np.ndarray,
    mode: str,
    rng: np.random.Generator | None,
    out_dtype,
    save_ctx: bool,
) -> np.ndarray:
    if spec.kind == "conv2d":
        w = state.params["weight"]
        b = state.params["bias"]
        cols, oh, ow = _im2col(x, spec.kernel_size, spec.stride, spec.padding)
        w2 = w.reshape(spec.out_channels, -1).astype(F64)
        out = np.matmul(w2, cols.astype(F64))  # (N, OC, OH*OW), batched gemm
        out += b.astype(F64)[:, None]
        out = out.reshape(x.shape[0], spec.out_channels, oh, ow)
        if save_ctx:
            state.ctx = {"kind": spec.kind, "cols": cols, "x_shape": x.shape, "out_shape": out.shape}
        return out.astype(out_dtype, copy=False)

    if spec.kind == "dense":
        w = state.params["weight"]
        b = state.params["bias"]
        out = x.astype(F64) @ w.astype(F64) + b.astype(F64)
        if save_ctx:
            state.ctx = {"kind": spec.kind, "x": x, "out_shape": out.shape}
        return out.astype(out_dtype, copy=False)

    if spec.kind == "batch_norm":
        gamma = state.params["gamma"].astype(F64)
        beta = state.params["beta"].astype(F64)
        axes, bshape = _bn_axes(x), _bn_shape(x)
        x64 = x.astype(F64)
        if mode == "train":
            mean = x64.mean(axis=axes)
            centered = x64 - mean.reshape(bshape)
            var = np.mean(centered * centered, axis=axes)  # population variance
            inv_std = 1.0 / np.sqrt(var + spec.epsilon)
            xhat = centered * inv_std.reshape(bshape)
            if save_ctx:  # probe evaluations must not advance running stats
                mom = spec.momentum
                state.buffers["running_mean"] = (
                    mom * state.buffers["running_mean"].astype(F64) + (1 - mom) * mean
                ).astype(F32)
                state.buffers["running_var"] = (
                    mom * state.buffers["running_var"].astype(F64) + (1 - mom) * var
                ).astype(F32)
        else:
            mean = state.buffers["running_mean"].astype(F64)
            var = state.buffers["running_var"].astype(F64)
            inv_std = 1.0 / np.sqrt(var + spec.epsilon)
            xhat = (x64 - mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
        if save_ctx:
            state.ctx = {
                "kind": spec.kind,
                "xhat": xhat.astype(F32),
                "inv_std": inv_std,
                "mode": mode,
                "axes": axes,
                "bshape": bshape,
                "out_shape": out.shape,
            }
        return out.astype(out_dtype, copy=False)

    if spec.kind == "relu":
        out = np.maximum(x, 0)
        if save_ctx:
            state.ctx = {"kind": spec.kind, "mask": x > 0, "out_shape": out.shape}
        return out.astype(out_dtype, copy=False)

    if spec.kind == "global_avg_pool":
        out = x.astype(F64).mean(axis=(2, 3))
        if save_ctx:
            state.ctx = {"kind": spec.kind, "hw": x.shape[2] * x.shape[3], "x_shape": x.shape, "out_shape": out.shape}
        return out.astype(out_dtype, copy=False)

    # dropout
    if mode == "train":
        if rng is None:
            raise ValidationError("dropout in train mode requires an rng")
        keep = rng.random(x.shape) >= spec.rate
        mask = keep.astype(out_dtype) / out_dtype(1.0 - spec.rate)
        out = x * mask
        if save_ctx:
            state.ctx = {"kind": spec.kind, "mask": mask.astype(F32), "out_shape": out.shape}
    else:
        out = x.astype(out_dtype, copy=True)
        if save_ctx:
            state.ctx = {"kind": spec.kind, "mask": None, "out_shape": out.shape}
    return out.astype(out_dtype, copy=False)


def forward_layer(
    spec: LayerSpec,
    state: LayerState,
    x: np.ndarray,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run one layer on a batch; saves the context backward_layer needs."""
    if mode not in ("train", "infer"):
        raise ValidationError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.ascontiguousarray(x, dtype=F32)
    _check_input(spec, x)
    _require_finite(x, spec.kind)
    return _forward(spec, state, x, mode, rng, F32, save_ctx=True)


def backward_layer(
    spec: LayerSpec, state: LayerState, grad_output: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of the last forward pass; never mutates parameters."""
    ctx = state.ctx
    if not ctx or ctx.get("kind") != spec.kind:
        raise ValidationError(f"backward_layer before forward_layer for {spec.kind}")
    g = np.ascontiguousarray(grad_output, dtype=F32)
    if g.shape != tuple(ctx["out_shape"]):
        raise ShapeError(
            f"{spec.kind} backward expects grad of shape {tuple(ctx['out_shape'])}, got {g.shape}"
        )

    if spec.kind == "conv2d":
        cols = ctx["cols"]
        n = cols.shape[0]
        k = spec.kernel_size
        g2 = g.reshape(n, spec.out_channels, -1).astype(F64)  # (N, OC, L)
        cols64 = cols.astype(F64)
        grad_w = np.matmul(g2, cols64.transpose(0, 2, 1)).sum(axis=0)
        grad_w = grad_w.reshape(spec.out_channels, spec.in_channels, k, k)
        grad_b = g2.sum(axis=(0, 2))
        w2 = state.params["weight"].reshape(spec.out_channels, -1).astype(F64)
        gcols = np.matmul(w2.T, g2)  # (N, K, L)
        grad_in = _col2im(gcols, ctx["x_shape"], k, spec.stride, spec.padding)
        return grad_in.astype(F32), {"weight": grad_w.astype(F32), "bias": grad_b.astype(F32)}

    if spec.kind == "dense":
        x64 = ctx["x"].astype(F64)
        g64 = g.astype(F64)
        grad_w = x64.T @ g64
        grad_b = g64.sum(axis=0)
        grad_in = g64 @ state.params["weight"].astype(F64).T
        return grad_in.astype(F32), {"weight": grad_w.astype(F32), "bias": grad_b.astype(F32)}

    if spec.kind == "batch_norm":
        axes, bshape = ctx["axes"], ctx["bshape"]
        xhat = ctx["xhat"].astype(F64)
        inv_std = ctx["inv_std"].reshape(bshape)
        gamma = state.params["gamma"].astype(F64).reshape(bshape)
        g64 = g.astype(F64)
        grad_gamma = (g64 * xhat).sum(axis=axes)
        grad_beta = g64.sum(axis=axes)
        dxhat = g64 * gamma
        if ctx["mode"] == "train":
            m = float(np.prod([xhat.shape[a] for a in axes]))
            grad_in = (
                inv_std
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            )
        else:
            grad_in = dxhat * inv_std
        return grad_in.astype(F32), {
            "gamma": grad_gamma.astype(F32),
            "beta": grad_beta.astype(F32),
        }

    if spec.kind == "relu":
        return (g * ctx["mask"]).astype(F32), {}

    if spec.kind == "global_avg_pool":
        n, c, h, w = ctx["x_shape"]
        grad_in = np.broadcast_to(
            (g.astype(F64) / ctx["hw"])[:, :, None, None], (n, c, h, w)
        )
        return grad_in.astype(F32), {}

    # dropout
    mask = ctx["mask"]
    if mask is None:
        return g.copy(), {}
    return (g * mask).astype(F32), {}


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance, accumulated in float64."""
    a = np.asarray(a, dtype=F32)
    b = np.asarray(b, dtype=F32)
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance shapes differ: {a.shape} vs {b.shape}")
    d = a.astype(F64) - b.astype(F64)
    return float(np.sqrt(np.dot(d.ravel(), d.ravel())))


def finite_difference_check(
    spec: LayerSpec,
    x: np.ndarray,
    epsilon: float = 1e-3,
    mode: str = "train",
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The probe loss is sum(c * output) for a fixed random c. Differences are
    evaluated on the float64 pre-storage outputs so the check measures the
    gradient math, not float32 rounding. For relu, input coordinates within
    max(1e-6, 2*epsilon) of the kink are excluded; the stencil would straddle
    the non-differentiable point.
    """
    from .rngstreams import rng_stream

    x = np.ascontiguousarray(x, dtype=F32)
    state = init_layer_state(spec, rng_stream(seed, 0))
    _check_input(spec, x)

    def run(x_cur: np.ndarray, dtype, save_ctx: bool) -> np.ndarray:
        # dropout masks are re-drawn from an identical stream on every call
        return _forward(spec, state, x_cur, mode, rng_stream(seed, 1), dtype, save_ctx)

    out = run(x, F32, save_ctx=True)
    c32 = rng_stream(seed, 2).standard_normal(out.shape).astype(F32)
    c64 = c32.astype(F64)
    grad_in, grad_params = backward_layer(spec, state, c32)

    def loss(x_cur: np.ndarray) -> float:
        return float(np.sum(c64 * run(x_cur, F64, save_ctx=False)))

    targets: list[tuple[np.ndarray, np.ndarray, bool]] = [(x, grad_in, True)]
    for name in param_names(spec):
        targets.append((state.params[name], grad_params[name], False))

    kink_radius = max(1e-6, 2.0 * epsilon)
    worst = 0.0
    for arr, analytic, is_input in targets:
        flat = arr.reshape(-1)
        an64 = analytic.astype(F64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            if spec.kind == "relu" and is_input and abs(float(orig)) <= kink_radius:
                continue
            flat[i] = F32(float(orig) + epsilon)
            hi = loss(x)
            hi_v = float(flat[i])
            flat[i] = F32(float(orig) - epsilon)
            lo = loss(x)
            lo_v = float(flat[i])
            flat[i] = orig
            fd = (hi - lo) / (hi_v - lo_v)
            err = abs(fd - an64[i]) / max(1.0, abs(an64[i]))
            if err > worst:
                worst = err
    return worst
