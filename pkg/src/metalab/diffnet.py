"""Differentiable fully connected network core.

A fixed affine -> (batchnorm) -> activation pipeline with exact reverse-mode
gradients and exact Hessian-vector products. The HVP is obtained by running
the hand-written backward pass on dual numbers (forward-over-reverse), so the
second-order path never touches finite differences.

Every array may carry leading batch axes. A parameter set with batch shape
``(B,)`` is B independent networks; an unbatched parameter set evaluated on
inputs of shape ``(B, n, d0)`` yields per-batch losses and gradients. The
MAML code relies on this to process a whole meta-batch in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    use_batchnorm: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError("a network needs at least 2 layers (3 widths)")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.layer_widths
        return [(w[i + 1], w[i]) for i in range(self.n_layers)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "use_batchnorm": self.use_batchnorm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(tuple(d["layer_widths"]), d["activation"], bool(d["use_batchnorm"]))


@dataclass(frozen=True, eq=False)
class NetParams:
    """Per-layer weights (d_out x d_in) and biases, possibly batched."""

    weights: tuple
    biases: tuple

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return tuple(np.shape(self.biases[0])[:-1])

    def flat(self) -> np.ndarray:
        return flatten(self)

    def copy(self) -> "NetParams":
        return NetParams(tuple(w.copy() for w in self.weights), tuple(b.copy() for b in self.biases))

    def map(self, fn, other: "NetParams | None" = None) -> "NetParams":
        if other is None:
            return NetParams(tuple(fn(w) for w in self.weights), tuple(fn(b) for b in self.biases))
        return NetParams(
            tuple(fn(a, b) for a, b in zip(self.weights, other.weights)),
            tuple(fn(a, b) for a, b in zip(self.biases, other.biases)),
        )

    def add_scaled(self, other: "NetParams", alpha: float) -> "NetParams":
        """Return ``self + alpha * other`` (broadcasting over batch axes)."""
        return self.map(lambda a, b: a + alpha * b, other)

    def mean_over_batch(self) -> "NetParams":
        axes = tuple(range(len(self.batch_shape)))
        return self.map(lambda a: a.mean(axis=axes) if axes else a)

    def bit_equal(self, other: "NetParams") -> bool:
        pairs = list(zip(self.weights, other.weights)) + list(zip(self.biases, other.biases))
        return len(self.weights) == len(other.weights) and all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes() for a, b in pairs
        )


# Gradients share the parameter layout.
Gradient = NetParams


@dataclass(frozen=True, eq=False)
class BatchNormState:
    running_mean: tuple
    running_var: tuple
    momentum: float = BN_MOMENTUM
    mode: str = "batch"  # "batch" (batch statistics) or "running"

    def __post_init__(self):
        if self.mode not in ("batch", "running"):
            raise ValueError(f"unknown batchnorm mode {self.mode!r}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("batchnorm momentum must lie in (0, 1)")

    @classmethod
    def fresh(cls, spec: NetSpec, mode: str = "batch") -> "BatchNormState":
        hidden = spec.layer_widths[1:-1]
        return cls(
            tuple(np.zeros(d) for d in hidden),
            tuple(np.ones(d) for d in hidden),
            mode=mode,
        )

    def with_mode(self, mode: str) -> "BatchNormState":
        return BatchNormState(self.running_mean, self.running_var, self.momentum, mode)

    def updated(self, trace: "ForwardTrace") -> "BatchNormState":
        """Fold the batch statistics recorded in ``trace`` into the running averages.

        Batched traces are averaged over their batch axes first.
        """
        if trace.batch_mean is None:
            return self
        m = self.momentum
        means, variances = [], []
        for rm, rv, bm, bv in zip(self.running_mean, self.running_var, trace.batch_mean, trace.batch_var):
            bm = bm.reshape(-1, bm.shape[-1]).mean(axis=0)
            bv = bv.reshape(-1, bv.shape[-1]).mean(axis=0)
            means.append((1 - m) * rm + m * bm)
            variances.append(np.maximum((1 - m) * rv + m * bv, 0.0))
        return BatchNormState(tuple(means), tuple(variances), self.momentum, self.mode)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Post-activation outputs of every layer; ``hidden[-1]`` is the network output."""

    hidden: list
    batch_mean: list | None = None
    batch_var: list | None = None  # unbiased, for running-stat updates
    pre_activations: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# dual numbers for forward-over-reverse differentiation


class _Dual:
    """Value plus tangent. Only the operations used by the network pipeline."""

    __slots__ = ("val", "dot")
    __array_ufunc__ = None

    def __init__(self, val, dot):
        self.val = val
        self.dot = dot

    @property
    def shape(self):
        return np.shape(self.val)

    def __add__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.val + o.val, self.dot + o.dot)
        return _Dual(self.val + o, self.dot)

    __radd__ = __add__

    def __neg__(self):
        return _Dual(-self.val, -self.dot)

    def __sub__(self, o):
        return self + (-o)

    def __rsub__(self, o):
        return (-self) + o

    def __mul__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.val * o.val, self.dot * o.val + self.val * o.dot)
        return _Dual(self.val * o, self.dot * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, _Dual):
            q = self.val / o.val
            return _Dual(q, (self.dot - q * o.dot) / o.val)
        return _Dual(self.val / o, self.dot / o)

    def __rtruediv__(self, o):
        q = o / self.val
        return _Dual(q, -q * self.dot / self.val)

    def __matmul__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.val @ o.val, self.dot @ o.val + self.val @ o.dot)
        return _Dual(self.val @ o, self.dot @ o)

    def __rmatmul__(self, o):
        return _Dual(o @ self.val, o @ self.dot)

    def __getitem__(self, idx):
        return _Dual(self.val[idx], self.dot[idx])

    def swapaxes(self, a, b):
        return _Dual(self.val.swapaxes(a, b), self.dot.swapaxes(a, b))

    def sum(self, axis=None, keepdims=False):
        return _Dual(self.val.sum(axis=axis, keepdims=keepdims), self.dot.sum(axis=axis, keepdims=keepdims))

    def mean(self, axis=None, keepdims=False):
        return _Dual(self.val.mean(axis=axis, keepdims=keepdims), self.dot.mean(axis=axis, keepdims=keepdims))


def _value(x):
    return x.val if isinstance(x, _Dual) else x


def _sqrt(x):
    if isinstance(x, _Dual):
        r = np.sqrt(x.val)
        return _Dual(r, x.dot / (2.0 * r))
    return np.sqrt(x)


def _sigmoid(x):
    v = np.exp(-np.logaddexp(0.0, -_value(x)))
    if isinstance(x, _Dual):
        return _Dual(v, v * (1.0 - v) * x.dot)
    return v


# ---------------------------------------------------------------------------
# the pipeline


def _check_input(spec: NetSpec, params: NetParams, X: np.ndarray):
    if len(params.weights) != spec.n_layers:
        raise ValueError(f"expected {spec.n_layers} layers, params have {len(params.weights)}")
    for (o, i), W, b in zip(spec.layer_shapes, params.weights, params.biases):
        if _value(W).shape[-2:] != (o, i) or _value(b).shape[-1] != o:
            raise ValueError(f"parameter shapes do not match layer ({o}, {i})")
    if X.ndim < 2 or X.shape[-1] != spec.input_dim:
        raise ValueError(f"input must have shape (..., n, {spec.input_dim}), got {X.shape}")


def _bn_mode(spec: NetSpec, bn: BatchNormState | None, n: int) -> str | None:
    if not spec.use_batchnorm:
        return None
    if bn is None:
        raise ValueError("network uses batchnorm but no BatchNormState was given")
    if bn.mode == "batch" and n < 2:
        raise ValueError("batch statistics need at least 2 samples")
    return bn.mode


def _run(spec, weights, biases, X, bn, target=None, want_grad=False):
    """Forward pass, optional MSE loss and its reverse-mode gradient.

    ``weights``/``biases`` may be arrays or duals; everything downstream then
    carries tangents, which is how the HVP is formed.
    """
    mode = _bn_mode(spec, bn, X.shape[-2])
    L = spec.n_layers
    hidden, pre, normed, masks, inv_stds = [], [], [], [], []
    bmeans, bvars = [], []
    H = X
    for l in range(L):
        Z = H @ weights[l].swapaxes(-1, -2) + biases[l][..., None, :]
        if l == L - 1:
            H = Z
            pre.append(Z)
            hidden.append(H)
            break
        pre.append(Z)
        if mode == "batch":
            mu = Z.mean(axis=-2, keepdims=True)
            C = Z - mu
            var = (C * C).mean(axis=-2, keepdims=True)
            inv = 1.0 / _sqrt(var + BN_EPS)
            Z = C * inv
            n = X.shape[-2]
            bmeans.append(np.asarray(_value(mu))[..., 0, :])
            bvars.append(np.asarray(_value(var))[..., 0, :] * n / (n - 1))
            inv_stds.append(inv)
        elif mode == "running":
            inv = 1.0 / np.sqrt(bn.running_var[l] + BN_EPS)
            Z = (Z - bn.running_mean[l]) * inv
            inv_stds.append(inv)
        normed.append(Z)
        if spec.activation == "relu":
            mask = _value(Z) > 0.0
            masks.append(mask)
            H = Z * mask
        elif spec.activation == "sigmoid":
            H = _sigmoid(Z)
            masks.append(H)
        else:
            H = Z
            masks.append(None)
        hidden.append(H)

    trace = ForwardTrace(
        [np.asarray(_value(h)) for h in hidden],
        bmeans if mode == "batch" else None,
        bvars if mode == "batch" else None,
        [np.asarray(_value(z)) for z in pre],
    )
    if target is None:
        return H, trace, None, None

    if np.shape(target) != np.shape(_value(H))[-2:] and np.shape(target) != np.shape(_value(H)):
        raise ValueError(f"target shape {np.shape(target)} does not match output {np.shape(_value(H))}")
    R = H - target
    loss = (R * R).mean(axis=(-2, -1))
    if not want_grad:
        return H, trace, loss, None

    n, d = np.shape(_value(H))[-2:]
    dZ = R * (2.0 / (n * d))
    gW, gb = [None] * L, [None] * L
    for l in range(L - 1, -1, -1):
        H_prev = X if l == 0 else hidden[l - 1]
        gW[l] = dZ.swapaxes(-1, -2) @ H_prev
        gb[l] = dZ.sum(axis=-2)
        if l == 0:
            break
        dH = dZ @ weights[l]
        k = l - 1
        if spec.activation == "relu":
            dZh = dH * masks[k]
        elif spec.activation == "sigmoid":
            s = masks[k]
            dZh = dH * s * (1.0 - s)
        else:
            dZh = dH
        if mode == "batch":
            Zh = normed[k]
            dZ = inv_stds[k] * (
                dZh - dZh.mean(axis=-2, keepdims=True) - Zh * (dZh * Zh).mean(axis=-2, keepdims=True)
            )
        elif mode == "running":
            dZ = dZh * inv_stds[k]
        else:
            dZ = dZh
    return H, trace, loss, (gW, gb)


# ---------------------------------------------------------------------------
# public operations


def init_params(spec: NetSpec, seed: int) -> NetParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for o, i in spec.layer_shapes:
        bound = 1.0 / np.sqrt(i)
        weights.append(rng.uniform(-bound, bound, size=(o, i)))
        biases.append(np.zeros(o))
    return NetParams(tuple(weights), tuple(biases))


def forward(spec: NetSpec, params: NetParams, X, bn: BatchNormState | None = None):
    """Evaluate the network; returns ``(output, trace)``."""
    X = np.asarray(X, dtype=np.float64)
    _check_input(spec, params, X)
    out, trace, _, _ = _run(spec, params.weights, params.biases, X, bn)
    return out, trace


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty prediction")
    return float(np.mean((pred - target) ** 2))


def loss_grad(spec: NetSpec, params: NetParams, X, T, bn: BatchNormState | None = None):
    """MSE loss and its exact gradient.

    With batched inputs the loss is an array over batch axes and the gradient
    carries the same batch axes.
    """
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    _check_input(spec, params, X)
    _, _, loss, (gW, gb) = _run(spec, params.weights, params.biases, X, bn, target=T, want_grad=True)
    if np.ndim(loss) == 0:
        loss = float(loss)
    return loss, NetParams(tuple(gW), tuple(gb))


def hvp_params(spec: NetSpec, params: NetParams, X, T, direction: NetParams, bn=None) -> NetParams:
    """Structured Hessian-vector product; ``direction`` may carry batch axes."""
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    _check_input(spec, params, X)
    W = [_Dual(w, v) for w, v in zip(params.weights, direction.weights)]
    b = [_Dual(w, v) for w, v in zip(params.biases, direction.biases)]
    _, _, _, (gW, gb) = _run(spec, W, b, X, bn, target=T, want_grad=True)
    return NetParams(tuple(np.asarray(g.dot) for g in gW), tuple(np.asarray(g.dot) for g in gb))


def hessian_vector_product(spec: NetSpec, params: NetParams, X, T, v, bn=None) -> np.ndarray:
    """Exact Hessian of the MSE loss at ``params`` applied to the flat vector ``v``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != spec.n_params:
        raise ValueError(f"direction has length {v.shape[-1]}, network has {spec.n_params} parameters")
    return flatten(hvp_params(spec, params, X, T, unflatten(spec, v), bn))


def flatten(params: NetParams) -> np.ndarray:
    batch = params.batch_shape
    parts = []
    for W, b in zip(params.weights, params.biases):
        parts.append(np.broadcast_to(W, batch + W.shape[-2:]).reshape(batch + (-1,)))
        parts.append(np.broadcast_to(b, batch + b.shape[-1:]))
    return np.concatenate(parts, axis=-1)


def unflatten(spec: NetSpec, flat) -> NetParams:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim < 1 or flat.shape[-1] != spec.n_params:
        raise ValueError(f"flat vector must have length {spec.n_params}, got {flat.shape}")
    batch = flat.shape[:-1]
    weights, biases = [], []
    pos = 0
    for o, i in spec.layer_shapes:
        weights.append(flat[..., pos : pos + o * i].reshape(batch + (o, i)).copy())
        pos += o * i
        biases.append(flat[..., pos : pos + o].copy())
        pos += o
    return NetParams(tuple(weights), tuple(biases))
