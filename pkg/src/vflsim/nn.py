"""Dense multilayer perceptrons with manual backpropagation.

Everything runs in float64 numpy. A "matrix" here is a 2-D ndarray laid out
as (batch, features). Layers cache their forward inputs so that a single
backward pass can produce both parameter gradients and the gradient with
respect to the layer input, which is what lets a network be split across
parties without any autograd machinery.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError

Array = np.ndarray


def as_batch(x: Array) -> Array:
    """Coerce input to a 2-D float64 batch, promoting a single row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected a (batch, features) matrix, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# activations


class Activation:
    """Elementwise activation. `grad` is the derivative at pre-activation z."""

    name = "identity"

    def value(self, z: Array) -> Array:
        return z

    def grad(self, z: Array) -> Array:
        return np.ones_like(z)

    def __repr__(self) -> str:
        return type(self).__name__ + "()"


Identity = Activation


class Relu(Activation):
    name = "relu"

    def value(self, z: Array) -> Array:
        return np.maximum(z, 0.0)

    def grad(self, z: Array) -> Array:
        return (z > 0.0).astype(z.dtype)


class LeakyRelu(Activation):
    name = "leaky_relu"

    def __init__(self, slope: float = 0.01):
        if not 0.0 < slope < 1.0:
            raise ConfigError(f"leaky relu slope must lie in (0, 1), got {slope}")
        self.slope = float(slope)

    def value(self, z: Array) -> Array:
        return np.where(z > 0.0, z, self.slope * z)

    def grad(self, z: Array) -> Array:
        return np.where(z > 0.0, 1.0, self.slope)

    def __repr__(self) -> str:
        return f"LeakyRelu(slope={self.slope})"


class Sigmoid(Activation):
    name = "sigmoid"

    def value(self, z: Array) -> Array:
        # Split by sign so exp never overflows.
        out = np.empty_like(z)
        pos = z >= 0.0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out

    def grad(self, z: Array) -> Array:
        s = self.value(z)
        return s * (1.0 - s)


_ACTIVATIONS = {
    "identity": Activation,
    "relu": Relu,
    "leaky_relu": LeakyRelu,
    "sigmoid": Sigmoid,
}


def activation_from_name(name: str, slope: float = 0.01) -> Activation:
    try:
        cls = _ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None
    return cls(slope) if cls is LeakyRelu else cls()


# ---------------------------------------------------------------------------
# layers and networks


class DenseLayer:
    """Affine map plus activation: act(x @ w + b).

    The forward cache is valid only between a forward call and its matching
    backward call; backward clears it.
    """

    def __init__(self, weights: Array, bias: Array, activation: Activation):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2:
            raise ValueError(f"weights must be 2-D, got shape {weights.shape}")
        if bias.shape != (weights.shape[1],):
            raise ValueError(
                f"bias shape {bias.shape} does not match weights {weights.shape}"
            )
        self.w = weights
        self.b = bias
        self.act = activation
        self._x: Array | None = None
        self._z: Array | None = None

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    def forward(self, x: Array) -> Array:
        x = as_batch(x)
        if x.shape[1] != self.in_dim:
            raise ValueError(
                f"layer expects {self.in_dim} input features, got {x.shape[1]}"
            )
        self._x = x
        self._z = x @ self.w + self.b
        return self.act.value(self._z)

    def infer(self, x: Array) -> Array:
        """Same map as forward, but stateless: nothing cached or cleared."""
        x = as_batch(x)
        if x.shape[1] != self.in_dim:
            raise ValueError(
                f"layer expects {self.in_dim} input features, got {x.shape[1]}"
            )
        return self.act.value(x @ self.w + self.b)

    def backward(self, grad_out: Array) -> tuple[Array, Array, Array]:
        """Return (grad_in, grad_w, grad_b) for the cached forward pass."""
        if self._x is None or self._z is None:
            raise RuntimeError("backward called without a preceding forward")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != self._z.shape:
            raise ValueError(
                f"gradient shape {grad_out.shape} does not match activations "
                f"{self._z.shape}"
            )
        dz = grad_out * self.act.grad(self._z)
        grad_w = self._x.T @ dz
        grad_b = dz.sum(axis=0)
        grad_in = dz @ self.w.T
        self._x = None
        self._z = None
        return grad_in, grad_w, grad_b


class Mlp:
    """A stack of dense layers trained by explicit forward/backward calls."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for lo, hi in zip(layers, layers[1:]):
            if lo.out_dim != hi.in_dim:
                raise ValueError(
                    f"layer output dim {lo.out_dim} feeds layer input dim {hi.in_dim}"
                )
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: Array) -> Array:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def infer(self, x: Array) -> Array:
        """Forward without touching backward caches; use for evaluation so
        large batches do not pin row-count-sized intermediate arrays."""
        for layer in self.layers:
            x = layer.infer(x)
        return x

    def backward(self, grad_out: Array) -> tuple[Array, list[Array]]:
        """Return (grad_in, grads) where grads aligns with params()."""
        grads: list[Array] = []
        for layer in reversed(self.layers):
            grad_out, gw, gb = layer.backward(grad_out)
            grads.append(gb)
            grads.append(gw)
        grads.reverse()
        return grad_out, grads

    def params(self) -> list[Array]:
        """Live parameter arrays, [w0, b0, w1, b1, ...]; mutate to update."""
        out: list[Array] = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def snapshot(self) -> list[Array]:
        return [p.copy() for p in self.params()]

    def restore(self, snap: list[Array]) -> None:
        # copyto keeps array identity so bound optimizers stay valid
        for p, s in zip(self.params(), snap, strict=True):
            np.copyto(p, s)


def init_mlp(
    dims: list[int],
    activations: list[Activation],
    rng: np.random.Generator,
) -> Mlp:
    """Build an Mlp with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.

    dims has one more entry than activations; biases start at zero.
    """
    if len(dims) < 2:
        raise ConfigError(f"need at least input and output dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {dims}")
    if len(activations) != len(dims) - 1:
        raise ConfigError(
            f"{len(dims) - 1} layers need {len(dims) - 1} activations, "
            f"got {len(activations)}"
        )
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return Mlp(layers)


# ---------------------------------------------------------------------------
# losses

# Both losses return (scalar, gradient wrt the prediction matrix) and average
# over the batch, so gradient magnitudes are independent of batch size.


def mse_loss(pred: Array, target: Array) -> tuple[float, Array]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def cross_entropy_loss(logits: Array, labels: Array) -> tuple[float, Array]:
    """Softmax cross entropy, stabilised by max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# optimizers


class SgdMomentum:
    """SGD with classical momentum: v = mu*v + g; p -= lr*v."""

    def __init__(self, params: list[Array], lr: float, momentum: float = 0.0):
        if lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[Array]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(
                f"got {len(grads)} gradients for {len(self.params)} parameters"
            )
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p -= self.lr * v


class Adam:
    """Adam with bias correction and decoupled-from-nothing L2 weight decay.

    Weight decay is added to the raw gradient before the moment updates,
    matching the classical L2 formulation.
    """

    def __init__(
        self,
        params: list[Array],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[Array]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(
                f"got {len(grads)} gradients for {len(self.params)} parameters"
            )
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    mlp: Mlp,
    x: Array,
    target: Array,
    loss_fn,
    h: float = 1e-5,
    max_coords_per_array: int | None = None,
    coord_rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central finite differences.

    Exhaustive by default (two forward passes per parameter entry), which
    suits small networks. For production-sized ones, cap the per-array
    coordinate count; the subset is drawn from coord_rng so the check stays
    reproducible.
    """
    x = as_batch(x)
    out = mlp.forward(x)
    _, grad_out = loss_fn(out, target)
    _, grads = mlp.backward(grad_out)

    worst = 0.0
    for p, g in zip(mlp.params(), grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        if max_coords_per_array is None or flat_p.size <= max_coords_per_array:
            coords = range(flat_p.size)
        else:
            if coord_rng is None:
                coord_rng = np.random.default_rng(0)
            coords = coord_rng.choice(flat_p.size, max_coords_per_array,
                                      replace=False)
        for i in coords:
            orig = flat_p[i]
            flat_p[i] = orig + h
            lo_plus, _ = loss_fn(mlp.forward(x), target)
            flat_p[i] = orig - h
            lo_minus, _ = loss_fn(mlp.forward(x), target)
            flat_p[i] = orig
            numeric = (lo_plus - lo_minus) / (2.0 * h)
            analytic = flat_g[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            err = abs(analytic - numeric) / denom
            if err > worst:
                worst = err
    return worst


def probe_margin(mlp: Mlp, x: Array) -> float:
    """Smallest |pre-activation| over the net's kinked layers for input x.

    Central differences lie about piecewise-linear activations whenever a
    pre-activation sits within the step size of zero, so probe batches
    should keep this margin comfortably above h.
    """
    a = as_batch(x)
    margin = math.inf
    for layer in mlp.layers:
        z = a @ layer.w + layer.b
        if isinstance(layer.act, (Relu, LeakyRelu)):
            margin = min(margin, float(np.abs(z).min()))
        a = layer.act.value(z)
    return margin
