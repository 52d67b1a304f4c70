"""Dense feedforward networks with cached forward passes and hand-written backprop.

Parameters of a network live in one flat vector (``net.params``); the weight
and bias arrays of every layer and head are views into it, so an optimizer can
update the flat vector in place. Layers use the row convention ``y = x @ W + b``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CacheMismatchError, WidthMismatchError
from .quatgeom import PE_WIDTH, SH_BASIS_COUNT

ACTIVATIONS = ("relu", "sigmoid", "linear")


@dataclass
class LayerSpec:
    n_in: int
    n_out: int
    activation: str


@dataclass
class ForwardCache:
    signature: tuple
    inputs: list = field(default_factory=list)  # input row block of each layer
    preacts: list = field(default_factory=list)
    head_outputs: dict = field(default_factory=dict)
    last_hidden: np.ndarray = None
    net_input: np.ndarray = None
    squeeze: bool = False


def _apply(act, z):
    if act == "relu":
        return np.maximum(z, 0)
    if act == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


class DenseNet:
    """A stack of dense layers followed by parallel output heads.

    ``skip_at`` names the hidden layer (0-based) whose input is the previous
    activation concatenated with the raw network input.
    """

    def __init__(self, input_width, hidden, heads, skip_at=None, seed=0, dtype=np.float64):
        self.input_width = int(input_width)
        self.skip_at = skip_at
        self.dtype = np.dtype(dtype)
        self.layers = []
        width = self.input_width
        for i, (n_out, act) in enumerate(hidden):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            n_in = width + (self.input_width if i == skip_at else 0)
            self.layers.append(LayerSpec(n_in, n_out, act))
            width = n_out
        self.head_specs = {}
        for name, n_out, act in heads:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            self.head_specs[name] = LayerSpec(width, n_out, act)
        self.last_width = width

        specs = self.layers + list(self.head_specs.values())
        self.param_count = sum((s.n_in + 1) * s.n_out for s in specs)
        self.params = np.zeros(self.param_count, dtype=self.dtype)
        self._views = self._make_views(self.params)
        self.reset_parameters(seed)

    def _make_views(self, flat):
        views, off = [], 0
        for s in self.layers + list(self.head_specs.values()):
            W = flat[off : off + s.n_in * s.n_out].reshape(s.n_in, s.n_out)
            off += s.n_in * s.n_out
            b = flat[off : off + s.n_out]
            off += s.n_out
            views.append((W, b))
        return views

    def reset_parameters(self, seed):
        rng = np.random.default_rng(seed)
        for s, (W, b) in zip(self.layers + list(self.head_specs.values()), self._views):
            bound = 1.0 / np.sqrt(s.n_in)
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            b[...] = 0.0

    def set_params(self, flat):
        self.params[...] = flat

    def layer_params(self, i):
        return self._views[i]

    def head_params(self, name):
        return self._views[len(self.layers) + list(self.head_specs).index(name)]

    def signature(self):
        return (
            self.input_width,
            self.skip_at,
            tuple((s.n_in, s.n_out, s.activation) for s in self.layers),
            tuple((k, s.n_out, s.activation) for k, s in self.head_specs.items()),
        )

    @property
    def head_names(self):
        return list(self.head_specs)


def net_forward(net, x):
    """Evaluate ``net`` on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=net.dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != net.input_width:
        raise WidthMismatchError(f"expected input width {net.input_width}, got {x.shape[-1]}")
    cache = ForwardCache(net.signature(), net_input=x, squeeze=squeeze)
    h = x
    for i, spec in enumerate(net.layers):
        if i == net.skip_at:
            h = np.concatenate([h, x], axis=1)
        W, b = net.layer_params(i)
        z = h @ W + b
        cache.inputs.append(h)
        cache.preacts.append(z)
        h = _apply(spec.activation, z)
    cache.last_hidden = h
    outputs = {}
    for name, spec in net.head_specs.items():
        W, b = net.head_params(name)
        y = _apply(spec.activation, h @ W + b)
        cache.head_outputs[name] = y
        outputs[name] = y[0] if squeeze else y
    return outputs, cache


def _act_backward(act, dy, z, y=None):
    if act == "relu":
        return dy * (z > 0)
    if act == "sigmoid":
        return dy * y * (1.0 - y)
    return dy


def net_backward(net, cache, d_outputs):
    """Backpropagate head gradients; returns ``(dparams, dinput)``.

    Heads missing from ``d_outputs`` contribute no gradient.
    """
    if cache.signature != net.signature() or len(cache.preacts) != len(net.layers):
        raise CacheMismatchError("forward cache was produced by a different network")
    grad = np.zeros(net.param_count, dtype=net.dtype)
    gviews = net._make_views(grad)
    n_layers = len(net.layers)

    h = cache.last_hidden
    dh = np.zeros_like(h)
    for k, (name, spec) in enumerate(net.head_specs.items()):
        if name not in d_outputs or d_outputs[name] is None:
            continue
        dy = np.asarray(d_outputs[name], dtype=net.dtype)
        if cache.squeeze:
            dy = dy[None, :]
        y = cache.head_outputs[name]
        # relu(z) > 0 exactly where z > 0, so the head output doubles as the mask
        dz = _act_backward(spec.activation, dy, y, y)
        W, _ = net.head_params(name)
        gW, gb = gviews[n_layers + k]
        np.matmul(h.T, dz, out=gW)
        gb[...] = dz.sum(axis=0)
        dh += dz @ W.T

    dx = np.zeros_like(cache.net_input)
    for i in range(n_layers - 1, -1, -1):
        spec = net.layers[i]
        z = cache.preacts[i]
        y = _apply("sigmoid", z) if spec.activation == "sigmoid" else None
        dz = _act_backward(spec.activation, dh, z, y)
        W, _ = net.layer_params(i)
        gW, gb = gviews[i]
        np.matmul(cache.inputs[i].T, dz, out=gW)
        gb[...] = dz.sum(axis=0)
        dh = dz @ W.T
        if i == net.skip_at:
            dx += dh[:, -net.input_width :]
            dh = dh[:, : -net.input_width]
    dx += dh
    if cache.squeeze:
        dx = dx[0]
    return grad, dx


def build_deformation_net(expr_dim, seed=0, dtype=np.float64, width=256, depth=8, skip_at=3):
    """Offsets ``dx`` (3), ``dq`` (4) and ``ds`` (3) from ``[PE(x), e]``."""
    if expr_dim < 1:
        raise ValueError("expr_dim must be >= 1")
    hidden = [(width, "relu")] * depth
    heads = [("dx", 3, "linear"), ("dq", 4, "linear"), ("ds", 3, "linear")]
    return DenseNet(PE_WIDTH + expr_dim, hidden, heads, skip_at=skip_at, seed=seed, dtype=dtype)


def build_opacity_net(feature_dim, latent_dim=32, seed=0, dtype=np.float64, width=64):
    hidden = [(width, "relu")] * 3
    heads = [("alpha", 1, "sigmoid"), ("z", latent_dim, "linear")]
    return DenseNet(feature_dim, hidden, heads, seed=seed, dtype=dtype)


def build_color_net(latent_dim=32, sh_coeff_count=SH_BASIS_COUNT * 3, seed=0, dtype=np.float64, width=64):
    hidden = [(width, "relu")] * 2
    heads = [("sh", sh_coeff_count, "linear")]
    return DenseNet(latent_dim + 3, hidden, heads, seed=seed, dtype=dtype)
