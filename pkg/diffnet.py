"""Small differentiable-function core on numpy float64 arrays.

Loss graphs are built from a closed set of primitives (see ``PRIMITIVES``).
Each primitive records its parents and an analytic backward rule; ``backward``
walks the graph in reverse topological order and accumulates gradients per
named parameter.
"""
import hashlib
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigurationError, ConstructionError, DomainError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
HALF_LOG_2PI_E = 0.5 * math.log(2.0 * math.pi * math.e)

STD_MIN = 1e-3
STD_MAX = 10.0
LOG_STD_MIN = math.log(STD_MIN)
LOG_STD_MAX = math.log(STD_MAX)
INIT_STD = 0.5

ACTIVATIONS = ("tanh", "relu", "identity")

PRIMITIVES = frozenset({
    "param", "const",
    "matmul", "add", "sub", "mul", "neg", "scale",
    "tanh", "relu", "exp", "square",
    "sum", "mean", "clip", "minimum", "columns",
    "gaussian_logprob", "gaussian_entropy",
})


# ---------------------------------------------------------------- parameters

class ParamSet:
    """Ordered mapping from parameter name to a float64 tensor"""

    def __init__(self, entries=None):
        self._entries = OrderedDict()
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._entries:
            raise ConfigurationError(f"Duplicate parameter name: {name}")
        if name == "meta":
            raise ConfigurationError("'meta' is reserved for checkpoint metadata")
        array = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise DomainError(f"Parameter {name} has non-finite values")
        self._entries[name] = array

    def set(self, name, value):
        """Overwrite values in place; the shape must not change"""
        value = np.asarray(value, dtype=np.float64)
        current = self._entries[name]
        if value.shape != current.shape:
            raise ConfigurationError(f"Shape of {name} is {current.shape}, got {value.shape}")
        current[...] = value

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def copy(self):
        return ParamSet({name: value.copy() for name, value in self._entries.items()})

    def subset(self, prefix):
        """Copy of the entries whose names start with ``prefix``"""
        return ParamSet({n: v.copy() for n, v in self._entries.items() if n.startswith(prefix)})

    def merge(self, other):
        """Add every entry of ``other`` (names must not clash)"""
        for name, value in other.items():
            self.add(name, value)
        return self

    def zeros_like(self):
        return ParamSet({name: np.zeros_like(value) for name, value in self._entries.items()})

    def clamp(self, name, low, high):
        np.clip(self._entries[name], low, high, out=self._entries[name])

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self._entries.values())

    def num_values(self):
        return int(sum(v.size for v in self._entries.values()))

    def to_dict(self, meta=None):
        doc = {"meta": dict(meta or {})}
        for name, value in self._entries.items():
            doc[name] = {"shape": list(value.shape), "data": value.ravel().tolist()}
        return doc

    @classmethod
    def from_dict(cls, doc):
        params = cls()
        for name, entry in doc.items():
            if name == "meta":
                continue
            shape = tuple(int(s) for s in entry["shape"])
            params.add(name, np.array(entry["data"], dtype=np.float64).reshape(shape))
        return params, dict(doc.get("meta", {}))

    def digest(self):
        """SHA-256 of the canonical checkpoint encoding (no metadata)"""
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def checkpoint_bytes(params, meta=None):
    """Canonical JSON encoding: sorted keys, shortest round-trip floats"""
    text = json.dumps(params.to_dict(meta), sort_keys=True, indent=2, allow_nan=False,
                      ensure_ascii=False)
    return (text + "\n").encode("utf-8")


def save_checkpoint(path, params, meta=None):
    data = checkpoint_bytes(params, meta)
    with open(path, "wb") as f:
        f.write(data)
    logger.info(f"Checkpoint saved to: {path} ({params.num_values()} values)")
    return path


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return ParamSet.from_dict(doc)


def spec_hash(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# ----------------------------------------------------------- distributions

@dataclass
class DiagGaussian:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        _check_std(self.std)
        if self.mean.shape[-1:] != self.std.shape[-1:]:
            raise ConfigurationError(f"mean dim {self.mean.shape} does not match std dim {self.std.shape}")

    @property
    def dim(self):
        return self.mean.shape[-1]

    def sample(self, rng):
        return self.mean + self.std * rng.standard_normal(np.broadcast(self.mean, self.std).shape)


def _check_std(std):
    if np.any(~(std > 0)):
        raise DomainError("Gaussian std must be strictly positive")


def diag_gaussian_logprob(mean, log_std, x):
    """Row-wise log density; last axis is the event axis"""
    std = np.exp(log_std)
    u = (x - mean) / std
    return np.sum(-0.5 * LOG_2PI - log_std - 0.5 * u * u, axis=-1)


def diag_gaussian_entropy(log_std):
    return np.sum(HALF_LOG_2PI_E + log_std, axis=-1)


def gaussian_logprob(dist, x):
    """log N(x; mean, diag(std^2)) summed over dimensions"""
    x = np.asarray(x, dtype=np.float64)
    _check_std(dist.std)
    if x.shape[-1] != dist.dim:
        raise ConfigurationError(f"Expected a {dist.dim}-dim point, got {x.shape[-1]}")
    return diag_gaussian_logprob(dist.mean, np.log(dist.std), x)


def gaussian_entropy(dist):
    _check_std(dist.std)
    return diag_gaussian_entropy(np.log(dist.std))


# ----------------------------------------------------------------- graph

class Node:
    """One value in a loss graph"""

    __slots__ = ("value", "op", "parents", "backward_fn", "param_name")

    def __init__(self, value, op, parents=(), backward_fn=None, param_name=None):
        if op not in PRIMITIVES:
            raise ConstructionError(f"Unsupported primitive: {op}")
        for parent in parents:
            if not isinstance(parent, Node):
                raise ConstructionError(f"{op} got a non-node input of type {type(parent).__name__}")
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"<Node {self.op} shape={self.value.shape}>"


def _as_node(x):
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float, np.ndarray, np.floating, np.integer, list, tuple)):
        return const(x)
    raise ConstructionError(f"Cannot use {type(x).__name__} in a loss graph")


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def param(params, name):
    if name not in params:
        raise ConfigurationError(f"Missing parameter: {name}")
    return Node(params[name], "param", param_name=name)


def const(value):
    return Node(np.asarray(value, dtype=np.float64), "const")


def matmul(x, w):
    x, w = _as_node(x), _as_node(w)
    if w.value.ndim != 2 or x.value.shape[-1] != w.value.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {x.value.shape} @ {w.value.shape}")
    xv, wv = x.value, w.value

    def backward(g):
        if xv.ndim == 1:
            return g @ wv.T, np.outer(xv, g)
        return g @ wv.T, xv.T @ g
    return Node(xv @ wv, "matmul", (x, w), backward)


def add(a, b):
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value + b.value, "add", (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value - b.value, "sub", (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    return Node(av * bv, "mul", (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a):
    a = _as_node(a)
    return Node(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a, factor):
    a = _as_node(a)
    factor = float(factor)
    return Node(a.value * factor, "scale", (a,), lambda g: (g * factor,))


def tanh(a):
    a = _as_node(a)
    y = np.tanh(a.value)
    return Node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    a = _as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def exp(a):
    a = _as_node(a)
    y = np.exp(a.value)
    return Node(y, "exp", (a,), lambda g: (g * y,))


def square(a):
    a = _as_node(a)
    av = a.value
    return Node(av * av, "square", (a,), lambda g: (2.0 * g * av,))


def reduce_sum(a, axis=None):
    a = _as_node(a)
    shape = a.value.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return Node(np.sum(a.value, axis=axis), "sum", (a,), backward)


def reduce_mean(a, axis=None):
    a = _as_node(a)
    shape = a.value.shape
    count = a.value.size if axis is None else shape[axis]

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)
    return Node(np.mean(a.value, axis=axis), "mean", (a,), backward)


def clip(a, low, high):
    a = _as_node(a)
    mask = (a.value > low) & (a.value < high)
    return Node(np.clip(a.value, low, high), "clip", (a,), lambda g: (g * mask,))


def minimum(a, b):
    a, b = _as_node(a), _as_node(b)
    take_a = a.value <= b.value
    sa, sb = a.value.shape, b.value.shape
    return Node(np.minimum(a.value, b.value), "minimum", (a, b),
                lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)))


def columns(a, start, stop):
    """Slice of the last axis"""
    a = _as_node(a)
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)
    return Node(a.value[..., start:stop], "columns", (a,), backward)


def gaussian_logprob_node(mean_, log_std, x):
    """Diagonal-Gaussian log density, summed over the last axis"""
    mean_, log_std, x = _as_node(mean_), _as_node(log_std), _as_node(x)
    mv, lv, xv = mean_.value, log_std.value, x.value
    std = np.exp(lv)
    u = (xv - mv) / std
    value = diag_gaussian_logprob(mv, lv, xv)

    def backward(g):
        g = np.expand_dims(g, -1)
        return (_unbroadcast(g * u / std, mv.shape),
                _unbroadcast(g * (u * u - 1.0), lv.shape),
                _unbroadcast(-g * u / std, xv.shape))
    return Node(value, "gaussian_logprob", (mean_, log_std, x), backward)


def gaussian_entropy_node(log_std):
    log_std = _as_node(log_std)
    shape = log_std.value.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, -1), shape).copy(),)
    return Node(diag_gaussian_entropy(log_std.value), "gaussian_entropy", (log_std,), backward)


def clamp_log_std(log_std):
    """Keep exp(log_std) within [STD_MIN, STD_MAX]"""
    return clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Gradients of a scalar loss for every parameter it touches"""
    if not isinstance(loss, Node):
        raise ConstructionError(f"Loss must be a graph node, got {type(loss).__name__}")
    if loss.value.size != 1:
        raise ConstructionError(f"Loss must be scalar, got shape {loss.value.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    param_grads = OrderedDict()
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "param":
            if node.param_name in param_grads:
                param_grads[node.param_name] = param_grads[node.param_name] + g
            else:
                param_grads[node.param_name] = np.array(g, dtype=np.float64).reshape(node.value.shape)
            continue
        if node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
            if parent.op == "const":
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
    return param_grads


def value_and_grad(loss_fn, params):
    """Evaluate ``loss_fn(params)`` and its gradient for every entry of params"""
    loss = loss_fn(params)
    touched = backward(loss)
    grads = params.zeros_like()
    for name, g in touched.items():
        grads.set(name, g)
    return float(loss.value), grads


def grad(loss_fn, params):
    return value_and_grad(loss_fn, params)[1]


def global_norm(grads):
    values = grads.values() if isinstance(grads, dict) else (v for _, v in grads.items())
    return math.sqrt(np.sum([np.sum(g * g) for g in values]))


@dataclass
class FiniteDiffReport:
    max_rel_error: dict = field(default_factory=dict)
    passed: bool = True
    tol: float = 1e-4


def finite_diff_check(loss_fn, params, h=1e-5, tol=1e-4):
    """Compare analytic gradients with central differences, element by element.

    The error is relative, |g - g_fd| / max(|g|, |g_fd|). Derivatives too small
    for central differences to resolve at ``tol`` (both below
    10·eps·max(1, |f|) / (h·tol)) count as agreeing zeros.
    """
    if h <= 0 or tol <= 0:
        raise ConfigurationError("finite_diff_check needs h > 0 and tol > 0")
    analytic = grad(loss_fn, params)
    shifted = params.copy()
    eps = np.finfo(float).eps
    report = FiniteDiffReport(tol=tol)
    for name, value in shifted.items():
        flat = value.reshape(-1)
        errors = np.zeros(flat.size)
        g_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = float(loss_fn(shifted).value)
            flat[i] = saved - h
            f_minus = float(loss_fn(shifted).value)
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            magnitude = max(abs(g_flat[i]), abs(numeric))
            zero_level = 10.0 * eps * max(1.0, abs(f_plus), abs(f_minus)) / (h * tol)
            if magnitude > zero_level:
                errors[i] = abs(g_flat[i] - numeric) / magnitude
        report.max_rel_error[name] = float(errors.max()) if errors.size else 0.0
    report.passed = all(err <= tol for err in report.max_rel_error.values())
    if not report.passed:
        worst = max(report.max_rel_error, key=report.max_rel_error.get)
        logger.warning(f"Gradient check failed: {worst} rel. error {report.max_rel_error[worst]:.3e}")
    return report


# ---------------------------------------------------------------------- MLPs

@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigurationError("An MLP needs an input width and at least one layer")
        if any(w < 1 for w in widths):
            raise ConfigurationError(f"Layer widths must be >= 1, got {widths}")
        for act in (self.activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"Unknown activation: {act}")

    @property
    def in_dim(self):
        return self.layer_widths[0]

    @property
    def out_dim(self):
        return self.layer_widths[-1]

    @property
    def num_layers(self):
        return len(self.layer_widths) - 1

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths), "activation": self.activation,
                "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["layer_widths"]), doc.get("activation", "tanh"),
                   doc.get("output_activation", "identity"))


def mlp_param_names(prefix, layer):
    return f"{prefix}.w{layer}", f"{prefix}.b{layer}"


def init_mlp(params, spec, prefix, rng):
    """Glorot-uniform weights, zero biases"""
    for layer in range(spec.num_layers):
        fan_in, fan_out = spec.layer_widths[layer], spec.layer_widths[layer + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w_name, b_name = mlp_param_names(prefix, layer)
        params.add(w_name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.add(b_name, np.zeros(fan_out))
    return params


def _activate(x, activation):
    if activation == "tanh":
        return np.tanh(x)
    if activation == "relu":
        return np.where(x > 0, x, 0.0)
    return x


def _activate_node(x, activation):
    if activation == "tanh":
        return tanh(x)
    if activation == "relu":
        return relu(x)
    return x


def _check_mlp_input(params, spec, prefix, width):
    if width != spec.in_dim:
        raise ConfigurationError(f"{prefix}: input dim {width} does not match first layer {spec.in_dim}")
    for layer in range(spec.num_layers):
        for name in mlp_param_names(prefix, layer):
            if name not in params:
                raise ConfigurationError(f"{prefix}: missing parameter {name}")


def mlp_forward(params, spec, x, prefix="mlp"):
    """Numeric forward pass; works on a vector or a batch of rows"""
    h = np.asarray(x, dtype=np.float64)
    _check_mlp_input(params, spec, prefix, h.shape[-1])
    for layer in range(spec.num_layers):
        w_name, b_name = mlp_param_names(prefix, layer)
        h = h @ params[w_name] + params[b_name]
        last = layer == spec.num_layers - 1
        h = _activate(h, spec.output_activation if last else spec.activation)
    return h


def mlp_node(params, spec, x, prefix="mlp"):
    """Graph version of ``mlp_forward``; same operations in the same order"""
    h = _as_node(x)
    _check_mlp_input(params, spec, prefix, h.value.shape[-1])
    for layer in range(spec.num_layers):
        w_name, b_name = mlp_param_names(prefix, layer)
        h = add(matmul(h, param(params, w_name)), param(params, b_name))
        last = layer == spec.num_layers - 1
        h = _activate_node(h, spec.output_activation if last else spec.activation)
    return h


# ----------------------------------------------------------------- optimizer

class Adam:
    """Adam with per-tensor step counters.

    Only the tensors present in ``grads`` move, so a parameter group that did
    not take part in a loss keeps its values.
    """

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, params, grads, max_grad_norm=None, lr=None):
        """Apply one update in place and return the pre-clip gradient norm"""
        lr = self.lr if lr is None else lr
        grads = dict(grads.items())
        norm = global_norm(grads)
        if not math.isfinite(norm):
            raise DomainError("Non-finite gradient")
        factor = 1.0
        if max_grad_norm is not None and norm > max_grad_norm:
            factor = max_grad_norm / (norm + 1e-12)
        for name, g in grads.items():
            g = g * factor
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            t = self.t.get(name, 0) + 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            params[name][...] = params[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.m[name], self.v[name], self.t[name] = m, v, t
        return norm

    def state(self):
        return ({k: v.copy() for k, v in self.m.items()},
                {k: v.copy() for k, v in self.v.items()},
                dict(self.t))

    def restore(self, state):
        m, v, t = state
        self.m = {k: a.copy() for k, a in m.items()}
        self.v = {k: a.copy() for k, a in v.items()}
        self.t = dict(t)
