"""Parameters, a minimal module tree, and the layer wrappers the model uses."""
import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor.  Its name comes from its position in a Module tree."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Attribute-walking container; child order is attribute assignment order."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


def count_parameters(model, by_module=False):
    """Exact parameter element count; optionally broken down by top-level child."""
    params = list(model.named_parameters())
    total = sum(p.size for _, p in params)
    if not by_module:
        return total
    parts = {}
    for name, p in params:
        head = name.split(".", 1)[0]
        parts[head] = parts.get(head, 0) + p.size
    return total, parts


def xavier_uniform(rng, fan_out, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def kaiming_uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True, dtype=np.float64):
        self.weight = Parameter(xavier_uniform(rng, cout, cin, (cout, cin), dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width, dtype=np.float64, eps=1e-5):
        self.gamma = Parameter(np.ones(width, dtype=dtype))
        self.beta = Parameter(np.zeros(width, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, dtype=np.float64):
        self.weight = Parameter(kaiming_uniform(rng, cin * k * k, (cout, cin, k, k), dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))
        self.padding = (k - 1) // 2

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.padding)


class InstanceNorm(Module):
    def __init__(self, channels, dtype=np.float64, eps=1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return T.instance_norm(x, self.gamma, self.beta, self.eps)
