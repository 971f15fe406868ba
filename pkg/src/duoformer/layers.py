"""Parameter containers and basic trainable layers.

Module tracks parameters (Tensor attributes), submodules (Module
attributes), and non-trainable state (registered ndarrays, e.g. BN running
stats) by assignment order. Dotted names follow attribute paths, so
`encoder.layer0.scale.qkv.w` is the `w` of the `qkv` of the `scale` child
of `layer0` of `encoder`.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .conv import batch_norm, conv2d
from .errors import ContractError
from .rng import kaiming_uniform, trunc_normal
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "_state", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_state(self, name, arr: np.ndarray):
        """Attach a non-trainable buffer that still rides along in checkpoints."""
        self._state[name] = arr
        object.__setattr__(self, name, arr)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # ---- traversal ----------------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = ""):
        for name, arr in self._state.items():
            yield prefix + name, arr
        for cname, child in self._children.items():
            yield from child.named_state(prefix + cname + ".")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    # ---- mode / gradient management -------------------------------------------

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    # ---- (de)serialization boundary ----------------------------------------------

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, arr in self.named_state():
            out[name] = arr
        return out

    def load_state_dict(self, d: "dict[str, np.ndarray]"):
        own_params = dict(self.named_parameters())
        own_state = dict(self.named_state())
        expected = set(own_params) | set(own_state)
        got = set(d)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ContractError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for name, p in own_params.items():
            arr = d[name]
            if tuple(arr.shape) != p.shape:
                raise ContractError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
            p.grad = None
        for name, buf in own_state.items():
            arr = d[name]
            if tuple(arr.shape) != buf.shape:
                raise ContractError(f"{name}: shape {arr.shape} != expected {buf.shape}")
            buf[...] = arr.astype(buf.dtype, copy=False)
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.w = Tensor(trunc_normal(rng, (d_in, d_out), std=std, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        object.__setattr__(self, "eps", eps)

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng, stride: int = 1,
                 padding: int = 0, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.w = Tensor(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in=c_in * k * k,
                                        dtype=dtype), requires_grad=True)
        # bias=False for convs feeding BN: the batch mean would swallow it.
        if bias:
            self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        else:
            object.__setattr__(self, "b", None)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)

    def forward(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.register_state("running_mean", np.zeros(c, dtype=np.float64))
        self.register_state("running_var", np.ones(c, dtype=np.float64))
        object.__setattr__(self, "momentum", momentum)
        object.__setattr__(self, "eps", eps)

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          mode="train" if self.training else "eval",
                          momentum=self.momentum, eps=self.eps)
