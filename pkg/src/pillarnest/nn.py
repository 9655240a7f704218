"""Parameter containers built on the tensor engine."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) truncated to +-2 std by redrawing."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    """Attribute-registered tree of parameters and sub-modules.

    Parameter names are the dotted attribute path from the root, e.g.
    ``stages.0.blocks.1.dwconv.weight``.
    """

    def __init__(self):
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, (Parameter, Module)):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix=""):
        for key, child in self._children.items():
            name = f"{prefix}{key}"
            if isinstance(child, Parameter):
                yield name, child
            else:
                yield from child.named_parameters(name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(arr.shape)} vs {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype, copy=True)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        key = str(len(self._items))
        self._children[key] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = Parameter(np.zeros((out_ch, in_ch // groups, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def flops(self, h_out, w_out):
        """Multiply-accumulates for one image of the given output size."""
        co, cg, kh, kw = self.weight.shape
        return h_out * w_out * co * cg * kh * kw


class LayerNorm2d(Module):
    """Channels-first layer norm over NCHW input."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return T.layer_norm_cf(x, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Linear(Module):
    """Weight stored (in, out)."""

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.weight = Parameter(np.zeros((in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


def init_parameters(module, rng, std=0.02, overrides=None):
    """Truncated-normal weights, zero biases, unit norm scales.

    ``overrides`` maps a name suffix to a constant fill, e.g. ``{"gamma": 1e-6}``.
    Parameters are visited in registration order so the draw sequence is a
    pure function of the module tree and ``rng``.
    """
    overrides = overrides or {}
    for name, p in module.named_parameters():
        fill = next((v for k, v in overrides.items() if name.endswith(k)), None)
        if fill is not None:
            p.data = np.full(p.shape, fill, dtype=p.data.dtype)
        elif _is_norm(name, module):
            p.data = np.ones(p.shape, p.data.dtype) if name.endswith("weight") else np.zeros(p.shape, p.data.dtype)
        elif name.endswith("bias"):
            p.data = np.zeros(p.shape, dtype=p.data.dtype)
        else:
            p.data = trunc_normal(rng, p.shape, std, p.data.dtype)


def _is_norm(name, root):
    obj = root
    for part in name.split(".")[:-1]:
        obj = obj._children[part]
    return isinstance(obj, (LayerNorm2d, LayerNorm))
