"""Layer objects: parameter containers around the functional sparse ops."""
import zlib

import numpy as np

from .autograd import Parameter, Tensor, accumulate, make_result, relu
from .conv import ConvLayerSpec, sparse_conv

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def param_rng(seed, name):
    """Per-parameter generator, independent of construction order."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Module:
    """Minimal container: named parameters, buffers, children, train/eval flag."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for n, p in self._params.items():
            yield prefix + n, p
        for cn, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cn}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for n, b in self._buffers.items():
            yield prefix + n, b
        for cn, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{cn}.")

    def state_arrays(self):
        """Ordered ``name -> ndarray`` of every parameter and buffer."""
        out = {n: p.data for n, p in self.named_parameters()}
        out.update({n: b.data for n, b in self.named_buffers()})
        return out

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self.eval()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def to_dtype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, b in self.named_buffers():
            b.data = b.data.astype(dtype)
        return self


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization over rows of ``x`` (active voxels only).

    With ``running_mean=None`` the batch statistics are used in both modes.
    """
    xd = x.data
    n = xd.shape[0]
    dtype = xd.dtype
    tracking = running_mean is not None
    if n > 0 and (training or not tracking):
        mean = xd.mean(axis=0)
        var = xd.var(axis=0)
        if training and tracking:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running_mean.data = ((1 - momentum) * running_mean.data + momentum * mean).astype(
                running_mean.data.dtype)
            running_var.data = ((1 - momentum) * running_var.data + momentum * unbiased).astype(
                running_var.data.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean) * inv
        out = (xhat * gamma.data + beta.data).astype(dtype, copy=False)

        def backward(g):
            accumulate(gamma, (g * xhat).sum(axis=0))
            accumulate(beta, g.sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.data
                gx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
                accumulate(x, gx.astype(dtype, copy=False))
    elif not tracking:
        out = xd.copy()

        def backward(g):
            pass
    else:
        inv = (1.0 / np.sqrt(running_var.data + eps)).astype(dtype)
        xhat = (xd - running_mean.data.astype(dtype)) * inv
        out = (xhat * gamma.data + beta.data).astype(dtype, copy=False)

        def backward(g):
            accumulate(gamma, (g * xhat).sum(axis=0))
            accumulate(beta, g.sum(axis=0))
            accumulate(x, (g * (gamma.data * inv)).astype(dtype, copy=False))

    return make_result(out, (x, gamma, beta), backward)


class BatchNorm(Module):
    """Batch norm over active voxels.

    ``track_running_stats=False`` normalizes with the current input's
    statistics at inference too, and keeps no buffers.
    """

    def __init__(self, channels, name, track_running_stats=True):
        super().__init__()
        self.weight = Parameter(np.ones(channels, np.float32), f"{name}.weight")
        self.bias = Parameter(np.zeros(channels, np.float32), f"{name}.bias")
        self.running_mean = self.running_var = None
        if track_running_stats:
            self.register_buffer("running_mean", Tensor(np.zeros(channels, np.float32)))
            self.register_buffer("running_var", Tensor(np.ones(channels, np.float32)))
        self.momentum = BN_MOMENTUM

    def __call__(self, x):
        feats = batch_norm(x.feats, self.weight, self.bias, self.running_mean,
                           self.running_var, self.training, self.momentum)
        return x.with_feats(feats)


class SparseConv(Module):
    """One sparse convolution; Kaiming-uniform (fan-in) init from ``seed``."""

    def __init__(self, spec, name, seed, bias=False):
        super().__init__()
        self.spec = spec
        self.name = name
        shape = tuple(spec.kernel) + (spec.c_in, spec.c_out)
        fan_in = spec.volume * spec.c_in
        bound = np.sqrt(6.0 / fan_in)
        w = param_rng(seed, name + ".weight").uniform(-bound, bound, size=shape)
        self.weight = Parameter(w.astype(np.float32), f"{name}.weight")
        self.bias = Parameter(np.zeros(spec.c_out, np.float32), f"{name}.bias") if bias else None

    def __call__(self, x, fine_shape=None):
        return sparse_conv(x, self.weight, self.bias, self.spec, fine_shape)


class ConvBNReLU(Module):
    """Bias-free sparse convolution followed by batch norm and ReLU."""

    def __init__(self, spec, name, seed, track_running_stats=True):
        super().__init__()
        self.conv = SparseConv(spec, f"{name}.conv", seed)
        self.bn = BatchNorm(spec.c_out, f"{name}.bn", track_running_stats)
        self.spec = spec

    def __call__(self, x, fine_shape=None):
        y = self.bn(self.conv(x, fine_shape))
        return y.with_feats(relu(y.feats))


def subm(c_in, c_out, kernel=3):
    return ConvLayerSpec(c_in, c_out, kernel, kind="submanifold")
