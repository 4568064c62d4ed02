"""Parameter containers and the Adam optimizer."""

import math

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Holds parameters as Tensor attributes; children are Modules or lists of them."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


def init_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def init_zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv(Module):
    """Plain k x k convolution with bias, 'same' padding."""

    def __init__(self, rng, cin, cout, k=3, dtype=np.float32, zero=False):
        self.k = k
        if zero:
            self.weight = init_zeros((k, k, cin, cout), dtype)
        else:
            self.weight = init_uniform(rng, (k, k, cin, cout), k * k * cin, dtype)
        self.bias = init_zeros((cout,), dtype)

    def __call__(self, x):
        return ops.conv2d(x, self.weight, pad=self.k // 2, bias=self.bias)


class Linear(Module):
    def __init__(self, rng, cin, cout, dtype=np.float32, zero=False):
        if zero:
            self.weight = init_zeros((cin, cout), dtype)
        else:
            self.weight = init_uniform(rng, (cin, cout), cin, dtype)
        self.bias = init_zeros((cout,), dtype)

    def __call__(self, x):
        return ops.matmul(x, self.weight) + self.bias


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        return self.m, self.v


def cosine_lr(iteration, total, lr0, lr_min):
    """Cosine annealing from lr0 at iteration 0 to lr_min at iteration total-1."""
    if total <= 1:
        return lr_min
    frac = min(max(iteration / (total - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * frac))
