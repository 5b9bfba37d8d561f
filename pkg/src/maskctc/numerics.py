"""Tensor substrate: float64 ops with reverse-mode gradients and a seeded RNG.

Storage and the gradient tape come from torch; this module fixes the dtype,
adds the stability guards the rest of the package relies on, and exposes the
small set of primitives the model is written against.
"""
import math

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
# Stand-in for log(0) inside dynamic programs; exp() of it underflows to an
# exact zero and its gradient stays finite, unlike -inf.
NEG_INF = -1e30


class ShapeError(ValueError):
    pass


def tensor(data, requires_grad=False):
    return torch.as_tensor(np.asarray(data, dtype=np.float64)).clone().requires_grad_(requires_grad)


def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def logsumexp(x, dim=-1, keepdim=False):
    """Max-shifted log-sum-exp. Rows that are entirely ``NEG_INF`` stay near ``NEG_INF``."""
    m = x.max(dim=dim, keepdim=True).values.detach()
    out = m + torch.log(torch.exp(x - m).sum(dim=dim, keepdim=True))
    return out if keepdim else out.squeeze(dim)


def log_softmax(x, dim=-1):
    if not torch.isfinite(x).all():
        raise FloatingPointError("log_softmax: non-finite input")
    return x - logsumexp(x, dim=dim, keepdim=True)


def sigmoid(x):
    return torch.sigmoid(x)


def swish(x):
    return x * torch.sigmoid(x)


def glu(x, dim=-1):
    a, b = x.chunk(2, dim=dim)
    return a * torch.sigmoid(b)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    var, mu = torch.var_mean(x, dim=-1, unbiased=False, keepdim=True)
    y = (x - mu) * torch.rsqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[-1]}")
    return torch.nn.functional.linear(x, weight, bias)


def depthwise_conv1d(x, weight, bias=None):
    """Same-padded per-channel convolution over time.

    x: (B, T, C); weight: (C, K) with odd K.
    """
    channels, k = weight.shape
    if x.shape[-1] != channels:
        raise ShapeError("depthwise_conv1d: channel mismatch")
    if k % 2 != 1:
        raise ShapeError("depthwise_conv1d: kernel size must be odd")
    y = F.conv1d(x.transpose(1, 2), weight.unsqueeze(1), bias, padding=k // 2, groups=channels)
    return y.transpose(1, 2)


def embedding(ids, table):
    return table[torch.as_tensor(ids, dtype=torch.long)]


def gather(x, index, dim=-1):
    return torch.gather(x, dim, torch.as_tensor(index, dtype=torch.long))


def scatter_add(x, index, src, dim=-1):
    return x.scatter_add(dim, torch.as_tensor(index, dtype=torch.long), src)


def dropout(x, p, training, generator=None):
    """Inverted dropout; identity unless ``training``. Masks drawn from ``generator``."""
    if not training or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def cross_entropy(log_probs, targets, weights=None):
    """Summed negative log-likelihood of ``targets`` under row log-probabilities."""
    picked = gather(log_probs, torch.as_tensor(targets, dtype=torch.long).unsqueeze(-1)).squeeze(-1)
    if weights is not None:
        picked = picked * weights
    return -picked.sum()


def backward(loss):
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def sinusoidal_positions(length, dim):
    pos = torch.arange(length, dtype=DTYPE).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=DTYPE) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe


class Rng:
    """Seeded random source; identical seeds give identical streams on any platform.

    Wraps numpy's PCG64 for host-side sampling and hands out derived torch
    generators for parameter init and dropout.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._np = np.random.Generator(np.random.PCG64(self.seed))

    def integers(self, low, high=None, size=None):
        return self._np.integers(low, high, size=size)

    def choice(self, n, size, replace=False):
        return self._np.choice(n, size=size, replace=replace)

    def normal(self, size=None, scale=1.0):
        return self._np.normal(0.0, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._np.uniform(low, high, size=size)

    def permutation(self, n):
        return self._np.permutation(n)

    def spawn(self, *keys):
        """Independent child stream determined by this seed and ``keys``."""
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))

    def torch_generator(self):
        g = torch.Generator()
        g.manual_seed(int(self._np.integers(0, 2**62)))
        return g
