"""Parameter containers and the layers GMViT is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..autodiff import Tensor, concat
from ..autodiff import functional as F


class Module:
    """Registers Tensor attributes as parameters and Module attributes as
    children, keeping assignment order so parameter names are stable. Running
    statistics go through ``register_buffer``."""

    training: bool = True

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
            value.name = value.name or name
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.named_parameters()}
        out.update({n: b for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            if n not in state:
                raise KeyError(f"missing parameter {n}")
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype)
        for n, b in self.named_buffers():
            if n not in state:
                raise KeyError(f"missing buffer {n}")
            b[...] = state[n]


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    """y = x W + b with W stored (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64,
                 bias: bool = True, init: str = "uniform"):
        super().__init__()
        if init == "xavier":
            bound = math.sqrt(6.0 / (d_in + d_out))
        else:
            bound = 1.0 / math.sqrt(d_in)
        self.weight = _param(rng.uniform(-bound, bound, (d_in, d_out)), dtype)
        if bias:
            b = np.zeros(d_out) if init == "xavier" else rng.uniform(-bound, bound, d_out)
            self.bias = _param(b, dtype)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        super().__init__()
        self.gain = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.1):
        super().__init__()
        self.gain = _param(np.ones(channels), dtype)
        self.bias = _param(np.zeros(channels), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.momentum = momentum

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gain, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, padding: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = _param(rng.normal(0.0, std, (c_out, c_in, k, k)), dtype)
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, None, self.stride, self.padding)


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, k, stride, padding, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, stride, padding, rng, dtype)
        self.bn = BatchNorm(c_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


class Backbone(Module):
    """Plain (residual-free) CNN: 7x7/2 conv, 3x3/2 max-pool, three 3x3/2 convs,
    global average pooling, then a linear map to the feature width.

    ``double`` inserts a stride-1 3x3 conv after each stage (teacher stand-in)."""

    def __init__(self, in_channels: int, widths: tuple[int, ...], out_dim: int,
                 rng: np.random.Generator, dtype=np.float64, double: bool = False):
        super().__init__()
        w0, rest = widths[0], widths[1:]
        self.stem = ConvBNReLU(in_channels, w0, 7, 2, 3, rng, dtype)
        self.stage_names: list[tuple[str, ...]] = []
        names = []
        if double:
            self.stem_extra = ConvBNReLU(w0, w0, 3, 1, 1, rng, dtype)
            names.append("stem_extra")
        self.stage_names.append(tuple(names))
        prev = w0
        for i, w in enumerate(rest, start=1):
            setattr(self, f"stage{i}", ConvBNReLU(prev, w, 3, 2, 1, rng, dtype))
            names = [f"stage{i}"]
            if double:
                setattr(self, f"stage{i}_extra", ConvBNReLU(w, w, 3, 1, 1, rng, dtype))
                names.append(f"stage{i}_extra")
            self.stage_names.append(tuple(names))
            prev = w
        self.proj = Linear(prev, out_dim, rng, dtype) if prev != out_dim else None

    def __call__(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        x = F.max_pool2d(x, 3, 2, 1)
        for names in self.stage_names:
            for n in names:
                x = getattr(self, n)(x)
        x = F.global_avg_pool2d(x)
        return self.proj(x) if self.proj is not None else x


class PosEmbed(Module):
    """Two-layer MLP 3 -> D -> D with ReLU, applied row-wise to camera positions."""

    def __init__(self, d: int, rng, dtype=np.float64):
        super().__init__()
        self.fc1 = Linear(3, d, rng, dtype)
        self.fc2 = Linear(d, d, rng, dtype)

    def __call__(self, pos: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(pos)))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng, dtype=np.float64):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype, init="xavier")
        self.k = Linear(d, d, rng, dtype, init="xavier")
        self.v = Linear(d, d, rng, dtype, init="xavier")
        self.out = Linear(d, d, rng, dtype, init="xavier")

    def _split(self, t: Tensor) -> Tensor:
        B, S, D = t.shape
        return t.reshape(B, S, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        B, S, D = x.shape
        dh = D // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, -1e30).astype(x.dtype)[:, None, None, :]
            scores = scores + bias
        attn = F.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm encoder block: x + MHA(LN(x)), then x + MLP(LN(x)) with GELU."""

    def __init__(self, d: int, heads: int, expansion: int, rng, dtype=np.float64):
        super().__init__()
        self.norm1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.fc1 = Linear(d, expansion * d, rng, dtype, init="xavier")
        self.fc2 = Linear(expansion * d, d, rng, dtype, init="xavier")

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class TransformerEncoder(Module):
    def __init__(self, d: int, layers: int, heads: int, expansion: int, rng, dtype=np.float64):
        super().__init__()
        self.depth = layers
        for i in range(layers):
            setattr(self, f"block{i}", TransformerBlock(d, heads, expansion, rng, dtype))
        self.norm = LayerNorm(d, dtype)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        for i in range(self.depth):
            x = getattr(self, f"block{i}")(x, key_mask)
        return self.norm(x)


def prepend_token(seq: Tensor, token: Tensor) -> Tensor:
    """[token; seq] along the sequence axis of a (B, S, D) batch."""
    B, _, D = seq.shape
    tok = token.reshape(1, 1, D) + np.zeros((B, 1, D), dtype=seq.dtype)
    return concat([tok, seq], axis=1)
