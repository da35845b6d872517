"""Parameter containers built on the tensor core."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, linear, parameter, xavier_uniform


class Module:
    """Anything that owns parameters, directly or through child modules.

    Parameter names are dotted attribute paths with ``/`` between nesting
    levels, e.g. ``backbone/stage3/conv1/weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + "/")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}/{i}/")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}/{k}/")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name in state:
                value = np.asarray(state[name], dtype=np.float64)
                if value.shape != p.shape:
                    raise ValueError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
                p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, pad: int | None = None):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        fan_in, fan_out = c_in * k * k, c_out * k * k
        self.weight = parameter(xavier_uniform((c_out, c_in, k, k), fan_in, fan_out, rng))
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def set_identity(self) -> None:
        """Make a channel-preserving conv the identity map (for fixtures)."""
        c_out, c_in, k, _ = self.weight.shape
        w = np.zeros(self.weight.shape)
        for c in range(min(c_out, c_in)):
            w[c, c, k // 2, k // 2] = 1.0
        self.weight.data = w
        self.bias.data = np.zeros(c_out)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = parameter(xavier_uniform((n_out, n_in), n_in, n_out, rng))
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
