"""Small parameter containers built on :mod:`sepsis_rl.numerics`."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .numerics import Param, Tensor, batch_norm, glorot_uniform, linear, relu


class Module:
    """Anything that owns named parameters.

    Subclasses list child modules / params as attributes; ``named_params``
    walks them in attribute-definition order, which fixes checkpoint layout.
    """

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, value in vars(self).items():
            if isinstance(value, Param):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_params(f"{prefix}{name}.{i}.")
            elif isinstance(value, dict) and value and isinstance(next(iter(value.values())), Module):
                for key, child in value.items():
                    yield from child.named_params(f"{prefix}{name}.{key}.")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-learnable state that must survive a checkpoint round trip."""
        out: dict[str, np.ndarray] = {}
        for name, value in vars(self).items():
            if isinstance(value, Module):
                out.update({f"{name}.{k}": v for k, v in value.buffers().items()})
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    out.update({f"{name}.{i}.{k}": v for k, v in child.buffers().items()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_params()}
        state.update({f"buffer:{k}": v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        missing = set(own) - set(k for k in state if not k.startswith("buffer:"))
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]
        self._load_buffers({k[len("buffer:"):]: v for k, v in state.items() if k.startswith("buffer:")})

    def _load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                sub = {k[len(name) + 1:]: v for k, v in buffers.items() if k.startswith(name + ".")}
                value._load_buffers(sub)
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    pre = f"{name}.{i}."
                    child._load_buffers({k[len(pre):]: v for k, v in buffers.items() if k.startswith(pre)})

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def copy_from(self, other: "Module") -> None:
        for p, q in zip(self.params(), other.params()):
            p.data[...] = q.data


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = Param(glorot_uniform(rng, n_in, n_out))
        self.b = Param(np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Tensor:
        return linear(x, self.W, self.b)


class MLP(Module):
    """Fully connected stack with ReLU on hidden layers and a linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.sizes = tuple(sizes)

    def __call__(self, x) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = relu(h)
        return h


class BatchNorm1d(Module):
    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Param(np.ones(n))
        self.beta = Param(np.zeros(n))
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _load_buffers(self, buffers):
        if "running_mean" in buffers:
            self.running_mean = buffers["running_mean"].copy()
            self.running_var = buffers["running_var"].copy()

    def __call__(self, x) -> Tensor:
        if self.training:
            out, mu, var = batch_norm(x, self.gamma, self.beta, self.eps)
            m = x.shape[0]
            unbiased = var * m / max(m - 1, 1)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
            return out
        # eval mode is inference only: no tape
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        shift = self.beta.data - self.running_mean * scale
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
        return Tensor(data * scale + shift)
