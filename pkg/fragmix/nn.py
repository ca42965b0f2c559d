"""Parameterised layers and the Adam optimizer built on tensor_core"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DimensionError
from .tensor_core import Tensor

# (seed, step) used by every dropout site in training mode
_dropout_key: contextvars.ContextVar[Tuple[int, int]] = contextvars.ContextVar("fragmix_dropout_key", default=(0, 0))


@contextlib.contextmanager
def dropout_context(seed: int, step: int):
    """Key all dropout masks drawn inside the block by (seed, step)"""
    token = _dropout_key.set((int(seed), int(step)))
    try:
        yield
    finally:
        _dropout_key.reset(token)


def current_dropout_key() -> Tuple[int, int]:
    return _dropout_key.get()


class Parameter(Tensor):
    """Trainable leaf tensor"""
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.op = "param"


class Module:
    """
    Base class for anything that owns parameters or sub-modules
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, module in self._modules.items():
            yield from module.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield (f"{prefix}.{name}" if prefix else name), param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def index_dropout_sites(self) -> int:
        """Number every Dropout below this module in traversal order; returns the count"""
        sites = [m for _, m in self.named_modules() if isinstance(m, Dropout)]
        for op_id, site in enumerate(sites):
            site.op_id = op_id
        return len(sites)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise ConfigError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in params:
                continue
            value = np.asarray(value, dtype=np.float64)
            if value.shape != params[name].shape:
                raise DimensionError(f"parameter {name} has the wrong shape", value.shape, params[name].shape)
            params[name].data[...] = value

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: List[Module] = []
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class Linear(Module):
    """y = x W + b with W stored as (in, out)"""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = tc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.op_id = 0

    def key(self) -> Tuple[int, int, int]:
        seed, step = current_dropout_key()
        return seed, step, self.op_id

    def forward(self, x: Tensor) -> Tensor:
        return tc.dropout(x, self.rate, self.key(), training=self.training)


class MLP(Module):
    """
    Stack of Linear layers with SiLU (and dropout) between them
    """

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator,
                 n_layers: int = 2, dropout: float = 0.0):
        super().__init__()
        if n_layers < 1:
            raise ConfigError("an MLP needs at least one layer")
        widths = [n_in] + [n_hidden] * (n_layers - 1) + [n_out]
        self.layers = ModuleList([Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])])
        self.dropout = Dropout(dropout)

    @property
    def output_layer(self) -> Linear:
        return self.layers[len(self.layers) - 1]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.dropout(tc.silu(x))
        return x


def grad_norm(params: Sequence[Parameter]) -> float:
    total = sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None)
    return float(np.sqrt(total))


class Adam:
    """
    Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8 by default)
    """

    def __init__(self, params: Sequence[Parameter], lr: float, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
