"""Composable layers over the tensor core.

A Module owns named parameters (tape leaves with requires_grad set) and
named buffers (plain numpy arrays such as batch-norm running stats).
Child modules are discovered from instance attributes in insertion
order, which keeps parameter naming deterministic for checkpoints.

Freezing a module clears requires_grad on its parameters and flips a
``frozen`` flag that batch-norm layers honor by switching to running
statistics even when the surrounding pass is in train mode.  That keeps
every byte of a frozen region, running stats included, untouched.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, ArgumentError
from .tensor import Tensor


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """He initialization for layers feeding ReLUs: normal(0, sqrt(2/fan_in))."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Module:
    """Base class for layers and containers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.frozen = False

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        p = Tensor(array, requires_grad=True)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._buffers[name] = array
        return array

    def _child_items(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def modules(self):
        yield self
        for _, child in self._child_items():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._child_items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._child_items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_buffer(self, name: str, array: np.ndarray) -> None:
        """Replace a buffer's contents in place (used by checkpoint load)."""
        parts = name.split(".")
        mod = self
        for part in parts[:-1]:
            mod = getattr(mod, part) if not part.isdigit() else mod[int(part)]
        mod._buffers[parts[-1]][...] = array

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return self.forward(x, train=train)


def set_module_freeze(module: Module, frozen: bool) -> None:
    """Freeze or thaw a subtree: parameters and batch-norm behavior."""
    for m in module.modules():
        m.frozen = frozen
    for p in module.parameters():
        p.requires_grad = not frozen
        p.frozen = frozen
        if frozen:
            p.grad = None


class Sequential(Module):
    """Ordered chain of modules.  Counts forward invocations, which the
    dual-head network uses to assert the stem runs once per input."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        self.calls = 0

    def _child_items(self):
        for i, layer in enumerate(self.layers):
            yield str(i), layer

    def __getitem__(self, idx: int) -> Module:
        return self.layers[idx]

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self.calls += 1
        for layer in self.layers:
            x = layer(x, train=train)
        return x


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, stride: int = 1,
                 padding: int = 0, bias: bool = False, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kh * kw
        self.weight = self.add_param(
            "weight", kaiming_normal(rng, (out_ch, in_ch, kh, kw), fan_in, dtype))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 *, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        effective_train = train and not self.frozen
        return T.batch_norm(x, self.gamma, self.beta,
                            self.running_mean, self.running_var,
                            train=effective_train, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.weight = self.add_param(
            "weight", uniform_fan_in(rng, (out_features, in_features), in_features, dtype))
        self.bias = self.add_param(
            "bias", uniform_fan_in(rng, (out_features,), in_features, dtype))

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.relu(x)


class SpatialAvgPool(Module):
    """Window/stride pooling over both spatial axes of NCHW input."""

    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        self.window = window
        self.stride = stride

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        x = T.avg_pool(x, self.window, self.stride, axis=2)
        return T.avg_pool(x, self.window, self.stride, axis=3)


class GlobalAvgPool(Module):
    """Mean over the spatial axes, NCHW -> NC."""

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.mean(x, axis=(2, 3))


class WideBasicBlock(Module):
    """Pre-activation wide residual block (BN-ReLU-conv, twice)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.bn1 = BatchNorm2d(in_ch, dtype=dtype)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        o = T.relu(self.bn1(x, train=train))
        skip = self.shortcut(o, train=train) if self.shortcut is not None else x
        o = self.conv2(T.relu(self.bn2(self.conv1(o, train=train), train=train)), train=train)
        return T.add(o, skip)


class BasicBlock(Module):
    """Post-activation residual block (conv-BN-ReLU-conv-BN, add, ReLU)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.shortcut_conv = None
        self.shortcut_bn = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut_conv = Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng, dtype=dtype)
            self.shortcut_bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        o = self.bn2(self.conv2(
            T.relu(self.bn1(self.conv1(x, train=train), train=train)), train=train), train=train)
        if self.shortcut_conv is not None:
            skip = self.shortcut_bn(self.shortcut_conv(x, train=train), train=train)
        else:
            skip = x
        return T.relu(T.add(o, skip))


def residual_group(block_cls, in_ch: int, out_ch: int, n_blocks: int, stride: int,
                   *, rng: np.random.Generator, dtype=np.float64) -> Sequential:
    if n_blocks < 1:
        raise ArchitectureError("a residual group needs at least one block")
    blocks = [block_cls(in_ch, out_ch, stride, rng=rng, dtype=dtype)]
    for _ in range(n_blocks - 1):
        blocks.append(block_cls(out_ch, out_ch, 1, rng=rng, dtype=dtype))
    return Sequential(blocks)


def copy_state(src: Module, dst: Module) -> None:
    """Copy parameters and buffers from src into dst by matching names."""
    src_params = dict(src.named_parameters())
    dst_params = dict(dst.named_parameters())
    if set(src_params) != set(dst_params):
        missing = set(src_params) ^ set(dst_params)
        raise ArgumentError(f"parameter name sets differ, first offender: {sorted(missing)[0]}")
    for name, dp in dst_params.items():
        sp = src_params[name]
        if sp.shape != dp.shape:
            raise ArgumentError(f"shape mismatch for {name}: {sp.shape} vs {dp.shape}")
        dp.data[...] = sp.data
    dst_bufs = dict(dst.named_buffers())
    for name, sb in src.named_buffers():
        dst_bufs[name][...] = sb
