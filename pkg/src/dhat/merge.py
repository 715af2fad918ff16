"""Logits-fusion merge CNN.

The two heads' logits are stacked into an N x 1 x C x 2 tensor and
passed through:

  1. 8 head-wise 1x1x2 kernels with bias, then BN over the 8 channels
     and ReLU, giving N x 8 x C.
  2. 16 two-tap kernels mixed over every lexicographic class pair
     (i < j), giving N x 16 x 8 x P with P = C(C-1)/2.
  3. Average pooling with window 2, stride 2 along the 16-kernel axis,
     giving N x 8 x 8 x P.
  4. Flatten to 64 * P features and a fully connected map to C scores.

``merge_forward`` applies the final softmax; the raw scores stay
available through ``forward_logits`` so losses can stay in logit space.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor

HEADWISE_KERNELS = 8
PAIRWISE_KERNELS = 16
POOL_WINDOW = 2
POOL_STRIDE = 2


def enumerate_class_pairs(num_classes: int) -> list[tuple[int, int]]:
    """All (i, j) class pairs with i < j in lexicographic order."""
    if num_classes < 2:
        raise DimensionError("class pairs need at least 2 classes")
    return [(i, j) for i in range(num_classes) for j in range(i + 1, num_classes)]


def stack_logits(z_main: Tensor, z_second: Tensor) -> Tensor:
    """Stack per-head logits into an N x 1 x C x 2 tensor.

    Slot [n, 0, c, 0] holds the main head's score for class c and
    [n, 0, c, 1] the second head's.
    """
    if z_main.ndim != 2 or z_main.shape != z_second.shape:
        raise DimensionError(
            f"stack_logits expects matching N x C logits, got {z_main.shape} and {z_second.shape}")
    n, c = z_main.shape
    a = T.reshape(z_main, (n, 1, c, 1))
    b = T.reshape(z_second, (n, 1, c, 1))
    return T.concat([a, b], axis=3)


def init_average(merge: "MergeCNN") -> "MergeCNN":
    """Rewrite a merge CNN in place so it starts as head averaging.

    Two head-wise filters carry +/- the mean of the two logits vectors,
    four pair kernels pass each class of a pair straight through, and
    the fully connected map sums every pair feature touching a class.
    The result scores class c as the average of the two heads' logits
    for c (up to the BN epsilon factor), so the merged head begins
    exactly as robust as the plain two-head ensemble.  All weights not
    on that path start at zero or small values and stay trainable, so
    later training can only be judged against a sensible baseline.
    """
    c = merge.num_classes
    p = merge.num_pairs
    hw = merge.headwise.weight.data
    hw *= 0.05
    hw[0, 0, 0, :] = (0.5, 0.5)
    hw[1, 0, 0, :] = (-0.5, -0.5)
    merge.headwise.bias.data[:] = 0.0
    pk = merge.pair_kernels.data
    pk *= 0.05
    pk[0] = (1.0, 0.0)
    pk[1] = (1.0, 0.0)
    pk[2] = (0.0, 1.0)
    pk[3] = (0.0, 1.0)
    merge.pair_bias.data[:] = 0.0
    fcw = merge.fc.weight.data
    fcw[:] = 0.0
    merge.fc.bias.data[:] = 0.0
    block = HEADWISE_KERNELS * p
    for pair in range(p):
        i = int(merge.pair_first[pair])
        j = int(merge.pair_second[pair])
        fcw[i, 0 * block + 0 * p + pair] += 1.0 / (c - 1)
        fcw[i, 0 * block + 1 * p + pair] -= 1.0 / (c - 1)
        fcw[j, 1 * block + 0 * p + pair] += 1.0 / (c - 1)
        fcw[j, 1 * block + 1 * p + pair] -= 1.0 / (c - 1)
    return merge


class MergeCNN(Module):
    """The lightweight CNN that fuses two logits vectors into one."""

    def __init__(self, num_classes: int, *, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.num_classes = num_classes
        pairs = enumerate_class_pairs(num_classes)
        self.pair_first = np.array([i for i, _ in pairs], dtype=np.int64)
        self.pair_second = np.array([j for _, j in pairs], dtype=np.int64)
        self.num_pairs = len(pairs)

        self.headwise = Conv2d(1, HEADWISE_KERNELS, (1, 2), bias=True, rng=rng, dtype=dtype)
        self.headwise_bn = BatchNorm2d(HEADWISE_KERNELS, dtype=dtype)
        self.pair_kernels = self.add_param(
            "pair_kernels", rng.standard_normal((PAIRWISE_KERNELS, 2)).astype(dtype))
        self.pair_bias = self.add_param(
            "pair_bias", np.zeros(PAIRWISE_KERNELS, dtype=dtype))
        pooled_kernels = (PAIRWISE_KERNELS - POOL_WINDOW) // POOL_STRIDE + 1
        self.flat_features = pooled_kernels * HEADWISE_KERNELS * self.num_pairs
        self.fc = Linear(self.flat_features, num_classes, rng=rng, dtype=dtype)

    def headwise_conv(self, stacked: Tensor, train: bool = False) -> Tensor:
        """8 per-class two-tap kernels, then BN and ReLU: N x 8 x C x 1."""
        out = self.headwise(stacked, train=train)
        return T.relu(self.headwise_bn(out, train=train))

    def pairwise_conv(self, features: Tensor) -> Tensor:
        """Mix every class pair under each of the 16 kernels: N x 16 x 8 x P."""
        return T.pair_conv(features, self.pair_first, self.pair_second,
                           self.pair_kernels, self.pair_bias)

    def forward_logits(self, z_main: Tensor, z_second: Tensor,
                       train: bool = False) -> Tensor:
        stacked = stack_logits(z_main, z_second)
        feats = self.headwise_conv(stacked, train=train)
        n = feats.shape[0]
        feats = T.reshape(feats, (n, HEADWISE_KERNELS, self.num_classes))
        mixed = self.pairwise_conv(feats)
        pooled = T.avg_pool(mixed, POOL_WINDOW, POOL_STRIDE, axis=1)
        return self.fc(T.flatten(pooled), train=train)

    def merge_forward(self, z_main: Tensor, z_second: Tensor,
                      train: bool = False) -> Tensor:
        """Fused class distribution (softmax over the merge scores)."""
        return T.softmax(self.forward_logits(z_main, z_second, train=train))

    def forward(self, x, train: bool = False):
        raise NotImplementedError("MergeCNN consumes two logits tensors; "
                                  "use merge_forward(z_main, z_second)")
