"""ConvLSTM predictive unit and parameter initialization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .exceptions import DimensionError
from .tensor import Tensor

__all__ = [
    "ConvLSTMCell",
    "ConvLSTMState",
    "ConvParams",
    "init_params",
    "init_conv",
    "convlstm_step",
    "zero_state",
    "make_rng",
]

# gate order along the output channel axis of the gate kernel
GATES = ("input", "forget", "cell", "output")


def make_rng(*seed_parts: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by the given integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(s) for s in seed_parts])))


@dataclass
class ConvParams:
    kernel: Tensor
    bias: Tensor

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        k = self.kernel.shape[-1]
        return T.conv2d(x, self.kernel, self.bias, padding=(k - 1) // 2)


@dataclass
class ConvLSTMCell:
    """Peephole-free ConvLSTM.

    The gate kernel reads the channel concatenation
    ``[input, h_prev, topdown]``; ``topdown_channels`` is zero for the top
    layer. When the top-down input is absent the kernel's top-down slice is
    dropped rather than fed zeros.
    """

    gate_kernel: Tensor
    gate_bias: Tensor
    input_channels: int
    hidden_channels: int
    topdown_channels: int = 0

    @property
    def kernel_size(self) -> int:
        return self.gate_kernel.shape[-1]

    @property
    def in_channels_total(self) -> int:
        return self.input_channels + self.hidden_channels + self.topdown_channels


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor


def zero_state(batch: int, channels: int, height: int, width: int, dtype=np.float32) -> ConvLSTMState:
    z = np.zeros((batch, channels, height, width), dtype=dtype)
    return ConvLSTMState(Tensor(z), Tensor(z))


def _uniform_kernel(rng, cout, cin, k, dtype):
    bound = np.sqrt(1.0 / (cin * k * k))
    return rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)


def init_conv(seed, in_channels: int, out_channels: int, kernel_size: int, dtype=np.float32) -> ConvParams:
    rng = make_rng(*np.atleast_1d(seed))
    kernel = _uniform_kernel(rng, out_channels, in_channels, kernel_size, dtype)
    return ConvParams(Tensor(kernel, requires_grad=True),
                      Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True))


def init_params(seed, input_channels: int, hidden_channels: int, kernel_size: int = 3,
                topdown_channels: int = 0, dtype=np.float32) -> ConvLSTMCell:
    """Fresh ConvLSTM cell.

    Kernels are uniform in +-sqrt(1/(Cin_total*k*k)); the forget-gate bias is
    1.0 and all other biases are 0. ``seed`` may be an int or a sequence of
    ints (used as a Philox key).
    """
    cin = input_channels + hidden_channels + topdown_channels
    ch = hidden_channels
    rng = make_rng(*np.atleast_1d(seed))
    kernel = _uniform_kernel(rng, 4 * ch, cin, kernel_size, dtype)
    bias = np.zeros(4 * ch, dtype=dtype)
    bias[ch:2 * ch] = 1.0
    return ConvLSTMCell(Tensor(kernel, requires_grad=True), Tensor(bias, requires_grad=True),
                        input_channels, hidden_channels, topdown_channels)


def convlstm_step(cell: ConvLSTMCell, x: Tensor, state: ConvLSTMState,
                  topdown: Optional[Tensor] = None) -> ConvLSTMState:
    """One ConvLSTM update; ``topdown`` must already be upsampled."""
    ch = cell.hidden_channels
    if x.shape[1] != cell.input_channels:
        raise DimensionError(
            f"convlstm_step: input has {x.shape[1]} channels, cell expects {cell.input_channels}")
    if state.h.shape[1] != ch:
        raise DimensionError(f"convlstm_step: hidden state has {state.h.shape[1]} channels, expected {ch}")
    parts = [x, state.h]
    kernel = cell.gate_kernel
    if topdown is not None:
        if topdown.shape[1] != cell.topdown_channels:
            raise DimensionError(
                f"convlstm_step: top-down input has {topdown.shape[1]} channels, "
                f"cell expects {cell.topdown_channels}")
        parts.append(topdown)
    elif cell.topdown_channels:
        kernel = T.slice_channels(kernel, 0, cell.input_channels + ch)
    z = T.concat_channels(*parts)
    k = cell.kernel_size
    gates = T.conv2d(z, kernel, cell.gate_bias, padding=(k - 1) // 2)
    i = T.sigmoid(T.slice_channels(gates, 0, ch))
    f = T.sigmoid(T.slice_channels(gates, ch, 2 * ch))
    g = T.tanh(T.slice_channels(gates, 2 * ch, 3 * ch))
    o = T.sigmoid(T.slice_channels(gates, 3 * ch, 4 * ch))
    c = T.add(T.mul(f, state.c), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    return ConvLSTMState(h, c)
