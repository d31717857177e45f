"""Parameterised building blocks: affine maps, LSTM cells and a small conv stack."""

from __future__ import annotations

from typing import Any, NamedTuple

import numpy as np

from ..errors import CheckpointError, DimensionError
from . import ops
from .tape import Parameter, Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform values in [-s, s] with s = 1/sqrt(fan_in)."""
    scale = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-scale, scale, size=shape)


class Module:
    """Container that discovers its parameters from attributes, in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        """Dotted names to parameters; names are written back onto the parameters."""
        found: dict[str, Parameter] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = name
                found[name] = value
            elif isinstance(value, Module):
                found.update(value.named_parameters(name + "."))
            elif isinstance(value, dict):
                for sub_key, sub in value.items():
                    if isinstance(sub, Module):
                        found.update(sub.named_parameters(f"{name}.{sub_key}."))
        return found

    def parameters(self) -> list[Parameter]:
        """All parameters in deterministic order."""
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        """Clear every gradient buffer."""
        for param in self.parameters():
            param.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values keyed by name."""
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values; names and shapes must match exactly."""
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise CheckpointError(f"Checkpoint lacks parameters: {', '.join(missing)}")
        for name, param in params.items():
            values = np.asarray(arrays[name], dtype=np.float64)
            if values.shape != param.value.shape:
                raise CheckpointError(
                    f"Shape mismatch for '{name}': checkpoint {values.shape}, model {param.value.shape}"
                )
            param.value = values.copy()
            param.zero_grad()


class Affine(Module):
    """y = W x + b."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(uniform_init(rng, (out_features, in_features), in_features))
        self.bias = Parameter(uniform_init(rng, (out_features,), in_features))

    def __call__(self, x: Any) -> Tensor:
        return ops.affine(x, self.weight, self.bias)


class LSTMState(NamedTuple):
    """Hidden and cell state of an LSTM."""

    h: Tensor
    c: Tensor


class LSTMCell(Module):
    """Classic LSTM cell with input, forget and output gates.

    Gate pre-activations come from one affine map of [input, hidden] laid out as
    (input gate, forget gate, candidate, output gate).
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        fan_in = input_size + hidden_size
        self.weight = Parameter(uniform_init(rng, (4 * hidden_size, fan_in), fan_in))
        self.bias = Parameter(uniform_init(rng, (4 * hidden_size,), fan_in))

    def zero_state(self, batch: int | None = None) -> LSTMState:
        """All-zero state, batched when `batch` is given."""
        shape: tuple[int, ...] = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return LSTMState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def step(self, x: Any, state: LSTMState) -> LSTMState:
        """One gated update; the new hidden state doubles as the output."""
        x = ops.as_tensor(x)
        if x.shape[-1] != self.input_size:
            raise DimensionError(f"LSTM input size {x.shape[-1]} != {self.input_size}")
        if state.h.shape[-1] != self.hidden_size or state.c.shape != state.h.shape:
            raise DimensionError(f"LSTM state shape {state.h.shape} does not match hidden size {self.hidden_size}")
        size = self.hidden_size
        z = ops.affine(ops.concat([x, state.h], axis=-1), self.weight, self.bias)
        input_gate = ops.sigmoid(z[..., :size])
        forget_gate = ops.sigmoid(z[..., size : 2 * size])
        candidate = ops.tanh(z[..., 2 * size : 3 * size])
        output_gate = ops.sigmoid(z[..., 3 * size :])
        c = forget_gate * state.c + input_gate * candidate
        h = output_gate * ops.tanh(c)
        return LSTMState(h, c)

    def masked_step(self, x: Any, state: LSTMState, update: np.ndarray, hold: np.ndarray) -> LSTMState:
        """Rows with update=1 advance, rows with hold=1 keep their state, others reset to zero."""
        stepped = self.step(x, state)
        return LSTMState(
            stepped.h * update + state.h * hold,
            stepped.c * update + state.c * hold,
        )

    def unroll(self, inputs: Any, state: LSTMState | None = None) -> LSTMState:
        """Run over a (T, B, input) sequence and return the final state."""
        inputs = ops.as_tensor(inputs)
        if state is None:
            state = self.zero_state(inputs.shape[1])
        for t in range(inputs.shape[0]):
            state = self.step(inputs[t], state)
        return state


class Conv2d(Module):
    """Square-kernel strided convolution."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, rng: np.random.Generator):
        fan_in = in_channels * kernel * kernel
        self.stride = stride
        self.weight = Parameter(uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = Parameter(uniform_init(rng, (out_channels,), fan_in))

    def __call__(self, x: Any) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride)


class ConvEncoder(Module):
    """Three stride-2 convolution stages followed by an affine projection.

    Encodes (N, H, W) binary occupancy crops into (N, features) vectors.
    """

    KERNEL = 4
    STRIDE = 2

    def __init__(self, cells: int, features: int, rng: np.random.Generator, channels: tuple[int, ...] = (4, 8, 8)):
        self.cells = cells
        self.stages: dict[str, Conv2d] = {}
        size, in_channels = cells, 1
        for stage, out_channels in enumerate(channels):
            self.stages[f"stage{stage}"] = Conv2d(in_channels, out_channels, self.KERNEL, self.STRIDE, rng)
            size = (size - self.KERNEL) // self.STRIDE + 1
            in_channels = out_channels
        if size < 1:
            raise DimensionError(f"Map crop of {cells} cells is too small for {len(channels)} conv stages")
        self.flat_size = in_channels * size * size
        self.project = Affine(self.flat_size, features, rng)

    def __call__(self, maps: Any) -> Tensor:
        maps = ops.as_tensor(maps)
        if maps.ndim != 3 or maps.shape[1] != self.cells or maps.shape[2] != self.cells:
            raise DimensionError(f"Expected (N, {self.cells}, {self.cells}) maps, got {maps.shape}")
        x = ops.reshape(maps, (maps.shape[0], 1, self.cells, self.cells))
        for stage in self.stages.values():
            x = ops.relu(stage(x))
        x = ops.reshape(x, (x.shape[0], self.flat_size))
        return ops.tanh(self.project(x))
