"""Convolutional logic layers with single-gate kernels.

A kernel is one logic unit whose candidate inputs ``p``/``q`` index its
receptive field: ``channels_per_kernel`` mapped input channels times a 3x3
window, flattened as ``slot * 9 + dy * 3 + dx``. Candidates and weights are
shared across all spatial positions of the output channel. Padding reads as
constant 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .network import LogicLayer, StaleTapeError, Tape, gate_partials, gate_values, softmax_backward

KERNEL = 3
PADDING = 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    height: int
    width: int
    stride: int = 1
    channels_per_kernel: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if not 1 <= self.channels_per_kernel <= self.in_channels:
            raise ValueError("channels_per_kernel must be in 1..in_channels")

    @property
    def out_height(self) -> int:
        return (self.height + 2 * PADDING - KERNEL) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.width + 2 * PADDING - KERNEL) // self.stride + 1

    @property
    def field_size(self) -> int:
        return self.channels_per_kernel * KERNEL * KERNEL


def output_shape(spec: ConvSpec, in_shape) -> tuple[int, int, int]:
    c, h, w = in_shape
    if (c, h, w) != (spec.in_channels, spec.height, spec.width):
        raise ValueError(
            f"input shape {tuple(in_shape)} inconsistent with layer "
            f"({spec.in_channels}, {spec.height}, {spec.width})"
        )
    return spec.out_channels, spec.out_height, spec.out_width


def assign_channels(spec: ConvSpec, rng: np.random.Generator) -> np.ndarray:
    """(out_channels, channels_per_kernel) input-channel map.

    The first channel of every kernel is round-robin so that every input
    channel is read once there are at least as many kernels as channels.
    """
    cin, cpk = spec.in_channels, spec.channels_per_kernel
    cmap = np.empty((spec.out_channels, cpk), dtype=np.int64)
    for o in range(spec.out_channels):
        first = o % cin
        cmap[o, 0] = first
        if cpk > 1:
            rest = np.delete(np.arange(cin), first)
            cmap[o, 1:] = rng.choice(rest, size=cpk - 1, replace=False)
    return cmap


def sample_kernel_candidates(K: int, field_size: int, rng: np.random.Generator):
    return rng.integers(0, field_size, size=K), rng.integers(0, field_size, size=K)


class ConvLayer(LogicLayer):
    kind = "conv"

    def __init__(self, spec: ConvSpec, K: int = 16, channel_map=None):
        super().__init__(spec.out_channels, K)
        self.spec = spec
        if channel_map is None:
            channel_map = np.arange(spec.out_channels)[:, None] % spec.in_channels
            if spec.channels_per_kernel > 1:
                raise ValueError("channel_map required when channels_per_kernel > 1")
        self.channel_map = np.asarray(channel_map, dtype=np.int64)
        if self.channel_map.shape != (spec.out_channels, spec.channels_per_kernel):
            raise ValueError("channel_map shape does not match the layer")
        self._field = self._field_table()
        self._scatter_cache = None

    @classmethod
    def build(cls, spec: ConvSpec, K: int, rng: np.random.Generator, init: str = "residual"):
        layer = cls(spec, K, assign_channels(spec, rng))
        for o in range(spec.out_channels):
            layer.p[o], layer.q[o] = sample_kernel_candidates(K, spec.field_size, rng)
        layer.init_weights(init, rng)
        return layer

    @property
    def in_shape(self):
        s = self.spec
        return (s.in_channels, s.height, s.width)

    @property
    def out_shape(self):
        s = self.spec
        return (s.out_channels, s.out_height, s.out_width)

    def _field_table(self) -> np.ndarray:
        """(out_channels, positions, field) flat indices into the padded input."""
        s = self.spec
        hp, wp = s.height + 2 * PADDING, s.width + 2 * PADDING
        oi, oj = np.meshgrid(np.arange(s.out_height), np.arange(s.out_width), indexing="ij")
        base = (oi * s.stride * wp + oj * s.stride).ravel()
        f = np.arange(s.field_size)
        slot, off = f // 9, f % 9
        dy, dx = off // 3, off % 3
        ch = self.channel_map[:, slot]
        start = ch * hp * wp + (dy * wp + dx)[None, :]
        return start[:, None, :] + base[None, :, None]

    def sample_connections(self, n, rng):
        return sample_kernel_candidates(n, self.spec.field_size, rng)

    def _pad(self, x):
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.in_shape:
            raise ValueError(f"conv layer expects (batch, {self.in_shape}), got {x.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (PADDING, PADDING), (PADDING, PADDING)))
        return xp.reshape(len(x), -1)

    def _indices(self):
        """Gather indices: (out_channels, positions) when frozen, else
        (out_channels, positions, K)."""
        o = np.arange(self.units)
        if self.frozen:
            _, p, q = self.frozen_choice
            return self._field[o, :, p], self._field[o, :, q]
        o = o[:, None, None]
        pos = np.arange(self._field.shape[1])[None, :, None]
        return self._field[o, pos, self.p[:, None, :]], self._field[o, pos, self.q[:, None, :]]

    def forward(self, x):
        xp = self._pad(x)
        B = len(xp)
        ia, ib = self._indices()
        a, b = xp[:, ia], xp[:, ib]
        if self.frozen:
            k = self.frozen_choice[0][:, None]
            out = gate_values(k, a, b)
            tape = Tape(self.version, B, a, b, None, None, k)
        else:
            s = self.softmax()[:, None, :]
            k = self.k[:, None, :]
            g = gate_values(k, a, b)
            out = (g * s).sum(axis=-1)
            tape = Tape(self.version, B, a, b, s, g, k)
        return out.reshape(B, *self.out_shape), tape

    def _scatter_matrices(self):
        if self._scatter_cache is not None and self._scatter_cache[0] == self.version:
            return self._scatter_cache[1:]
        s = self.spec
        size = s.in_channels * (s.height + 2 * PADDING) * (s.width + 2 * PADDING)
        mats = []
        for idx in self._indices():
            flat = idx.ravel()
            rows = np.arange(flat.size)
            mats.append(sp.csr_matrix((np.ones(flat.size), (rows, flat)), shape=(flat.size, size)))
        self._scatter_cache = (self.version, *mats)
        return mats

    def backward(self, tape: Tape, grad_out, need_input_grad: bool = True):
        if tape.layer_version != self.version:
            raise StaleTapeError("layer parameters changed since the forward pass")
        B = tape.batch
        go = np.asarray(grad_out, dtype=np.float64).reshape(B, self.units, -1)
        if self.frozen:
            grad_w = None
            coef = go
        else:
            grad_s = np.einsum("bop,bopk->ok", go, tape.g)
            grad_w = softmax_backward(tape.s[:, 0, :], grad_s)
            if not need_input_grad:
                return grad_w, None
            coef = go[..., None] * tape.s
        if not need_input_grad:
            return grad_w, None
        da, db = gate_partials(tape.k, tape.a, tape.b)
        ga, gb = coef * da, coef * db
        P, Q = self._scatter_matrices()
        flat = (P.T @ ga.reshape(B, -1).T + Q.T @ gb.reshape(B, -1).T).T
        s = self.spec
        padded = flat.reshape(B, s.in_channels, s.height + 2 * PADDING, s.width + 2 * PADDING)
        return grad_w, np.ascontiguousarray(padded[:, :, PADDING:-PADDING, PADDING:-PADDING])

    def unroll(self, in_refs, pad_ref: int):
        """Gate list ``(gate, ref_a, ref_b)`` for every output position.

        ``in_refs`` holds one circuit reference per input position, shape
        ``in_shape``; padding resolves to ``pad_ref``. Output order is
        channel-major, then row, then column.
        """
        if not self.frozen:
            raise ValueError("only discretized conv layers can be unrolled")
        s = self.spec
        in_refs = np.asarray(in_refs, dtype=np.int64)
        padded = np.pad(in_refs, ((0, 0), (PADDING, PADDING), (PADDING, PADDING)), constant_values=pad_ref).ravel()
        ia, ib = self._indices()
        gate = np.repeat(self.frozen_choice[0], s.out_height * s.out_width)
        return gate, padded[ia].ravel(), padded[ib].ravel()


def conv_forward(layer: ConvLayer, x):
    return layer.forward(x)


def conv_backward(layer: ConvLayer, tape, grad_out):
    return layer.backward(tape, grad_out)
