"""Relaxed logic networks.

Every logic unit (a dense neuron or a convolution kernel) holds ``K``
candidate triples ``(k, p, q)``: a gate id and two input indices. Its relaxed
output is the softmax(w)-weighted mixture of the candidates' relaxed gates.
Parameters of a layer are stored as ``(units, K)`` arrays. A frozen layer
keeps only one ``(gate, p, q)`` per unit and drops ``w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import gates

RESAMPLE_NONE = 0
RESAMPLE_NON_DOMINANT = 1
RESAMPLE_ALL = 2


class StaleTapeError(RuntimeError):
    """A tape was replayed after the layer's parameters changed."""


# ---------------------------------------------------------------------------
# softmax / entropy / single neuron
# ---------------------------------------------------------------------------


def softmax_weights(w):
    w = np.asarray(w, dtype=np.float64)
    if np.isnan(w).any():
        raise ValueError("NaN in neuron weights")
    z = w - w.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_of(s):
    """Shannon entropy (nats) along the last axis, with 0 ln 0 = 0."""
    s = np.asarray(s, dtype=np.float64)
    logs = np.log(np.where(s > 0, s, 1.0))
    return -(s * logs).sum(axis=-1)


def weight_entropy(w):
    h = entropy_of(softmax_weights(w))
    return float(h) if np.ndim(h) == 0 else h


@dataclass
class NeuronParams:
    w: np.ndarray
    k: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        self.q = np.asarray(self.q, dtype=np.int64)
        n = len(self.w)
        if not (len(self.k) == len(self.p) == len(self.q) == n):
            raise ValueError("w, k, p, q must have equal length")
        if np.any((self.k < 1) | (self.k > gates.NUM_GATES)):
            raise ValueError("gate ids must be in 1..16")


def neuron_forward(params: NeuronParams, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if np.any(params.p >= len(x)) or np.any(params.q >= len(x)) or np.any(params.p < 0) or np.any(params.q < 0):
        raise IndexError("neuron input index out of range")
    s = softmax_weights(params.w)
    g = gate_values(params.k, x[params.p], x[params.q])
    return float((g * s).sum(axis=-1))


def discretize_neuron(params: NeuronParams) -> tuple[int, int, int]:
    """Highest-weight triple; ties go to the lowest index."""
    i = int(np.argmax(params.w))
    return int(params.k[i]), int(params.p[i]), int(params.q[i])


# ---------------------------------------------------------------------------
# vectorized gate mixing
# ---------------------------------------------------------------------------


def gate_values(k, a, b):
    """Relaxed outputs of gates ``k`` (broadcast against ``a``, ``b``)."""
    i = np.asarray(k) - 1
    return gates.COEF_0[i] + gates.COEF_A[i] * a + gates.COEF_B[i] * b + gates.COEF_AB[i] * a * b


def gate_partials(k, a, b):
    i = np.asarray(k) - 1
    cab = gates.COEF_AB[i]
    return gates.COEF_A[i] + cab * b, gates.COEF_B[i] + cab * a


def softmax_backward(s, grad_s):
    return s * (grad_s - (s * grad_s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def initial_gates(units: int, K: int) -> np.ndarray:
    row = np.arange(K, dtype=np.int64) % gates.NUM_GATES + 1
    return np.tile(row, (units, 1))


def residual_weights(k_row) -> np.ndarray:
    """Weights whose softmax is 0.9 on the first identity (gate 4) slot and
    0.1/(K-1) on every other slot."""
    k_row = np.asarray(k_row)
    K = len(k_row)
    hits = np.flatnonzero(k_row == gates.PASS_A)
    if len(hits) == 0 or K < 2:
        raise ValueError("residual initialization needs an identity (gate 4) candidate")
    w = np.full(K, math.log(0.1 / (K - 1)))
    w[hits[0]] = math.log(0.9)
    return w


def init_weights(k, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Initial ``w`` for candidate gates ``k`` of shape (units, K) or (K,)."""
    k = np.asarray(k)
    if scheme == "gaussian":
        return rng.standard_normal(k.shape)
    if scheme == "residual":
        if k.ndim == 1:
            return residual_weights(k)
        return np.stack([residual_weights(row) for row in k])
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_connections_dense(d_in: int, d_out: int, K: int, rng: np.random.Generator):
    """Coverage-guaranteeing input pairs, shape (d_out, K) each.

    For each of the K candidate slots, the 2*d_out input positions contain
    every input index ``floor(2*d_out/d_in)`` times; the remainder is drawn
    uniformly with replacement and everything is shuffled.
    """
    if 2 * d_out < d_in:
        raise ValueError(
            f"2*d_out={2 * d_out} < d_in={d_in}: some inputs would be unreachable"
        )
    r = (2 * d_out) // d_in
    p = np.empty((d_out, K), dtype=np.int64)
    q = np.empty((d_out, K), dtype=np.int64)
    for j in range(K):
        slots = np.concatenate([
            np.tile(np.arange(d_in, dtype=np.int64), r),
            rng.integers(0, d_in, size=2 * d_out - r * d_in),
        ])
        rng.shuffle(slots)
        p[:, j] = slots[:d_out]
        q[:, j] = slots[d_out:]
    return p, q


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class LogicLayer:
    """Common state for layers built from mixtures of candidate triples.

    Subclasses define how ``p``/``q`` map to input positions
    (``_gather_index``) and how fresh connections are sampled
    (``sample_connections``).
    """

    kind = "logic"

    def __init__(self, units: int, K: int):
        self.units = units
        self.K = K
        self.w: np.ndarray | None = np.zeros((units, K))
        self.k = initial_gates(units, K)
        self.p = np.zeros((units, K), dtype=np.int64)
        self.q = np.zeros((units, K), dtype=np.int64)
        self.frozen = False
        self.frozen_choice: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
        self.version = 0

    # -- parameters ----------------------------------------------------------

    def touch(self):
        self.version += 1

    def softmax(self) -> np.ndarray:
        return softmax_weights(self.w)

    def entropies(self) -> np.ndarray:
        return entropy_of(self.softmax())

    def discretized(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-unit ``(gate, p, q)``; the frozen choice if frozen."""
        if self.frozen:
            return self.frozen_choice
        i = np.argmax(self.w, axis=1)
        rows = np.arange(self.units)
        return self.k[rows, i].copy(), self.p[rows, i].copy(), self.q[rows, i].copy()

    def freeze(self):
        if self.frozen:
            return
        self.frozen_choice = self.discretized()
        self.frozen = True
        self.w = self.k = self.p = self.q = None
        self.touch()

    def neuron(self, unit: int) -> NeuronParams:
        if self.frozen:
            raise ValueError("frozen layers keep no candidate triples")
        return NeuronParams(self.w[unit], self.k[unit], self.p[unit], self.q[unit])

    def init_weights(self, scheme: str, rng: np.random.Generator):
        self.w = init_weights(self.k, scheme, rng)
        self.touch()

    def sample_connections(self, n: int, rng: np.random.Generator):
        raise NotImplementedError

    def apply_resample(self, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Redraw candidates of units flagged in ``actions``; returns the
        indices of the units that were changed."""
        if self.frozen:
            return np.empty(0, dtype=np.int64)
        actions = np.asarray(actions)
        K = self.K
        changed = np.flatnonzero(actions != RESAMPLE_NONE)
        for u in changed:
            if actions[u] == RESAMPLE_NON_DOMINANT:
                keep = int(np.argmax(self.w[u]))
                redo = np.array([j for j in range(K) if j != keep], dtype=np.int64)
                w = np.full(K, math.log(0.1 / (K - 1)))
                w[keep] = math.log(0.9)
            else:
                redo = np.arange(K)
                w = np.full(K, math.log(1.0 / K))
            self.k[u, redo] = rng.integers(1, gates.NUM_GATES + 1, size=len(redo))
            pp, qq = self.sample_connections(len(redo), rng)
            self.p[u, redo] = pp
            self.q[u, redo] = qq
            self.w[u] = w
        if len(changed):
            self.touch()
        return changed

    # -- state for checkpoints ----------------------------------------------

    def state(self) -> dict:
        if self.frozen:
            g, p, q = self.frozen_choice
            return {"frozen_gate": g, "frozen_p": p, "frozen_q": q}
        return {"w": self.w, "k": self.k, "p": self.p, "q": self.q}

    def load_state(self, state: dict):
        if "frozen_gate" in state:
            self.frozen = True
            self.frozen_choice = (
                np.asarray(state["frozen_gate"], dtype=np.int64),
                np.asarray(state["frozen_p"], dtype=np.int64),
                np.asarray(state["frozen_q"], dtype=np.int64),
            )
            self.w = self.k = self.p = self.q = None
        else:
            self.frozen = False
            self.frozen_choice = None
            self.w = np.asarray(state["w"], dtype=np.float64).copy()
            self.k = np.asarray(state["k"], dtype=np.int64).copy()
            self.p = np.asarray(state["p"], dtype=np.int64).copy()
            self.q = np.asarray(state["q"], dtype=np.int64).copy()
        self.touch()


@dataclass
class Tape:
    layer_version: int
    batch: int
    a: np.ndarray
    b: np.ndarray
    s: np.ndarray | None
    g: np.ndarray | None
    k: np.ndarray


class DenseLayer(LogicLayer):
    kind = "dense"

    def __init__(self, d_in: int, d_out: int, K: int = 16):
        super().__init__(d_out, K)
        self.d_in = d_in
        self.d_out = d_out
        self._scatter_cache = None

    @property
    def in_shape(self):
        return (self.d_in,)

    @property
    def out_shape(self):
        return (self.d_out,)

    def init_connections(self, rng: np.random.Generator):
        self.p, self.q = init_connections_dense(self.d_in, self.d_out, self.K, rng)
        self.touch()

    def sample_connections(self, n, rng):
        return rng.integers(0, self.d_in, size=n), rng.integers(0, self.d_in, size=n)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"dense layer expects (batch, {self.d_in}), got {x.shape}")
        if self.frozen:
            k, p, q = self.frozen_choice
            a, b = x[:, p], x[:, q]
            out = gate_values(k, a, b)
            return out, Tape(self.version, len(x), a, b, None, None, k)
        a, b = x[:, self.p], x[:, self.q]
        s = self.softmax()
        g = gate_values(self.k, a, b)
        out = (g * s).sum(axis=-1)
        return out, Tape(self.version, len(x), a, b, s, g, self.k)

    def _scatter_matrices(self):
        if self._scatter_cache is not None and self._scatter_cache[0] == self.version:
            return self._scatter_cache[1:]
        if self.frozen:
            _, p, q = self.frozen_choice
        else:
            p, q = self.p, self.q
        n = p.size
        rows = np.arange(n)
        ones = np.ones(n)
        P = sp.csr_matrix((ones, (rows, p.ravel())), shape=(n, self.d_in))
        Q = sp.csr_matrix((ones, (rows, q.ravel())), shape=(n, self.d_in))
        self._scatter_cache = (self.version, P, Q)
        return P, Q

    def backward(self, tape: Tape, grad_out, need_input_grad: bool = True):
        if tape.layer_version != self.version:
            raise StaleTapeError("layer parameters changed since the forward pass")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        B = tape.batch
        if self.frozen:
            grad_w = None
            da, db = gate_partials(tape.k, tape.a, tape.b)
            ga = grad_out * da
            gb = grad_out * db
        else:
            grad_s = np.einsum("bn,bnk->nk", grad_out, tape.g)
            grad_w = softmax_backward(tape.s, grad_s)
            if not need_input_grad:
                return grad_w, None
            coef = grad_out[:, :, None] * tape.s
            da, db = gate_partials(tape.k, tape.a, tape.b)
            ga = coef * da
            gb = coef * db
        if not need_input_grad:
            return grad_w, None
        P, Q = self._scatter_matrices()
        grad_in = (P.T @ ga.reshape(B, -1).T + Q.T @ gb.reshape(B, -1).T).T
        return grad_w, np.ascontiguousarray(grad_in)

    def unroll(self, in_refs, pad_ref: int = 0):
        if not self.frozen:
            raise ValueError("only discretized dense layers can be unrolled")
        in_refs = np.asarray(in_refs, dtype=np.int64).ravel()
        gate, p, q = self.frozen_choice
        return gate.copy(), in_refs[p], in_refs[q]


class Flatten:
    kind = "flatten"

    def __init__(self, in_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = (int(np.prod(self.in_shape)),)

    def forward(self, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, tape, grad_out, need_input_grad=True):
        return None, grad_out.reshape(tape)


class GroupSum:
    """Population-count decoder: class score = (sum of its group) / tau."""

    kind = "groupsum"

    def __init__(self, width: int, num_classes: int, tau: float):
        if num_classes < 1 or width % num_classes:
            raise ValueError(f"width {width} not divisible by {num_classes} classes")
        if not tau > 0:
            raise ValueError("GroupSum temperature must be positive")
        self.width = width
        self.num_classes = num_classes
        self.group_size = width // num_classes
        self.tau = float(tau)
        self.in_shape = (width,)
        self.out_shape = (num_classes,)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.width:
            raise ValueError(f"GroupSum expects width {self.width}, got {x.shape[-1]}")
        shaped = x.reshape(*x.shape[:-1], self.num_classes, self.group_size)
        return shaped.sum(axis=-1) / self.tau, None

    def backward(self, tape, grad_out, need_input_grad=True):
        return None, np.repeat(np.asarray(grad_out) / self.tau, self.group_size, axis=-1)


def groupsum_forward(x, head: GroupSum):
    return head.forward(x)[0]


def cross_entropy_loss(logits, label):
    """Softmax cross entropy. With a batch of logits, returns the mean loss
    and the gradient of that mean."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(label))
    C = z.shape[1]
    if np.any((labels < 0) | (labels >= C)):
        raise ValueError(f"label out of range for {C} classes")
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(z))
    losses = logsum - z[rows, labels]
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / len(z)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Network:
    """Ordered layers ending in exactly one GroupSum head."""

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        if not self.layers or not isinstance(self.layers[-1], GroupSum):
            raise ValueError("network must end with a GroupSum head")
        if sum(isinstance(l, GroupSum) for l in self.layers) != 1:
            raise ValueError("network must contain exactly one GroupSum head")
        shape = self.input_shape
        for layer in self.layers:
            if tuple(layer.in_shape) != tuple(shape):
                raise ValueError(f"{layer.kind} layer expects {layer.in_shape}, got {shape}")
            shape = tuple(layer.out_shape)

    @property
    def head(self) -> GroupSum:
        return self.layers[-1]

    @property
    def logic_layers(self) -> list[LogicLayer]:
        return [l for l in self.layers if isinstance(l, LogicLayer)]

    def forward(self, x, keep_tapes: bool = True):
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"network expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        tapes = []
        for layer in self.layers:
            x, tape = layer.forward(x)
            tapes.append(tape if keep_tapes else None)
        return x, tapes

    def backward(self, tapes, grad_logits) -> dict[int, np.ndarray]:
        """Weight gradients keyed by layer index. Stops once every remaining
        earlier layer is frozen or parameter-free."""
        trainable = [i for i, l in enumerate(self.layers) if isinstance(l, LogicLayer) and not l.frozen]
        grads: dict[int, np.ndarray] = {}
        if not trainable:
            return grads
        first = trainable[0]
        g = grad_logits
        for i in range(len(self.layers) - 1, first - 1, -1):
            layer = self.layers[i]
            grad_w, g = layer.backward(tapes[i], g, need_input_grad=i > first)
            if grad_w is not None:
                grads[i] = grad_w
        return grads

    def predict(self, x, batch_size: int = 1024):
        out = []
        for start in range(0, len(x), batch_size):
            logits, _ = self.forward(x[start:start + batch_size], keep_tapes=False)
            out.append(np.argmax(logits, axis=1))
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)
