"""Flat Boolean circuits: compilation, pruning, evaluation and netlists.

References into a circuit are integers laid out as::

    0            constant 0
    1            constant 1
    2 .. 2+n-1   primary inputs
    2+n ..       gate outputs, in topological order

so a value table indexed by reference can be filled in a single pass.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import gates
from .gates import GateClass
from .network import Flatten, GroupSum, LogicLayer, Network

CONST0 = 0
CONST1 = 1
WORD_BITS = 64
ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)

NETLIST_MAGIC = "bnet"
NETLIST_VERSION = "v1"


class NetlistError(ValueError):
    pass


@dataclass
class BooleanCircuit:
    num_inputs: int
    gates: np.ndarray
    ref_a: np.ndarray
    ref_b: np.ndarray
    outputs: np.ndarray  # (num_classes, group_size) refs
    _levels: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.gates = np.asarray(self.gates, dtype=np.int64).ravel()
        self.ref_a = np.asarray(self.ref_a, dtype=np.int64).ravel()
        self.ref_b = np.asarray(self.ref_b, dtype=np.int64).ravel()
        self.outputs = np.asarray(self.outputs, dtype=np.int64)
        if self.outputs.ndim != 2:
            raise ValueError("outputs must be a (num_classes, group_size) array")
        m = len(self.gates)
        if not (len(self.ref_a) == len(self.ref_b) == m):
            raise ValueError("gate and reference arrays differ in length")
        if m and (self.gates.min() < 1 or self.gates.max() > gates.NUM_GATES):
            raise ValueError("gate ids must be in 1..16")
        own = self.first_gate_ref + np.arange(m)
        if m and (np.any(self.ref_a < 0) or np.any(self.ref_b < 0)
                  or np.any(self.ref_a >= own) or np.any(self.ref_b >= own)):
            raise ValueError("gate references must point to constants, inputs or earlier gates")
        if self.outputs.size and (self.outputs.min() < 0 or self.outputs.max() >= self.num_refs):
            raise ValueError("output reference out of range")

    @property
    def num_gates(self) -> int:
        return len(self.gates)

    @property
    def num_classes(self) -> int:
        return self.outputs.shape[0]

    @property
    def group_size(self) -> int:
        return self.outputs.shape[1]

    @property
    def first_gate_ref(self) -> int:
        return 2 + self.num_inputs

    @property
    def num_refs(self) -> int:
        return self.first_gate_ref + self.num_gates

    def structurally_equal(self, other: "BooleanCircuit") -> bool:
        return (
            self.num_inputs == other.num_inputs
            and np.array_equal(self.gates, other.gates)
            and np.array_equal(self.ref_a, other.ref_a)
            and np.array_equal(self.ref_b, other.ref_b)
            and np.array_equal(self.outputs, other.outputs)
        )

    def levels(self) -> list[np.ndarray]:
        """Gate indices grouped by logic depth; each group depends only on
        earlier groups."""
        if self._levels is None:
            depth = np.zeros(self.num_refs, dtype=np.int64)
            base = self.first_gate_ref
            ra, rb = self.ref_a.tolist(), self.ref_b.tolist()
            d = depth.tolist()
            for j in range(self.num_gates):
                d[base + j] = 1 + max(d[ra[j]], d[rb[j]])
            gate_depth = np.asarray(d[base:], dtype=np.int64)
            order = np.argsort(gate_depth, kind="stable")
            cuts = np.flatnonzero(np.diff(gate_depth[order])) + 1
            self._levels = [lvl for lvl in np.split(order, cuts) if len(lvl)]
        return self._levels


@dataclass
class CircuitMetrics:
    neurons: int
    bops: int

    def report(self) -> str:
        return f"neurons={self.neurons} bops={self.bops}"


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------


def compile_network(network: Network) -> BooleanCircuit:
    """Flatten a fully discretized network into a circuit. Input bits are the
    network input in C order."""
    for layer in network.logic_layers:
        if not layer.frozen:
            raise ValueError("every logic layer must be discretized before compiling")
    n = int(np.prod(network.input_shape))
    refs = (2 + np.arange(n, dtype=np.int64)).reshape(network.input_shape)
    gate_list, ra_list, rb_list = [], [], []
    next_ref = 2 + n
    outputs = None
    for layer in network.layers:
        if isinstance(layer, LogicLayer):
            g, ra, rb = layer.unroll(refs, CONST0)
            gate_list.append(g)
            ra_list.append(ra)
            rb_list.append(rb)
            refs = (next_ref + np.arange(len(g), dtype=np.int64)).reshape(layer.out_shape)
            next_ref += len(g)
        elif isinstance(layer, Flatten):
            refs = refs.reshape(-1)
        elif isinstance(layer, GroupSum):
            outputs = refs.reshape(layer.num_classes, layer.group_size)
        else:
            raise TypeError(f"cannot compile layer of kind {layer.kind!r}")
    cat = lambda xs: np.concatenate(xs) if xs else np.empty(0, dtype=np.int64)
    return BooleanCircuit(n, cat(gate_list), cat(ra_list), cat(rb_list), outputs)


def analytic_neuron_count(network: Network) -> int:
    return sum(int(np.prod(l.out_shape)) for l in network.logic_layers)


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------


def prune(circuit: BooleanCircuit) -> tuple[BooleanCircuit, int]:
    """Remove constant, identity, negation and unreachable gates.

    Each reference is first resolved to a literal ``(base, negated)`` where
    ``base`` is a constant, an input or a nontrivial gate. Negations on gate
    inputs are folded into the consuming gate's truth table. A negated
    literal feeding an output directly is kept as one NOT gate. Returns the
    pruned circuit and its gate count (#BOPs).
    """
    m = circuit.num_gates
    first = circuit.first_gate_ref
    total = circuit.num_refs
    base = list(range(total))
    neg = [False] * total
    cls = [gates.classify_gate(g) for g in range(1, gates.NUM_GATES + 1)]
    gl, ra, rb = circuit.gates.tolist(), circuit.ref_a.tolist(), circuit.ref_b.tolist()
    for j in range(m):
        r = first + j
        c = cls[gl[j] - 1]
        if c is GateClass.CONST0:
            base[r], neg[r] = CONST0, False
        elif c is GateClass.CONST1:
            base[r], neg[r] = CONST1, False
        elif c is GateClass.NONTRIVIAL:
            continue
        else:
            src = ra[j] if c in (GateClass.PASS_A, GateClass.NOT_A) else rb[j]
            b, n = base[src], neg[src]
            if c in (GateClass.NOT_A, GateClass.NOT_B):
                n = not n
            if b <= CONST1 and n:
                b, n = 1 - b, False
            base[r], neg[r] = b, n

    # backward reachability over resolved literals
    keep = bytearray(total)
    stack = [base[r] for r in circuit.outputs.ravel().tolist()]
    while stack:
        r = stack.pop()
        if r < first or keep[r]:
            continue
        keep[r] = 1
        j = r - first
        stack.append(base[ra[j]])
        stack.append(base[rb[j]])

    remap = list(range(first)) + [-1] * m
    new_g, new_a, new_b = [], [], []
    for j in range(m):
        r = first + j
        if not keep[r]:
            continue
        g = gl[j]
        if neg[ra[j]]:
            g = gates.absorb_input_negation(g, "first")
        if neg[rb[j]]:
            g = gates.absorb_input_negation(g, "second")
        remap[r] = first + len(new_g)
        new_g.append(g)
        new_a.append(remap[base[ra[j]]])
        new_b.append(remap[base[rb[j]]])

    inverters: dict[int, int] = {}
    outs = []
    for r in circuit.outputs.ravel().tolist():
        b = remap[base[r]]
        if neg[r]:
            if b not in inverters:
                inverters[b] = first + len(new_g)
                new_g.append(gates.NOT_A)
                new_a.append(b)
                new_b.append(b)
            b = inverters[b]
        outs.append(b)
    pruned = BooleanCircuit(
        circuit.num_inputs, new_g, new_a, new_b,
        np.asarray(outs, dtype=np.int64).reshape(circuit.outputs.shape),
    )
    return pruned, pruned.num_gates


def circuit_metrics(circuit: BooleanCircuit) -> CircuitMetrics:
    _, bops = prune(circuit)
    return CircuitMetrics(neurons=circuit.num_gates, bops=bops)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _check_inputs(circuit, bits):
    bits = np.asarray(bits)
    single = bits.ndim == 1
    bits = np.atleast_2d(bits)
    if bits.shape[1] != circuit.num_inputs:
        raise ValueError(f"expected {circuit.num_inputs} input bits, got {bits.shape[1]}")
    return bits.astype(np.uint8), single


def _decode(counts):
    return counts, np.argmax(counts, axis=1)


def eval_reference_values(circuit: BooleanCircuit, bits) -> np.ndarray:
    """Value of every reference, shape (num_refs, samples), via truth-table
    lookups in topological order."""
    bits, _ = _check_inputs(circuit, bits)
    S = len(bits)
    values = np.empty((circuit.num_refs, S), dtype=np.uint8)
    values[CONST0] = 0
    values[CONST1] = 1
    values[2:circuit.first_gate_ref] = bits.T
    first = circuit.first_gate_ref
    for lvl in circuit.levels():
        a = values[circuit.ref_a[lvl]]
        b = values[circuit.ref_b[lvl]]
        row = (a << 1) | b
        values[first + lvl] = gates.TABLE[(circuit.gates[lvl] - 1)[:, None], row]
    return values


def eval_reference(circuit: BooleanCircuit, bits, chunk: int = 2048):
    """Per-class popcounts and predicted classes (ties go to the lowest
    class). Accepts one bit vector or a batch."""
    arr, single = _check_inputs(circuit, bits)
    counts = []
    for start in range(0, len(arr), chunk):
        values = eval_reference_values(circuit, arr[start:start + chunk])
        out = values[circuit.outputs]  # (C, G, S)
        counts.append(out.sum(axis=1, dtype=np.int64).T)
    counts = np.concatenate(counts) if counts else np.empty((0, circuit.num_classes), dtype=np.int64)
    counts, preds = _decode(counts)
    if single:
        return counts[0], int(preds[0])
    return counts, preds


def eval_reference_scalar(circuit: BooleanCircuit, bits):
    """Gate-by-gate evaluation of one sample in plain Python."""
    bits = [int(v) for v in bits]
    if len(bits) != circuit.num_inputs:
        raise ValueError(f"expected {circuit.num_inputs} input bits, got {len(bits)}")
    values = [0, 1] + bits
    for g, a, b in zip(circuit.gates.tolist(), circuit.ref_a.tolist(), circuit.ref_b.tolist()):
        values.append(((g - 1) >> (3 - 2 * values[a] - values[b])) & 1)
    counts = [sum(values[r] for r in group) for group in circuit.outputs.tolist()]
    return counts, int(np.argmax(counts))


def pack_bits(bits) -> np.ndarray:
    """(samples, lines) bits -> (lines, words) uint64; sample s is lane
    ``s % 64`` of word ``s // 64``."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    S, n = bits.shape
    words = -(-S // WORD_BITS)
    padded = np.zeros((n, words * WORD_BITS), dtype=np.uint8)
    padded[:, :S] = bits.T
    packed = np.packbits(padded, axis=1, bitorder="little")
    return packed.view("<u8").astype(np.uint64).reshape(n, words)


def unpack_bits(packed, num_samples: int) -> np.ndarray:
    """Inverse of :func:`pack_bits` for any leading shape: (..., words) ->
    (..., samples)."""
    packed = np.ascontiguousarray(packed, dtype="<u8")
    lead = packed.shape[:-1]
    raw = packed.reshape(-1, packed.shape[-1]).view(np.uint8)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, :num_samples]
    return bits.reshape(*lead, num_samples)


_WORD_OPS = {
    gates.FALSE: lambda a, b: np.zeros_like(a),
    gates.AND: lambda a, b: a & b,
    gates.A_AND_NOT_B: lambda a, b: a & ~b,
    gates.PASS_A: lambda a, b: a.copy(),
    gates.NOT_A_AND_B: lambda a, b: ~a & b,
    gates.PASS_B: lambda a, b: b.copy(),
    gates.XOR: lambda a, b: a ^ b,
    gates.OR: lambda a, b: a | b,
    gates.NOR: lambda a, b: ~(a | b),
    gates.XNOR: lambda a, b: ~(a ^ b),
    gates.NOT_B: lambda a, b: ~b,
    gates.A_OR_NOT_B: lambda a, b: a | ~b,
    gates.NOT_A: lambda a, b: ~a,
    gates.NOT_A_OR_B: lambda a, b: ~a | b,
    gates.NAND: lambda a, b: ~(a & b),
    gates.TRUE: lambda a, b: np.full_like(a, ALL_ONES),
}


def word_op(gate: int, a, b):
    """Bitwise evaluation of one gate on packed words."""
    return _WORD_OPS[gate](np.asarray(a, dtype=np.uint64), np.asarray(b, dtype=np.uint64))


def eval_packed_values(circuit: BooleanCircuit, packed) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint64)
    if packed.ndim != 2 or packed.shape[0] != circuit.num_inputs:
        raise ValueError(f"expected ({circuit.num_inputs}, words) packed inputs, got {packed.shape}")
    words = packed.shape[1]
    values = np.empty((circuit.num_refs, words), dtype=np.uint64)
    values[CONST0] = 0
    values[CONST1] = ALL_ONES
    values[2:circuit.first_gate_ref] = packed
    first = circuit.first_gate_ref
    for lvl in circuit.levels():
        lvl_gates = circuit.gates[lvl]
        for g in np.unique(lvl_gates):
            sel = lvl[lvl_gates == g]
            values[first + sel] = _WORD_OPS[int(g)](values[circuit.ref_a[sel]], values[circuit.ref_b[sel]])
    return values


def eval_bitpacked(circuit: BooleanCircuit, packed, num_samples: int | None = None):
    """Evaluate 64 samples per machine word.

    Returns ``(packed_outputs, counts, predictions)`` where packed_outputs has
    shape (num_classes, group_size, words).
    """
    packed = np.asarray(packed, dtype=np.uint64)
    words = packed.shape[-1] if packed.ndim == 2 else 0
    if num_samples is None:
        num_samples = words * WORD_BITS
    if not (words - 1) * WORD_BITS < num_samples <= words * WORD_BITS:
        raise ValueError(f"{num_samples} samples do not fit {words} packed words")
    values = eval_packed_values(circuit, packed)
    out = values[circuit.outputs]
    bits = unpack_bits(out, num_samples)  # (C, G, S)
    counts = bits.sum(axis=1, dtype=np.int64).T
    counts, preds = _decode(counts)
    return out, counts, preds


def predict_bitpacked(circuit: BooleanCircuit, bits, chunk: int = 8192):
    """Predictions for a (samples, inputs) bit matrix via packed evaluation."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    counts = []
    for start in range(0, len(bits), chunk):
        part = bits[start:start + chunk]
        counts.append(eval_bitpacked(circuit, pack_bits(part), len(part))[1])
    counts = np.concatenate(counts)
    return _decode(counts)


# ---------------------------------------------------------------------------
# equivalence
# ---------------------------------------------------------------------------


@dataclass
class EquivalenceVerdict:
    equivalent: bool
    exhaustive: bool
    vectors_tested: int
    counterexample: np.ndarray | None = None

    def __bool__(self):
        return self.equivalent


def check_equivalence(a: BooleanCircuit, b: BooleanCircuit, num_samples: int = 10000,
                      rng: np.random.Generator | None = None, exhaustive_limit: int = 20,
                      chunk: int = 1 << 16) -> EquivalenceVerdict:
    """Compare every output line of two circuits. Exhaustive up to
    ``exhaustive_limit`` inputs, random vectors otherwise."""
    if a.num_inputs != b.num_inputs or a.outputs.shape != b.outputs.shape:
        raise ValueError("circuits differ in input count or output grouping")
    n = a.num_inputs
    exhaustive = n <= exhaustive_limit
    if exhaustive:
        total = 1 << n
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        total = num_samples
    tested = 0
    for start in range(0, total, chunk):
        count = min(chunk, total - start)
        if exhaustive:
            s = np.arange(start, start + count, dtype=np.int64)
            bits = ((s[:, None] >> np.arange(n)) & 1).astype(np.uint8)
        else:
            bits = rng.integers(0, 2, size=(count, n), dtype=np.uint8)
        packed = pack_bits(bits) if n else np.zeros((0, -(-count // WORD_BITS)), dtype=np.uint64)
        va = eval_packed_values(a, packed)[a.outputs]
        vb = eval_packed_values(b, packed)[b.outputs]
        diff = (va ^ vb).reshape(-1, va.shape[-1])
        if diff.any():
            lanes = unpack_bits(np.bitwise_or.reduce(diff, axis=0)[None, :], count)[0]
            idx = int(np.flatnonzero(lanes)[0])
            return EquivalenceVerdict(False, exhaustive, tested + idx + 1, bits[idx].copy())
        tested += count
    return EquivalenceVerdict(True, exhaustive, tested)


# ---------------------------------------------------------------------------
# netlist format
# ---------------------------------------------------------------------------


def _ref_name(r: int, n: int) -> str:
    if r == CONST0:
        return "c0"
    if r == CONST1:
        return "c1"
    if r < 2 + n:
        return f"i{r - 2}"
    return f"g{r - 2 - n}"


def export_netlist(circuit: BooleanCircuit, sink=None) -> str:
    n = circuit.num_inputs
    buf = io.StringIO()
    buf.write(f"{NETLIST_MAGIC} {NETLIST_VERSION} {n} {circuit.num_gates} "
              f"{circuit.num_classes} {circuit.group_size}\n")
    for j, (g, a, b) in enumerate(zip(circuit.gates.tolist(), circuit.ref_a.tolist(), circuit.ref_b.tolist())):
        buf.write(f"g {j} {g} {_ref_name(a, n)} {_ref_name(b, n)}\n")
    for c, group in enumerate(circuit.outputs.tolist()):
        buf.write(f"o {c} " + " ".join(_ref_name(r, n) for r in group) + "\n")
    text = buf.getvalue()
    if sink is not None:
        if hasattr(sink, "write"):
            sink.write(text)
        else:
            with open(sink, "w", encoding="utf-8") as f:
                f.write(text)
    return text


def _parse_ref(tok: str, n: int, num_gates: int, limit: int | None, lineno: int) -> int:
    if tok == "c0":
        return CONST0
    if tok == "c1":
        return CONST1
    kind, num = tok[:1], tok[1:]
    if kind not in ("i", "g") or not num.isdigit():
        raise NetlistError(f"line {lineno}: malformed reference {tok!r}")
    idx = int(num)
    if kind == "i":
        if idx >= n:
            raise NetlistError(f"line {lineno}: dangling input reference {tok!r}")
        return 2 + idx
    if idx >= num_gates:
        raise NetlistError(f"line {lineno}: dangling gate reference {tok!r}")
    if limit is not None and idx >= limit:
        raise NetlistError(f"line {lineno}: forward reference {tok!r} from gate {limit}")
    return 2 + n + idx


def import_netlist(source) -> BooleanCircuit:
    """Parse ``bnet v1`` text (a string, a path or a readable object)."""
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, encoding="utf-8") as f:
            text = f.read()
    lines = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        raise NetlistError("empty netlist")
    lineno, head = lines[0]
    if len(head) != 6 or head[0] != NETLIST_MAGIC:
        raise NetlistError("missing 'bnet' header")
    if head[1] != NETLIST_VERSION:
        raise NetlistError(f"unsupported netlist version {head[1]!r}")
    try:
        n, m, C, G = (int(v) for v in head[2:])
    except ValueError as e:
        raise NetlistError(f"bad header counts: {e}") from None
    gl = np.zeros(m, dtype=np.int64)
    ra = np.zeros(m, dtype=np.int64)
    rb = np.zeros(m, dtype=np.int64)
    outputs = np.full((C, G), -1, dtype=np.int64)
    seen_gate = np.zeros(m, dtype=bool)
    for lineno, tok in lines[1:]:
        if tok[0] == "g":
            if len(tok) != 5:
                raise NetlistError(f"line {lineno}: gate lines need 5 fields")
            j, g = int(tok[1]), int(tok[2])
            if not 0 <= j < m or seen_gate[j]:
                raise NetlistError(f"line {lineno}: bad or duplicate gate index {j}")
            if not 1 <= g <= gates.NUM_GATES:
                raise NetlistError(f"line {lineno}: gate id {g} outside 1..16")
            gl[j] = g
            ra[j] = _parse_ref(tok[3], n, m, j, lineno)
            rb[j] = _parse_ref(tok[4], n, m, j, lineno)
            seen_gate[j] = True
        elif tok[0] == "o":
            c = int(tok[1])
            if not 0 <= c < C or len(tok) - 2 != G:
                raise NetlistError(f"line {lineno}: bad output line")
            outputs[c] = [_parse_ref(t, n, m, None, lineno) for t in tok[2:]]
        else:
            raise NetlistError(f"line {lineno}: unknown record {tok[0]!r}")
    if not seen_gate.all():
        raise NetlistError("netlist is missing gate lines")
    if (outputs < 0).any():
        raise NetlistError("netlist is missing output lines")
    return BooleanCircuit(n, gl, ra, rb, outputs)


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------


def benchmark(circuit: BooleanCircuit, num_samples: int = 4096, scalar_samples: int = 64,
              rng: np.random.Generator | None = None) -> dict:
    """Samples per second for the scalar reference path and the packed path."""
    rng = rng if rng is not None else np.random.default_rng(0)
    bits = rng.integers(0, 2, size=(num_samples, circuit.num_inputs), dtype=np.uint8)
    t0 = time.perf_counter()
    for row in bits[:scalar_samples]:
        eval_reference_scalar(circuit, row)
    scalar = scalar_samples / max(time.perf_counter() - t0, 1e-12)
    packed = pack_bits(bits)
    t0 = time.perf_counter()
    eval_bitpacked(circuit, packed, num_samples)
    fast = num_samples / max(time.perf_counter() - t0, 1e-12)
    return {"scalar_samples_per_sec": scalar, "packed_samples_per_sec": fast,
            "speedup": fast / scalar}
