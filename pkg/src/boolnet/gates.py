"""The sixteen two-input Boolean functions.

Gates are identified by an integer id in 1..16. The truth table of gate ``g``
is the 4-bit integer ``g - 1``, most significant bit first, with rows ordered
by input pair (a, b) = (0,0), (0,1), (1,0), (1,1):

    id  table  name          id  table  name
     1  0000   FALSE          9  1000   NOR
     2  0001   AND           10  1001   XNOR
     3  0010   A AND NOT B   11  1010   NOT B
     4  0011   A             12  1011   A OR NOT B
     5  0100   NOT A AND B   13  1100   NOT A
     6  0101   B             14  1101   NOT A OR B
     7  0110   XOR           15  1110   NAND
     8  0111   OR            16  1111   TRUE

Every operation here is a lookup or an interpolation over that table.
"""

from __future__ import annotations

import enum

import numpy as np

NUM_GATES = 16

FALSE, AND, A_AND_NOT_B, PASS_A, NOT_A_AND_B, PASS_B, XOR, OR = range(1, 9)
NOR, XNOR, NOT_B, A_OR_NOT_B, NOT_A, NOT_A_OR_B, NAND, TRUE = range(9, 17)

GATE_NAMES = (
    "FALSE", "AND", "A_AND_NOT_B", "A", "NOT_A_AND_B", "B", "XOR", "OR",
    "NOR", "XNOR", "NOT_B", "A_OR_NOT_B", "NOT_A", "NOT_A_OR_B", "NAND", "TRUE",
)


class GateClass(enum.Enum):
    CONST0 = "const0"
    CONST1 = "const1"
    PASS_A = "pass_a"
    PASS_B = "pass_b"
    NOT_A = "not_a"
    NOT_B = "not_b"
    NONTRIVIAL = "nontrivial"


def _check(gate: int) -> int:
    g = int(gate)
    if not 1 <= g <= NUM_GATES:
        raise ValueError(f"gate id must be in 1..16, got {gate!r}")
    return g


def truth_table(gate: int) -> int:
    """4-bit truth table of ``gate``; row (0,0) is the most significant bit."""
    return _check(gate) - 1


def gate_from_table(table: int) -> int:
    if not 0 <= table < 16:
        raise ValueError(f"truth table must be a 4-bit integer, got {table!r}")
    return table + 1


def truth_bits(gate: int) -> tuple[int, int, int, int]:
    """Outputs for rows (0,0), (0,1), (1,0), (1,1)."""
    t = truth_table(gate)
    return ((t >> 3) & 1, (t >> 2) & 1, (t >> 1) & 1, t & 1)


# (16, 4) table of outputs, row index = 2*a + b; and the multilinear
# coefficients f(x, y) = c0 + ca*x + cb*y + cab*x*y, all indexed by gate - 1.
TABLE = np.array([truth_bits(g) for g in range(1, NUM_GATES + 1)], dtype=np.uint8)
_T = TABLE.astype(np.float64)
COEF_0 = _T[:, 0].copy()
COEF_A = _T[:, 2] - _T[:, 0]
COEF_B = _T[:, 1] - _T[:, 0]
COEF_AB = _T[:, 0] - _T[:, 1] - _T[:, 2] + _T[:, 3]


def eval_boolean(gate: int, a: int, b: int) -> int:
    if a not in (0, 1) or b not in (0, 1):
        raise ValueError("Boolean gate inputs must be 0 or 1")
    return (truth_table(gate) >> (3 - (2 * a + b))) & 1


def _check_unit(v):
    arr = np.asarray(v, dtype=np.float64)
    if np.any(~((arr >= 0.0) & (arr <= 1.0))):
        raise ValueError("relaxed gate inputs must lie in [0, 1]")
    return arr


def eval_relaxed(gate: int, x, y):
    """Multilinear extension of the gate's truth table.

    Equals the probability that the gate outputs 1 when its inputs are
    independent Bernoulli variables with means ``x`` and ``y``.
    """
    i = _check(gate) - 1
    x = _check_unit(x)
    y = _check_unit(y)
    out = COEF_0[i] + COEF_A[i] * x + COEF_B[i] * y + COEF_AB[i] * x * y
    return float(out) if out.ndim == 0 else out


def relaxed_partials(gate: int, x, y):
    """(d/dx, d/dy) of :func:`eval_relaxed`."""
    i = _check(gate) - 1
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = COEF_A[i] + COEF_AB[i] * y
    dy = COEF_B[i] + COEF_AB[i] * x
    if dx.ndim == 0:
        return float(dx), float(dy)
    return dx, dy


_CLASS_BY_TABLE = {
    0b0000: GateClass.CONST0,
    0b1111: GateClass.CONST1,
    0b0011: GateClass.PASS_A,
    0b0101: GateClass.PASS_B,
    0b1100: GateClass.NOT_A,
    0b1010: GateClass.NOT_B,
}


def classify_gate(gate: int) -> GateClass:
    return _CLASS_BY_TABLE.get(truth_table(gate), GateClass.NONTRIVIAL)


def is_trivial(gate: int) -> bool:
    return classify_gate(gate) is not GateClass.NONTRIVIAL


def absorb_input_negation(gate: int, slot: str) -> int:
    """Gate ``g'`` with ``g'(x, y) == gate(not x, y)`` (slot ``"first"``)
    or ``gate(x, not y)`` (slot ``"second"``)."""
    a0, a1, a2, a3 = truth_bits(gate)
    if slot == "first":
        rows = (a2, a3, a0, a1)
    elif slot == "second":
        rows = (a1, a0, a3, a2)
    else:
        raise ValueError(f"slot must be 'first' or 'second', got {slot!r}")
    return gate_from_table((rows[0] << 3) | (rows[1] << 2) | (rows[2] << 1) | rows[3])


def negate_output(gate: int) -> int:
    """Gate computing ``not gate(x, y)``."""
    return gate_from_table(0b1111 ^ truth_table(gate))
