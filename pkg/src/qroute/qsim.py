"""Simulation of the 4-qubit key-query attention circuit.

Qubit ordering is little-endian: qubit ``k`` (0-based) is bit ``k`` of the
amplitude index.  Qubits 0, 1 hold the key and qubits 2, 3 the query, so
the circuit's "qubit 1..4" labels map to indices 0..3.  Basis labels such as
``"1001"`` are written qubit 0 first; :func:`basis_index` converts them.

Circuit for one key-query pair::

    |K> = exp(-i a Z0 X1) Ry0(t1) Ry1(t2) |00>
    |Q> = exp(-i b Z2 X3) Ry2(p1) Ry3(p2) |00>
    |Psi> = CNOT(1 -> 2) CNOT(3 -> 0) |K> (x) |Q>

The two CNOTs touch disjoint qubits, so their order is irrelevant.  This
orientation (key qubit 2 drives query qubit 1, query qubit 2 drives key
qubit 1) is the one for which the SWAP-free 6-qubit line embedding is exact.
``"key_controls"`` selects CNOT(1 -> 2), CNOT(0 -> 3) instead; the closed
form covers both, the line embedding is only exact for the default.

Closed form
-----------
Propagating ``X X + Y Y + Z Z`` back through the CNOTs (Clifford
conjugation) turns every term into a product of a key-only and a
query-only Pauli string, so each expectation factorizes over the two
2-qubit states.  For one of those states with angles ``(r1, r2, c)``,
conjugating by ``exp(-i c Z X)`` and evaluating on ``Ry Ry |00>`` gives::

    <X I> = cos2c sin r1        <I X> = sin r2       <Z I> = cos r1
    <Z Z> = cos2c cos r1 cos r2  <I Z> = cos2c cos r2
    <X X> = cos2c sin r1 sin r2  <Y X> = sin2c sin r1
    <Z Y> = -sin2c cos r2        <Y Z> = <X Y> = 0

For the default orientation the surviving products are::

    <S0.S2> = 1/4 cos2a cos2b (sin t1 sin p1 + cos t1 cos t2 cos p1 cos p2)
    <S1.S3> = 1/4 cos2a cos2b (sin t1 sin t2 sin p1 sin p2 + cos t2 cos p2)

and for ``"key_controls"``::

    <S0.S2> = 1/4 cos2a (cos2b sin t1 sin p1 sin p2 + cos t1 cos t2 cos p1)
    <S1.S3> = 1/4 cos2b (sin t2 sin p1 sin p2 + cos2a cos t1 cos t2 cos p2)

Each is a sum of (key factor) x (query factor) terms, tabulated in
``_TERMS`` and checked against the statevector path in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "AngleSet",
    "ExpectationPair",
    "CNOT_CONVENTIONS",
    "DEFAULT_CONVENTION",
    "basis_index",
    "zero_state",
    "apply_1q",
    "apply_2q",
    "apply_ry",
    "apply_rx",
    "apply_zx_exp",
    "apply_cnot",
    "ry_matrix",
    "rx_matrix",
    "prepare_pair",
    "prepare_key",
    "prepare_query",
    "compose_and_entangle",
    "pauli_expectation",
    "spin_spin_expectation",
    "expectation_pair",
    "expectation_pair_closed_form",
    "closed_form_terms",
    "trig_symbols",
    "product",
    "sample_expectation",
    "expectation_pairs_batch",
    "expectation_pairs_closed_form_batch",
    "LINE6_LAYOUT",
    "line6_state",
    "expectation_pair_line6",
]

# (control, target) pairs of the fixed mixing layer, 0-based qubit indices
CNOT_CONVENTIONS: dict[str, tuple[tuple[int, int], tuple[int, int]]] = {
    "embeddable": ((1, 2), (3, 0)),
    "key_controls": ((1, 2), (0, 3)),
}
DEFAULT_CONVENTION = "embeddable"

_I2 = np.eye(2, dtype=complex)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULI = {"I": _I2, "X": _X, "Y": _Y, "Z": _Z}

_CNOT4 = np.array(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex
)


@dataclass(frozen=True)
class AngleSet:
    """Six circuit angles for one key-query pair (radians)."""

    theta1: float
    theta2: float
    alpha: float
    phi1: float
    phi2: float
    beta: float

    @classmethod
    def from_array(cls, values: Sequence[float]) -> AngleSet:
        if len(values) != 6:
            raise ValueError(f"expected 6 angles, got {len(values)}")
        return cls(*(float(v) for v in values))

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = math.pi) -> AngleSet:
        return cls.from_array(rng.uniform(-scale, scale, size=6))

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.theta1, self.theta2, self.alpha, self.phi1, self.phi2, self.beta]
        )

    @property
    def key(self) -> tuple[float, float, float]:
        return (self.theta1, self.theta2, self.alpha)

    @property
    def query(self) -> tuple[float, float, float]:
        return (self.phi1, self.phi2, self.beta)

    def literal_query(self) -> AngleSet:
        """Copy whose query reuses theta2 as its second rotation."""
        return AngleSet(
            self.theta1, self.theta2, self.alpha, self.phi1, self.theta2, self.beta
        )


class ExpectationPair(NamedTuple):
    e13: float
    e24: float


def _check_convention(convention: str) -> None:
    if convention not in CNOT_CONVENTIONS:
        raise ValueError(
            f"unknown CNOT convention {convention!r}; "
            f"expected one of {sorted(CNOT_CONVENTIONS)}"
        )


# -- statevector primitives ---------------------------------------------------


def basis_index(label: str) -> int:
    """Amplitude index of a basis label written qubit 0 first."""
    if not label or set(label) - {"0", "1"}:
        raise ValueError(f"bad basis label {label!r}")
    return sum(1 << k for k, bit in enumerate(label) if bit == "1")


def zero_state(m: int) -> np.ndarray:
    state = np.zeros(2**m, dtype=complex)
    state[0] = 1.0
    return state


def _n_qubits(state: np.ndarray) -> int:
    m = int(state.size).bit_length() - 1
    if 2**m != state.size:
        raise ValueError(f"state length {state.size} is not a power of two")
    return m


def _check_qubit(q: int, m: int) -> None:
    if not 0 <= q < m:
        raise IndexError(f"qubit index {q} out of range for {m} qubits")


def apply_1q(state: np.ndarray, gate: np.ndarray, q: int) -> np.ndarray:
    m = _n_qubits(state)
    _check_qubit(q, m)
    axis = m - 1 - q
    psi = state.reshape((2,) * m)
    psi = np.moveaxis(np.tensordot(gate, psi, axes=([1], [axis])), 0, axis)
    return psi.reshape(-1)


def apply_2q(state: np.ndarray, gate: np.ndarray, a: int, b: int) -> np.ndarray:
    """Apply a 4x4 gate whose row index is ``2 * bit_a + bit_b``."""
    m = _n_qubits(state)
    _check_qubit(a, m)
    _check_qubit(b, m)
    if a == b:
        raise ValueError("two-qubit gate needs distinct qubits")
    ax_a, ax_b = m - 1 - a, m - 1 - b
    psi = np.moveaxis(state.reshape((2,) * m), (ax_a, ax_b), (0, 1))
    shape = psi.shape
    psi = (gate @ psi.reshape(4, -1)).reshape(shape)
    return np.moveaxis(psi, (0, 1), (ax_a, ax_b)).reshape(-1)


def ry_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rx_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


def zx_exp_matrix(angle: float) -> np.ndarray:
    """exp(-i angle Z_a X_b) in the ``2 * bit_a + bit_b`` basis."""
    zx = np.kron(_Z, _X)
    return math.cos(angle) * np.eye(4, dtype=complex) - 1j * math.sin(angle) * zx


def apply_ry(state: np.ndarray, theta: float, q: int) -> np.ndarray:
    return apply_1q(state, ry_matrix(theta), q)


def apply_rx(state: np.ndarray, theta: float, q: int) -> np.ndarray:
    return apply_1q(state, rx_matrix(theta), q)


def apply_zx_exp(state: np.ndarray, angle: float, a: int, b: int) -> np.ndarray:
    return apply_2q(state, zx_exp_matrix(angle), a, b)


def apply_cnot(state: np.ndarray, control: int, target: int) -> np.ndarray:
    return apply_2q(state, _CNOT4, control, target)


# -- the attention circuit ----------------------------------------------------


def prepare_pair(r1: float, r2: float, c: float) -> np.ndarray:
    """exp(-i c Z0 X1) Ry0(r1) Ry1(r2) |00>."""
    state = zero_state(2)
    state = apply_ry(state, r2, 1)
    state = apply_ry(state, r1, 0)
    return apply_zx_exp(state, c, 0, 1)


def prepare_key(theta1: float, theta2: float, alpha: float) -> np.ndarray:
    return prepare_pair(theta1, theta2, alpha)


def prepare_query(phi1: float, phi2: float, beta: float) -> np.ndarray:
    return prepare_pair(phi1, phi2, beta)


def compose_and_entangle(
    key: np.ndarray, query: np.ndarray, convention: str = DEFAULT_CONVENTION
) -> np.ndarray:
    _check_convention(convention)
    if key.shape != (4,) or query.shape != (4,):
        raise ValueError("key and query must be 2-qubit states")
    # little-endian: the key occupies the low bits
    state = np.kron(query, key)
    for control, target in CNOT_CONVENTIONS[convention]:
        state = apply_cnot(state, control, target)
    return state


def pauli_expectation(state: np.ndarray, paulis: dict[int, str]) -> float:
    """<state| P |state> for a Pauli string given as ``{qubit: "X"|"Y"|"Z"}``."""
    out = state
    for q, name in paulis.items():
        out = apply_1q(out, PAULI[name], q)
    return float(np.real(np.vdot(state, out)))


def spin_spin_expectation(state: np.ndarray, a: int, b: int) -> float:
    """<1/4 (X_a X_b + Y_a Y_b + Z_a Z_b)>."""
    m = _n_qubits(state)
    _check_qubit(a, m)
    _check_qubit(b, m)
    if a == b:
        raise ValueError("spin-spin expectation needs two distinct qubits")
    return 0.25 * sum(pauli_expectation(state, {a: p, b: p}) for p in "XYZ")


def _resolve(angles: AngleSet, literal_query: bool) -> AngleSet:
    return angles.literal_query() if literal_query else angles


def expectation_pair(
    angles: AngleSet,
    convention: str = DEFAULT_CONVENTION,
    literal_query: bool = False,
) -> ExpectationPair:
    """Exact <S0.S2>, <S1.S3> from the 16-amplitude statevector."""
    a = _resolve(angles, literal_query)
    state = compose_and_entangle(prepare_key(*a.key), prepare_query(*a.query), convention)
    return ExpectationPair(
        spin_spin_expectation(state, 0, 2), spin_spin_expectation(state, 1, 3)
    )


# -- closed form --------------------------------------------------------------

# Each observable is 1/4 * sum over terms of prod(key symbols) * prod(query
# symbols).  Symbols: s1 = sin r1, c1 = cos r1, s2 = sin r2, c2 = cos r2,
# c2x = cos(2 c) for the (r1, r2, c) angles of that side.
_TERMS: dict[str, dict[str, tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]]] = {
    "embeddable": {
        "e13": ((("c2x", "s1"), ("c2x", "s1")), (("c2x", "c1", "c2"), ("c2x", "c1", "c2"))),
        "e24": ((("c2x", "s1", "s2"), ("c2x", "s1", "s2")), (("c2x", "c2"), ("c2x", "c2"))),
    },
    "key_controls": {
        "e13": ((("c2x", "s1"), ("c2x", "s1", "s2")), (("c2x", "c1", "c2"), ("c1",))),
        "e24": ((("s2",), ("c2x", "s1", "s2")), (("c2x", "c1", "c2"), ("c2x", "c2"))),
    },
}


def closed_form_terms(
    convention: str = DEFAULT_CONVENTION, literal_query: bool = False
) -> dict[str, list[tuple[tuple[str, ...], tuple[str, ...]]]]:
    """Factor table for both observables, without the 1/4 prefactor.

    With ``literal_query`` the query's second rotation is the key's theta2,
    so the query ``s2``/``c2`` factors move to the key side.
    """
    _check_convention(convention)
    table: dict[str, list[tuple[tuple[str, ...], tuple[str, ...]]]] = {}
    for name, terms in _TERMS[convention].items():
        rows = []
        for key_syms, query_syms in terms:
            if literal_query:
                moved = tuple(s for s in query_syms if s in ("s2", "c2"))
                query_syms = tuple(s for s in query_syms if s not in ("s2", "c2"))
                key_syms = key_syms + moved
            rows.append((key_syms, query_syms))
        table[name] = rows
    return table


def trig_symbols(r1: Any, r2: Any, c: Any, sin=np.sin, cos=np.cos) -> dict[str, Any]:
    """Symbol values for one side; ``sin``/``cos`` may be autodiff ops."""
    return {
        "s1": sin(r1),
        "c1": cos(r1),
        "s2": sin(r2),
        "c2": cos(r2),
        "c2x": cos(c * 2.0),
    }


def product(factors: Iterable[Any]) -> Any:
    it = iter(factors)
    out = next(it, 1.0)
    for f in it:
        out = out * f
    return out


def expectation_pair_closed_form(
    angles: AngleSet,
    convention: str = DEFAULT_CONVENTION,
    literal_query: bool = False,
) -> ExpectationPair:
    key = trig_symbols(*angles.key, sin=math.sin, cos=math.cos)
    query = trig_symbols(*angles.query, sin=math.sin, cos=math.cos)
    values = []
    for terms in closed_form_terms(convention, literal_query).values():
        total = 0.0
        for key_syms, query_syms in terms:
            total += product(key[s] for s in key_syms) * product(
                query[s] for s in query_syms
            )
        values.append(0.25 * total)
    return ExpectationPair(*values)


# -- batched evaluation -------------------------------------------------------


def _batch_pair_states(r1: np.ndarray, r2: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``prepare_pair`` for N angle triples at once; returns ``(N, 4)``."""
    a0, a1 = np.cos(r1 / 2), np.sin(r1 / 2)  # Ry(r1) |0> on qubit 0
    b0, b1 = np.cos(r2 / 2), np.sin(r2 / 2)  # Ry(r2) |0> on qubit 1
    # index = bit0 + 2 * bit1
    prod = np.stack([a0 * b0, a1 * b0, a0 * b1, a1 * b1], axis=-1).astype(complex)
    zx = np.kron(_X, _Z)  # Z on qubit 0 (low bit), X on qubit 1, little-endian
    cos, sin = np.cos(c)[:, None], np.sin(c)[:, None]
    return cos * prod - 1j * sin * (prod @ zx.T)


def _batch_cnot(states: np.ndarray, control: int, target: int) -> np.ndarray:
    idx = np.arange(states.shape[-1])
    src = np.where((idx >> control) & 1, idx ^ (1 << target), idx)
    return states[:, src]


def _batch_spin_spin(states: np.ndarray, a: int, b: int) -> np.ndarray:
    idx = np.arange(states.shape[-1])
    probs = np.abs(states) ** 2
    zz = probs @ (1 - 2 * (((idx >> a) ^ (idx >> b)) & 1))
    # XX flips both bits; YY = -(XX) * (phase from Z_a Z_b)
    flipped = states[:, idx ^ ((1 << a) | (1 << b))]
    cross = np.real(np.sum(np.conj(states) * flipped, axis=-1))
    parity = 1 - 2 * (((idx >> a) ^ (idx >> b)) & 1)
    yy = -np.real(np.sum(np.conj(states) * flipped * parity, axis=-1))
    return 0.25 * (cross + yy + zz)


def expectation_pairs_batch(
    angles: np.ndarray, convention: str = DEFAULT_CONVENTION, literal_query: bool = False
) -> np.ndarray:
    """Statevector expectations for ``(N, 6)`` angle rows; returns ``(N, 2)``."""
    _check_convention(convention)
    a = np.asarray(angles, dtype=np.float64).reshape(-1, 6)
    phi2 = a[:, 1] if literal_query else a[:, 4]
    key = _batch_pair_states(a[:, 0], a[:, 1], a[:, 2])
    query = _batch_pair_states(a[:, 3], phi2, a[:, 5])
    states = (query[:, :, None] * key[:, None, :]).reshape(-1, 16)
    for control, target in CNOT_CONVENTIONS[convention]:
        states = _batch_cnot(states, control, target)
    return np.stack([_batch_spin_spin(states, 0, 2), _batch_spin_spin(states, 1, 3)], axis=-1)


def expectation_pairs_closed_form_batch(
    angles: np.ndarray, convention: str = DEFAULT_CONVENTION, literal_query: bool = False
) -> np.ndarray:
    a = np.asarray(angles, dtype=np.float64).reshape(-1, 6)
    key = trig_symbols(a[:, 0], a[:, 1], a[:, 2])
    query = trig_symbols(a[:, 3], a[:, 4], a[:, 5])
    cols = []
    for terms in closed_form_terms(convention, literal_query).values():
        total = np.zeros(a.shape[0])
        for key_syms, query_syms in terms:
            total = total + product(key[s] for s in key_syms) * product(query[s] for s in query_syms)
        cols.append(0.25 * total)
    return np.stack(cols, axis=-1)


# -- shot sampling ------------------------------------------------------------


def _rotate_to_basis(state: np.ndarray, basis: str, qubits: Iterable[int]) -> np.ndarray:
    # Ry(-pi/2) maps X to Z; Rx(pi/2) maps Y to Z
    for q in qubits:
        if basis == "X":
            state = apply_ry(state, -math.pi / 2, q)
        elif basis == "Y":
            state = apply_rx(state, math.pi / 2, q)
        elif basis != "Z":
            raise ValueError(f"unknown basis {basis!r}")
    return state


def sample_expectation(
    angles: AngleSet,
    shots: int,
    rng: np.random.Generator,
    convention: str = DEFAULT_CONVENTION,
    literal_query: bool = False,
) -> ExpectationPair:
    """Shot-noise estimate from three basis runs of ``shots`` samples each.

    Within a run both pairs are read from the same bitstrings.
    """
    if shots <= 0:
        raise ValueError(f"shots must be positive, got {shots}")
    a = _resolve(angles, literal_query)
    state = compose_and_entangle(prepare_key(*a.key), prepare_query(*a.query), convention)
    idx = np.arange(16)
    bits = [(idx >> q) & 1 for q in range(4)]
    sign13 = 1 - 2 * (bits[0] ^ bits[2])
    sign24 = 1 - 2 * (bits[1] ^ bits[3])
    e13 = e24 = 0.0
    for basis in "XYZ":
        probs = np.abs(_rotate_to_basis(state, basis, range(4))) ** 2
        counts = rng.multinomial(shots, probs / probs.sum())
        e13 += float(counts @ sign13) / shots
        e24 += float(counts @ sign24) / shots
    return ExpectationPair(0.25 * e13, 0.25 * e24)


# -- SWAP-free 6-qubit line embedding -----------------------------------------

# Line positions 0..5: u~1q, u2q, u1k, u2k, u1q, u~2q.  Query copy A sits on
# (0, 1), the key on (2, 3), query copy B on (4, 5).
LINE6_LAYOUT = {
    "aux_q1": 0,
    "q2": 1,
    "k1": 2,
    "k2": 3,
    "q1": 4,
    "aux_q2": 5,
}
# circuit qubit (0..3) -> line position for the mixing layer
_LINE6_MIXING_SITE = {0: 2, 1: 3, 2: 4, 3: 1}
LINE6_MEASURED = ((2, 4), (3, 1))


def line6_gates(
    angles: AngleSet,
    convention: str = DEFAULT_CONVENTION,
    literal_query: bool = False,
) -> list[tuple[str, tuple[int, ...], float | None]]:
    """Gate list of the 6-qubit line circuit on positions 0..5.

    Records are ``(name, qubits, angle)`` with names ``ry``, ``zx_exp``
    and ``cnot``; every two-qubit gate acts on neighbouring positions.
    """
    _check_convention(convention)
    a = _resolve(angles, literal_query)
    gates: list[tuple[str, tuple[int, ...], float | None]] = []
    for (r1, r2, c), (p1, p2) in (
        (a.query, (0, 1)),
        (a.key, (2, 3)),
        (a.query, (4, 5)),
    ):
        gates.append(("ry", (p2,), r2))
        gates.append(("ry", (p1,), r1))
        gates.append(("zx_exp", (p1, p2), c))
    for control, target in CNOT_CONVENTIONS[convention]:
        gates.append(
            ("cnot", (_LINE6_MIXING_SITE[control], _LINE6_MIXING_SITE[target]), None)
        )
    return gates


def run_gates(
    gates: Iterable[tuple[str, tuple[int, ...], float | None]], m: int
) -> np.ndarray:
    state = zero_state(m)
    for name, qubits, angle in gates:
        if name == "ry":
            state = apply_ry(state, angle, *qubits)
        elif name == "rx":
            state = apply_rx(state, angle, *qubits)
        elif name == "zx_exp":
            state = apply_zx_exp(state, angle, *qubits)
        elif name == "cnot":
            state = apply_cnot(state, *qubits)
        else:
            raise ValueError(f"unknown gate {name!r}")
    return state


def line6_state(
    angles: AngleSet,
    convention: str = DEFAULT_CONVENTION,
    literal_query: bool = False,
) -> np.ndarray:
    return run_gates(line6_gates(angles, convention, literal_query), 6)


def expectation_pair_line6(
    angles: AngleSet,
    convention: str = DEFAULT_CONVENTION,
    literal_query: bool = False,
) -> ExpectationPair:
    """Expectations read from (u1k, u1q) and (u2k, u2q) of the line circuit.

    Exact for the default convention only.  Under ``"key_controls"`` the
    query copies see CNOT targets on both sides, and correlations the
    4-qubit circuit keeps inside one query state get split across copies.
    """
    state = line6_state(angles, convention, literal_query)
    (a1, b1), (a2, b2) = LINE6_MEASURED
    return ExpectationPair(
        spin_spin_expectation(state, a1, b1), spin_spin_expectation(state, a2, b2)
    )
