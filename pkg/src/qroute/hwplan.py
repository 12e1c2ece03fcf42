"""SWAP-free placement of the attention circuit on a device connectivity graph.

Each 4-qubit key/query circuit is lowered to a 6-qubit *line* that carries
two copies of the query (see :func:`qroute.qsim.line6_gates`), so every
two-qubit gate acts on physically coupled qubits.  Several lines run side by
side in one device call; all circuits of a call share one measurement basis.

Circuit text format (one instruction per line, ``#`` starts a comment)::

    ry q<idx> <angle>
    rx q<idx> <angle>
    zxexp q<a> q<b> <angle>
    cnot q<ctrl> q<tgt>
    measure q<a> q<b> basis=<X|Y|Z>

``q<idx>`` are physical qubit ids and angles are written with ``repr``
(shortest round-tripping float).  ``rx`` only appears as the Y-basis change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .qsim import (
    DEFAULT_CONVENTION,
    LINE6_MEASURED,
    AngleSet,
    ExpectationPair,
    apply_cnot,
    apply_rx,
    apply_ry,
    apply_zx_exp,
    line6_gates,
    spin_spin_expectation,
    zero_state,
)

__all__ = [
    "ConnectivityGraph",
    "LinePlacement",
    "CircuitIR",
    "ScheduledCircuit",
    "RunPlan",
    "BASES",
    "DEFAULT_SHOTS",
    "enumerate_line_placements",
    "build_run_plan",
    "lower_circuit",
    "simulate_ir",
    "ir_expectation_pair",
    "format_circuit",
    "export_plan",
    "octagonal_lattice",
    "load_graph",
]

BASES = ("X", "Y", "Z")
DEFAULT_SHOTS = 500


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ConnectivityGraph:
    qubits: tuple[int, ...]
    edges: frozenset[tuple[int, int]]

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]], qubits: Iterable[int] = ()) -> ConnectivityGraph:
        norm = set()
        ids = set(qubits)
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise PlanError(f"self-loop on qubit {a}")
            norm.add((min(a, b), max(a, b)))
            ids.update((a, b))
        return cls(tuple(sorted(ids)), frozenset(norm))

    def __post_init__(self):
        ids = set(self.qubits)
        for a, b in self.edges:
            if a not in ids or b not in ids:
                raise PlanError(f"edge ({a}, {b}) references an unknown qubit")

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges

    def neighbors(self, q: int) -> list[int]:
        return sorted({b for a, b in self.edges if a == q} | {a for a, b in self.edges if b == q})

    def adjacency(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {q: [] for q in self.qubits}
        for a, b in sorted(self.edges):
            adj[a].append(b)
            adj[b].append(a)
        return {q: sorted(v) for q, v in adj.items()}


@dataclass(frozen=True)
class LinePlacement:
    """Physical qubits for line positions 0..5 (aux query, query, key, key, query, aux query)."""

    qubits: tuple[int, ...]

    def __post_init__(self):
        if len(self.qubits) != 6 or len(set(self.qubits)) != 6:
            raise PlanError(f"a placement needs 6 distinct qubits, got {self.qubits}")

    def check(self, graph: ConnectivityGraph) -> None:
        for a, b in zip(self.qubits, self.qubits[1:]):
            if not graph.has_edge(a, b):
                raise PlanError(f"placement {self.qubits}: qubits {a} and {b} are not coupled")


def octagonal_lattice(rings: int = 4, drop: Sequence[int] = ()) -> ConnectivityGraph:
    """Rigetti-style lattice: 8-qubit rings ``10r + k`` coupled to the next
    ring by edges ``(10r+1, 10(r+1)+6)`` and ``(10r+2, 10(r+1)+5)``."""
    edges = []
    for r in range(rings):
        base = 10 * r
        edges += [(base + k, base + (k + 1) % 8) for k in range(8)]
        if r + 1 < rings:
            nxt = 10 * (r + 1)
            edges += [(base + 1, nxt + 6), (base + 2, nxt + 5)]
    dropped = set(drop)
    return ConnectivityGraph.from_edges((a, b) for a, b in edges if a not in dropped and b not in dropped)


def load_graph(path: str | Path) -> ConnectivityGraph:
    """Edge-list text: one ``a b`` pair per line, ``#`` comments."""
    path = Path(path)
    edges = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise PlanError(f"{path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 2:
            raise PlanError(f"{path}:{lineno}: expected 'a b', got {line!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise PlanError(f"{path}:{lineno}: qubit ids must be integers") from None
    return ConnectivityGraph.from_edges(edges)


def enumerate_line_placements(graph: ConnectivityGraph, length: int = 6) -> list[LinePlacement]:
    """Greedy packing of vertex-disjoint simple paths.

    Paths grow from the free qubit with the fewest free neighbours (ties by
    id) and extend towards the neighbour with the fewest free neighbours,
    backtracking when stuck.  Peeling from the sparse edge of the graph
    leaves its well-connected core for later paths.  Deterministic.
    """
    adj = graph.adjacency()
    free = set(graph.qubits)

    def degree(q: int) -> int:
        return sum(1 for x in adj[q] if x in free)

    def grow(path: list[int]) -> list[int] | None:
        if len(path) == length:
            return path
        options = sorted((x for x in adj[path[-1]] if x in free and x not in path), key=lambda x: (degree(x), x))
        for x in options:
            found = grow(path + [x])
            if found:
                return found
        return None

    out: list[LinePlacement] = []
    while True:
        starts = sorted(free, key=lambda q: (degree(q), q))
        path = None
        for s in starts:
            path = grow([s])
            if path:
                break
        if not path:
            return out
        out.append(LinePlacement(tuple(path)))
        free.difference_update(path)


# -- run plans --------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduledCircuit:
    slot: int
    layer: int
    head: int
    key_node: int
    query_node: int
    angles: AngleSet | None = None

    @property
    def pair_id(self) -> str:
        return f"L{self.layer}H{self.head}k{self.key_node}q{self.query_node}"


@dataclass
class RunPlan:
    n_nodes: int
    heads_per_layer: int
    n_layers: int
    parallel_slots: int
    shots: int
    placements: list[LinePlacement]
    schedule: list[tuple[int, str, list[ScheduledCircuit]]] = field(default_factory=list)

    @property
    def circuit_count(self) -> int:
        return self.n_nodes**2 * self.heads_per_layer * self.n_layers

    @property
    def basis_run_count(self) -> int:
        return 3 * self.circuit_count

    @property
    def call_count(self) -> int:
        return len(self.schedule)


def build_run_plan(
    n_nodes: int,
    heads: int,
    layers: int,
    slots: int,
    shots: int = DEFAULT_SHOTS,
    placements: Sequence[LinePlacement] | None = None,
    angles: dict[tuple[int, int, int, int], AngleSet] | None = None,
) -> RunPlan:
    """Pack every (layer, head, key, query) circuit into calls of ``slots``
    parallel lines; each chunk of circuits is run once per basis X, Y, Z."""
    for name, value in (("n_nodes", n_nodes), ("heads", heads), ("layers", layers), ("slots", slots), ("shots", shots)):
        if value <= 0:
            raise PlanError(f"{name} must be positive, got {value}")
    if placements is not None and len(placements) < slots:
        raise PlanError(f"{slots} slots requested but only {len(placements)} placements given")
    chosen = list(placements[:slots]) if placements is not None else []
    jobs = [
        (layer, head, i, j)
        for layer in range(layers)
        for head in range(heads)
        for i in range(n_nodes)
        for j in range(n_nodes)
    ]
    plan = RunPlan(n_nodes, heads, layers, slots, shots, chosen)
    call = 0
    for start in range(0, len(jobs), slots):
        chunk = jobs[start:start + slots]
        circuits = [
            ScheduledCircuit(s, *job, angles.get(job) if angles else None) for s, job in enumerate(chunk)
        ]
        for basis in BASES:
            plan.schedule.append((call, basis, circuits))
            call += 1
    return plan


# -- lowering -----------------------------------------------------------------------


@dataclass(frozen=True)
class CircuitIR:
    gates: tuple[tuple[str, tuple[int, ...], float | None], ...]
    measured: tuple[tuple[int, int], ...]
    basis: str
    shots: int


def lower_circuit(
    angles: AngleSet,
    placement: LinePlacement,
    basis: str,
    shots: int = DEFAULT_SHOTS,
    convention: str = DEFAULT_CONVENTION,
    graph: ConnectivityGraph | None = None,
) -> CircuitIR:
    """Map the line circuit onto ``placement`` and append basis changes."""
    if basis not in BASES:
        raise PlanError(f"basis must be one of {BASES}, got {basis!r}")
    if graph is not None:
        placement.check(graph)
    phys = placement.qubits
    gates = []
    for name, qubits, angle in line6_gates(angles, convention):
        if len(qubits) == 2 and abs(qubits[0] - qubits[1]) != 1:
            raise AssertionError(f"line gate {name} on non-neighbouring positions {qubits}")
        gates.append((name, tuple(phys[q] for q in qubits), angle))
    measured = tuple((phys[a], phys[b]) for a, b in LINE6_MEASURED)
    for q in sorted({q for pair in measured for q in pair}):
        if basis == "X":
            gates.append(("ry", (q,), -math.pi / 2))
        elif basis == "Y":
            gates.append(("rx", (q,), math.pi / 2))
    return CircuitIR(tuple(gates), measured, basis, shots)


def _ir_qubits(ir: CircuitIR) -> list[int]:
    return sorted({q for _, qs, _ in ir.gates for q in qs} | {q for p in ir.measured for q in p})


def simulate_ir(ir: CircuitIR) -> tuple[np.ndarray, dict[int, int]]:
    """Statevector after the IR; physical ids are compacted to 0..m-1."""
    index = {q: k for k, q in enumerate(_ir_qubits(ir))}
    state = zero_state(len(index))
    for name, qubits, angle in ir.gates:
        local = [index[q] for q in qubits]
        if name == "ry":
            state = apply_ry(state, angle, *local)
        elif name == "rx":
            state = apply_rx(state, angle, *local)
        elif name == "zx_exp":
            state = apply_zx_exp(state, angle, *local)
        elif name == "cnot":
            state = apply_cnot(state, *local)
        else:
            raise PlanError(f"unknown gate {name!r}")
    return state, index


def ir_expectation_pair(angles: AngleSet, placement: LinePlacement, convention: str = DEFAULT_CONVENTION) -> ExpectationPair:
    """Exact expectations from interpreting the Z-basis IR."""
    ir = lower_circuit(angles, placement, "Z", convention=convention)
    state, index = simulate_ir(ir)
    (a1, b1), (a2, b2) = ir.measured
    return ExpectationPair(
        spin_spin_expectation(state, index[a1], index[b1]),
        spin_spin_expectation(state, index[a2], index[b2]),
    )


def ir_pair_correlation(ir: CircuitIR) -> tuple[float, float]:
    """<Z_a Z_b> of each measured pair after the basis change, i.e. the
    estimate of <P_a P_b> for the IR's basis P."""
    state, index = simulate_ir(ir)
    probs = np.abs(state) ** 2
    idx = np.arange(probs.size)
    out = []
    for a, b in ir.measured:
        sign = 1 - 2 * (((idx >> index[a]) ^ (idx >> index[b])) & 1)
        out.append(float(probs @ sign))
    return out[0], out[1]


# -- export -----------------------------------------------------------------------------


def format_circuit(ir: CircuitIR) -> list[str]:
    lines = []
    for name, qubits, angle in ir.gates:
        if name == "ry" or name == "rx":
            lines.append(f"{name} q{qubits[0]} {angle!r}")
        elif name == "zx_exp":
            lines.append(f"zxexp q{qubits[0]} q{qubits[1]} {angle!r}")
        elif name == "cnot":
            lines.append(f"cnot q{qubits[0]} q{qubits[1]}")
        else:
            raise PlanError(f"gate {name!r} has no text form")
    lines += [f"measure q{a} q{b} basis={ir.basis}" for a, b in ir.measured]
    return lines


def _placeholder_angles(c: ScheduledCircuit) -> AngleSet:
    return AngleSet(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def export_plan(plan: RunPlan, directory: str | Path, convention: str = DEFAULT_CONVENTION) -> list[Path]:
    """Write ``call_<k>.circ`` per call plus ``manifest.txt``.

    Circuits without attached angles are exported with zero angles so the
    gate structure can be inspected; attach angles via ``build_run_plan``.
    """
    if plan.call_count == 0:
        raise PlanError("plan has no calls")
    if len(plan.placements) < plan.parallel_slots:
        raise PlanError(
            f"plan needs {plan.parallel_slots} placements but has {len(plan.placements)}"
        )
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PlanError(f"{directory}: {exc.strerror}") from None
    width = len(str(plan.call_count - 1))
    written = []
    manifest = [
        "format=qroute-plan-1",
        f"n_nodes={plan.n_nodes}",
        f"heads_per_layer={plan.heads_per_layer}",
        f"n_layers={plan.n_layers}",
        f"parallel_slots={plan.parallel_slots}",
        f"shots={plan.shots}",
        f"circuit_count={plan.circuit_count}",
        f"basis_run_count={plan.basis_run_count}",
        f"call_count={plan.call_count}",
        f"cnot_convention={convention}",
    ]
    for s, p in enumerate(plan.placements):
        manifest.append(f"placement.{s}={','.join(map(str, p.qubits))}")
    for call, basis, circuits in plan.schedule:
        name = f"call_{call:0{width}d}.circ"
        lines = [f"# call {call} basis={basis} shots={plan.shots}"]
        for c in circuits:
            placement = plan.placements[c.slot]
            ir = lower_circuit(c.angles or _placeholder_angles(c), placement, basis, plan.shots, convention)
            lines.append(f"# slot {c.slot} {c.pair_id} placement={','.join(map(str, placement.qubits))}")
            lines += format_circuit(ir)
        path = directory / name
        try:
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as exc:
            raise PlanError(f"{path}: {exc.strerror}") from None
        written.append(path)
        manifest.append(
            f"call.{call}={name} basis={basis} circuits={';'.join(c.pair_id for c in circuits)}"
        )
    mpath = directory / "manifest.txt"
    mpath.write_text("\n".join(manifest) + "\n", encoding="utf-8")
    written.append(mpath)
    return written
