"""Independent reference implementations used only by the tests.

Everything here is written from first principles with dense matrices,
explicit loops or brute force, and shares no code with ``qroute``.
"""

from __future__ import annotations

import itertools
import math
from functools import reduce

import numpy as np

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
P0 = np.array([[1, 0], [0, 0]], dtype=complex)
P1 = np.array([[0, 0], [0, 1]], dtype=complex)
PAULIS = {"X": X, "Y": Y, "Z": Z}


def ry(t: float) -> np.ndarray:
    return np.array([[math.cos(t / 2), -math.sin(t / 2)], [math.sin(t / 2), math.cos(t / 2)]], dtype=complex)


def embed(ops: dict[int, np.ndarray], m: int) -> np.ndarray:
    """Dense operator on ``m`` qubits; qubit k is bit k (kron order q_{m-1} .. q_0)."""
    return reduce(np.kron, [ops.get(q, I2) for q in reversed(range(m))])


def cnot(control: int, target: int, m: int) -> np.ndarray:
    return embed({control: P0}, m) + embed({control: P1, target: X}, m)


def zx_exp(c: float, a: int, b: int, m: int) -> np.ndarray:
    """exp(-i c Z_a X_b) via its Taylor-free closed form (ZX squares to 1)."""
    zx = embed({a: Z, b: X}, m)
    return math.cos(c) * np.eye(2**m) - 1j * math.sin(c) * zx


def spin_spin(a: int, b: int, m: int) -> np.ndarray:
    return 0.25 * sum(embed({a: P, b: P}, m) for P in (X, Y, Z))


def attention_state(angles, cnots) -> np.ndarray:
    """Key on qubits 0, 1; query on 2, 3; ``cnots`` as (control, target) pairs."""
    t1, t2, a, p1, p2, b = angles
    U = np.eye(16, dtype=complex)
    for G in (
        embed({0: ry(t1), 1: ry(t2), 2: ry(p1), 3: ry(p2)}, 4),
        zx_exp(a, 0, 1, 4),
        zx_exp(b, 2, 3, 4),
    ):
        U = G @ U
    for c, t in cnots:
        U = cnot(c, t, 4) @ U
    psi0 = np.zeros(16, dtype=complex)
    psi0[0] = 1
    return U @ psi0


def expectation(state: np.ndarray, op: np.ndarray) -> float:
    return float(np.real(np.conj(state) @ op @ state))


def attention_pair(angles, cnots=((1, 2), (3, 0))) -> tuple[float, float]:
    psi = attention_state(angles, cnots)
    return expectation(psi, spin_spin(0, 2, 4)), expectation(psi, spin_spin(1, 3, 4))


# -- routing ---------------------------------------------------------------------------


def all_routes(coords, demands, max_len: int = 40):
    """Every legal (route, step-probability-free) action sequence of a tiny
    instance by brute-force search over the stated mask rules."""
    coords = np.asarray(coords, float)
    out = []

    def rec(route, cur, cap, res):
        if cur == 0 and len(route) > 1 and all(r <= 0 for r in res):
            out.append(tuple(route))
            return
        if len(route) > max_len:
            raise RuntimeError("route search exceeded max_len")
        n = len(res) + 1
        for a in range(n):
            if a == cur:
                continue
            if a > 0 and (res[a - 1] <= 0 or cap <= 0):
                continue
            if a == 0:
                rec(route + [0], 0, 1.0, res)
            else:
                r = list(res)
                take = min(cap, r[a - 1])
                r[a - 1] = r[a - 1] - take if r[a - 1] - take > 1e-12 else 0.0
                ncap = cap - take if cap - take > 1e-12 else 0.0
                rec(route + [a], a, ncap, r)

    rec([0], 0, 1.0, list(demands))
    return out


def route_length(coords, route) -> float:
    coords = np.asarray(coords, float)
    return float(sum(np.hypot(*(coords[a] - coords[b])) for a, b in zip(route, route[1:])))


def brute_force_optimum(coords, demands) -> float:
    return min(route_length(coords, r) for r in all_routes(coords, demands))


def permutations_of(n: int):
    return itertools.permutations(range(n))
