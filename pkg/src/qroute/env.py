"""Split-delivery VRP instances and single-truck dynamics.

Node 0 is the depot; truck capacity is normalized to 1 and demands are
fractions of it.  The mask/step rules are written once as array functions
(``mask_arrays`` / ``step_arrays``) that work on any leading batch shape;
the per-state API and the batched rollout in :mod:`qroute.policy` both use
them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "InstanceFormatError",
    "ContractError",
    "Instance",
    "UniformIntegers",
    "UniformReal",
    "GeneratorSpec",
    "RouteState",
    "generate_instance",
    "subsample",
    "load_csv",
    "write_csv",
    "initial_state",
    "legal_mask",
    "step",
    "is_complete",
    "route_cost",
    "mask_arrays",
    "step_arrays",
    "episode_step_limit",
]


class ConfigError(ValueError):
    """Invalid configuration or generator specification."""


class InstanceFormatError(ValueError):
    """Malformed instance file; the message carries the line number."""


class ContractError(RuntimeError):
    """An operation was called outside its precondition."""


@dataclass(frozen=True, eq=False)
class Instance:
    depot_xy: np.ndarray
    supplier_xy: np.ndarray
    demands: np.ndarray

    def __post_init__(self):
        depot = np.asarray(self.depot_xy, dtype=np.float64).reshape(2)
        sup = np.asarray(self.supplier_xy, dtype=np.float64).reshape(-1, 2)
        dem = np.asarray(self.demands, dtype=np.float64).reshape(-1)
        if sup.shape[0] < 1:
            raise ConfigError("an instance needs at least one supplier")
        if dem.shape[0] != sup.shape[0]:
            raise ConfigError(
                f"{sup.shape[0]} suppliers but {dem.shape[0]} demands"
            )
        if not (np.all(np.isfinite(depot)) and np.all(np.isfinite(sup))):
            raise ConfigError("coordinates must be finite")
        if not np.all(dem > 0) or not np.all(np.isfinite(dem)):
            raise ConfigError("demands must be positive and finite")
        object.__setattr__(self, "depot_xy", depot)
        object.__setattr__(self, "supplier_xy", sup)
        object.__setattr__(self, "demands", dem)

    @property
    def n(self) -> int:
        return self.supplier_xy.shape[0] + 1

    @property
    def coords(self) -> np.ndarray:
        return np.vstack([self.depot_xy, self.supplier_xy])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            np.array_equal(self.depot_xy, other.depot_xy)
            and np.array_equal(self.supplier_xy, other.supplier_xy)
            and np.array_equal(self.demands, other.demands)
        )

    __hash__ = None  # type: ignore[assignment]

    def permuted(self, order: Sequence[int]) -> Instance:
        """Relabel suppliers: new supplier ``k`` is old supplier ``order[k]``."""
        order = np.asarray(order)
        return Instance(self.depot_xy, self.supplier_xy[order], self.demands[order])


@dataclass(frozen=True)
class UniformIntegers:
    lo: int = 1
    hi: int = 23
    scale: float = 10.0


@dataclass(frozen=True)
class UniformReal:
    lo: float = 0.0
    hi: float = 2.5


@dataclass(frozen=True)
class GeneratorSpec:
    n_nodes: int = 15
    demand_kind: UniformIntegers | UniformReal = field(default_factory=UniformIntegers)
    box: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        kind = self.demand_kind
        if self.n_nodes < 2:
            raise ConfigError(f"n_nodes must be >= 2, got {self.n_nodes}")
        if not self.box > 0:
            raise ConfigError(f"box must be positive, got {self.box}")
        if kind.lo > kind.hi:
            raise ConfigError(f"demand range lo={kind.lo} > hi={kind.hi}")
        if isinstance(kind, UniformIntegers):
            if kind.scale <= 0:
                raise ConfigError(f"demand scale must be positive, got {kind.scale}")
            if kind.lo < 1:
                raise ConfigError("integer demands must start at 1 or above")
        elif isinstance(kind, UniformReal):
            if kind.lo < 0:
                raise ConfigError("real demand range must be non-negative")
        else:
            raise ConfigError(f"unknown demand kind {kind!r}")


def generate_instance(spec: GeneratorSpec, rng: np.random.Generator | None = None) -> Instance:
    """Depot and suppliers uniform on ``[0, box]^2`` with random demands.

    Without ``rng`` a generator seeded from ``spec.seed`` is used.
    """
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    m = spec.n_nodes - 1
    xy = rng.uniform(0.0, spec.box, size=(spec.n_nodes, 2))
    kind = spec.demand_kind
    if isinstance(kind, UniformIntegers):
        demands = rng.integers(kind.lo, kind.hi, size=m, endpoint=True) / kind.scale
    else:
        demands = rng.uniform(kind.lo, kind.hi, size=m) if kind.hi > kind.lo else np.full(m, kind.lo)
        # a draw of exactly 0 would be an invalid supplier
        demands = np.where(demands > 0, demands, np.nextafter(0.0, 1.0))
    return Instance(xy[0], xy[1:], demands)


def subsample(pool: Instance, k: int, rng: np.random.Generator) -> Instance:
    """``k`` suppliers drawn without replacement; the depot is kept."""
    m = pool.n - 1
    if k < 1 or k > m:
        raise ValueError(f"cannot draw {k} suppliers from a pool of {m}")
    if k == m:
        return pool
    pick = rng.choice(m, size=k, replace=False)
    return Instance(pool.depot_xy, pool.supplier_xy[pick], pool.demands[pick])


# -- CSV ----------------------------------------------------------------------


def load_csv(path: str | Path) -> Instance:
    """Read ``id,x,y,demand`` with a ``# capacity=<real>`` comment line.

    Row id 0 is the depot (empty demand); demands are divided by capacity.
    """
    path = Path(path)
    capacity: float | None = None
    header: list[str] | None = None
    depot = None
    rows: list[tuple[int, float, float, float]] = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                body = text[1:].strip()
                if body.startswith("capacity"):
                    try:
                        capacity = float(body.split("=", 1)[1])
                    except (IndexError, ValueError):
                        raise InstanceFormatError(f"{path}:{lineno}: bad capacity line {text!r}") from None
                    if not capacity > 0 or not math.isfinite(capacity):
                        raise InstanceFormatError(f"{path}:{lineno}: capacity must be positive")
                continue
            fields = next(csv.reader([text]))
            if header is None:
                header = [f.strip() for f in fields]
                if header != ["id", "x", "y", "demand"]:
                    raise InstanceFormatError(
                        f"{path}:{lineno}: expected header id,x,y,demand, got {text!r}"
                    )
                continue
            if len(fields) != 4:
                raise InstanceFormatError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
            try:
                node = int(fields[0])
                x, y = float(fields[1]), float(fields[2])
            except ValueError:
                raise InstanceFormatError(f"{path}:{lineno}: malformed row {text!r}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise InstanceFormatError(f"{path}:{lineno}: non-finite coordinate")
            dem_text = fields[3].strip()
            if node == 0:
                if depot is not None:
                    raise InstanceFormatError(f"{path}:{lineno}: duplicate depot row")
                if dem_text:
                    raise InstanceFormatError(f"{path}:{lineno}: depot row must have empty demand")
                depot = (x, y)
                continue
            try:
                demand = float(dem_text)
            except ValueError:
                raise InstanceFormatError(f"{path}:{lineno}: malformed demand {dem_text!r}") from None
            if not demand > 0 or not math.isfinite(demand):
                raise InstanceFormatError(f"{path}:{lineno}: demand must be positive, got {dem_text}")
            rows.append((node, x, y, demand))
    if header is None:
        raise InstanceFormatError(f"{path}: missing header")
    if capacity is None:
        raise InstanceFormatError(f"{path}: missing '# capacity=' line")
    if depot is None:
        raise InstanceFormatError(f"{path}: missing depot row (id 0)")
    if not rows:
        raise InstanceFormatError(f"{path}: no supplier rows")
    sup = np.array([[r[1], r[2]] for r in rows])
    dem = np.array([r[3] for r in rows]) / capacity
    return Instance(np.array(depot), sup, dem)


def write_csv(instance: Instance, path: str | Path, capacity: float = 1.0) -> None:
    """Inverse of :func:`load_csv`; values are written with ``repr`` precision."""
    lines = [f"# capacity={capacity!r}", "id,x,y,demand"]
    lines.append(f"0,{float(instance.depot_xy[0])!r},{float(instance.depot_xy[1])!r},")
    for k, ((x, y), d) in enumerate(zip(instance.supplier_xy, instance.demands), start=1):
        lines.append(f"{k},{float(x)!r},{float(y)!r},{float(d * capacity)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- dynamics -----------------------------------------------------------------

SNAP = 1e-12


def mask_arrays(current: np.ndarray, capacity: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Forbidden-node mask ``(..., n)`` from current node ``(...)``,
    capacity ``(...)`` and residual supplier demands ``(..., n-1)``."""
    current = np.asarray(current)
    capacity = np.asarray(capacity)
    residual = np.asarray(residual)
    n = residual.shape[-1] + 1
    mask = np.zeros(residual.shape[:-1] + (n,), dtype=bool)
    mask[..., 1:] = (residual <= 0) | (capacity[..., None] <= 0)
    here = np.arange(n) == current[..., None]
    return mask | here


def step_arrays(
    current: np.ndarray,
    capacity: np.ndarray,
    residual: np.ndarray,
    action: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized transition; returns new (current, capacity, residual)."""
    action = np.asarray(action)
    capacity = np.asarray(capacity, dtype=np.float64)
    residual = np.array(residual, dtype=np.float64, copy=True)
    at_supplier = action > 0
    sup_idx = np.where(at_supplier, action - 1, 0)
    picked = np.take_along_axis(residual, sup_idx[..., None], axis=-1)[..., 0]
    new_picked = np.where(at_supplier, np.maximum(picked - capacity, 0.0), picked)
    np.put_along_axis(residual, sup_idx[..., None], new_picked[..., None], axis=-1)
    new_capacity = np.where(at_supplier, np.maximum(capacity - picked, 0.0), 1.0)
    # round-off residue from the subtraction must not keep a node open
    residual[residual < SNAP] = 0.0
    new_capacity = np.where(new_capacity < SNAP, 0.0, new_capacity)
    return action.copy(), new_capacity, residual


@dataclass(frozen=True, eq=False)
class RouteState:
    current_node: int
    capacity: float
    residual_demands: np.ndarray
    step: int = 0
    route_so_far: tuple[int, ...] = (0,)


def initial_state(instance: Instance) -> RouteState:
    return RouteState(0, 1.0, instance.demands.copy(), 0, (0,))


def legal_mask(state: RouteState, instance: Instance) -> np.ndarray:
    """Boolean ``n``-vector, True where the node may not be chosen."""
    return mask_arrays(
        np.asarray(state.current_node), np.asarray(state.capacity), state.residual_demands
    )


def step(state: RouteState, action: int, instance: Instance) -> RouteState:
    action = int(action)
    if not 0 <= action < instance.n:
        raise ContractError(f"action {action} outside 0..{instance.n - 1}")
    if legal_mask(state, instance)[action]:
        raise ContractError(f"action {action} is masked in the current state")
    _, cap, res = step_arrays(
        np.asarray(state.current_node),
        np.asarray(state.capacity),
        state.residual_demands,
        np.asarray(action),
    )
    return RouteState(
        action, float(cap), res, state.step + 1, state.route_so_far + (action,)
    )


def is_complete(state: RouteState, instance: Instance) -> bool:
    return state.current_node == 0 and bool(np.all(state.residual_demands <= 0))


def route_cost(instance: Instance, route: Sequence[int]) -> float:
    nodes = np.asarray(route, dtype=np.intp)
    if nodes.size < 2:
        raise ValueError("a route needs at least two nodes")
    if nodes.min() < 0 or nodes.max() >= instance.n:
        raise ValueError(f"route has node indices outside 0..{instance.n - 1}")
    xy = instance.coords[nodes]
    return float(np.linalg.norm(np.diff(xy, axis=0), axis=1).sum())


def episode_step_limit(instance: Instance) -> int:
    """Safety cap 10 n (1 + ceil(sum of demands)); never hit under correct masking."""
    return 10 * instance.n * (1 + math.ceil(float(instance.demands.sum())))
