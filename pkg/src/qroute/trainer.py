"""REINFORCE training with a rolling greedy-test baseline.

Randomness is split into independent streams keyed by purpose so that a
(config, seed) pair fixes every instance, rollout and update, and a resumed
run continues exactly where an uninterrupted one would be:

* ``(1, epoch, batch, episode)`` -- instance generation,
* ``(2, epoch, batch)``          -- sampling and dropout of the live rollout,
* ``(4, epoch, batch)``          -- sampling and dropout of the baseline rollout,
* ``(0,)``                       -- parameter initialisation.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import AdamState, ParameterStore
from .config import Config
from .env import ConfigError, Instance, generate_instance, load_csv, subsample
from .policy import AttentionPolicy, InstanceBatch

__all__ = [
    "METRICS_COLUMNS",
    "BaselineState",
    "BatchOutcome",
    "EpochMetrics",
    "TrainResult",
    "EvalReport",
    "rng_stream",
    "lr_schedule",
    "baseline_test",
    "epoch_instances",
    "reinforce_batch",
    "train",
    "reinforce_no_baseline",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "metrics_csv",
]

log = logging.getLogger("qroute.trainer")

METRICS_COLUMNS = ("epoch", "batch", "mean_cost", "baseline_mean_cost", "win_fraction", "lr", "seconds")


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)))


def lr_schedule(n: int, lr0: float, decay: float, freeze: int) -> float:
    """Learning rate for 0-based epoch ``n``; decay stops after ``freeze - 1``."""
    if n < 0:
        raise ValueError(f"epoch index must be >= 0, got {n}")
    return lr0 * decay ** min(n, freeze - 1)


def baseline_test(
    recent: Sequence[float], threshold: float = 0.5, streak: int = 10, instant: float = 0.7
) -> bool:
    """True when the latest win fraction beats ``instant`` or the last
    ``streak`` fractions all beat ``threshold`` (strict inequalities)."""
    if not recent:
        return False
    if recent[-1] > instant:
        return True
    tail = list(recent[-streak:])
    return len(tail) == streak and all(f > threshold for f in tail)


@dataclass
class BaselineState:
    policy: AttentionPolicy
    history: list[float] = field(default_factory=list)  # win fractions since the last update


@dataclass
class BatchOutcome:
    loss: float
    costs: np.ndarray
    baseline_costs: np.ndarray
    grads: OrderedDict

    @property
    def wins(self) -> int:
        return int(np.sum(self.costs < self.baseline_costs))


@dataclass
class EpochMetrics:
    epoch: int
    mean_cost: float
    min_cost: float
    baseline_mean_cost: float
    win_fraction: float
    lr: float
    seconds: float
    baseline_updated: bool = False


@dataclass
class TrainResult:
    policy: AttentionPolicy
    baseline: BaselineState
    metrics: list[EpochMetrics]
    batch_rows: list[dict]
    checkpoint: Path | None


# -- data -----------------------------------------------------------------------


def _pool(cfg: Config) -> Instance | None:
    return load_csv(cfg.env.pool_csv) if cfg.env.pool_csv else None


def epoch_instances(cfg: Config, epoch: int, batch: int, pool: Instance | None = None) -> list[Instance]:
    """The fresh training instances of one batch (``epoch`` is 1-based)."""
    spec = cfg.env.generator_spec(cfg.train.seed)
    out = []
    for ep in range(cfg.train.batch_size):
        rng = rng_stream(cfg.train.seed, 1, epoch, batch, ep)
        if pool is not None:
            out.append(subsample(pool, cfg.env.n_nodes - 1, rng))
        else:
            out.append(generate_instance(spec, rng))
    return out


# -- one gradient step ------------------------------------------------------------


def reinforce_batch(
    policy: AttentionPolicy,
    baseline: AttentionPolicy | None,
    instances: Sequence[Instance] | InstanceBatch,
    rng_factory: Callable[[], np.random.Generator],
    baseline_mode: str = "sample",
    max_grad_norm: float = 0.0,
    baseline_rng_factory: Callable[[], np.random.Generator] | None = None,
) -> BatchOutcome:
    """Accumulate the REINFORCE gradient of one batch into ``policy.store``.

    The baseline rollout draws from ``baseline_rng_factory`` (default: a
    fresh ``rng_factory()`` stream, i.e. the live rollout's random numbers).
    ``baseline=None`` gives the plain estimator whose advantage is the
    route cost itself.
    """
    batch = instances if isinstance(instances, InstanceBatch) else InstanceBatch.stack(list(instances))
    policy.store.zero_grad()
    live = policy.rollout(batch, mode="sample", rng=rng_factory(), train=True)
    if baseline is not None:
        with ad.no_grad():
            ref = baseline.rollout(
                batch, mode=baseline_mode, rng=(baseline_rng_factory or rng_factory)(), train=True
            )
        base_costs = ref.costs
        advantage = live.costs - base_costs
    else:
        base_costs = np.full(batch.size, np.nan)
        advantage = live.costs.copy()
    loss = ad.mean(live.log_prob * advantage)
    if not np.isfinite(loss.data):
        raise FloatingPointError(
            f"non-finite loss {loss.data!r}: costs in [{live.costs.min():.4g}, {live.costs.max():.4g}], "
            f"log-prob in [{live.log_prob.data.min():.4g}, {live.log_prob.data.max():.4g}]"
        )
    ad.backward(loss)
    if max_grad_norm > 0:
        norm = float(np.linalg.norm(policy.store.flat_grad()))
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
            for t in policy.store.params.values():
                if t.grad is not None:
                    t.grad = t.grad * scale
    return BatchOutcome(float(loss.data), live.costs, base_costs, policy.store.grads())


# -- checkpoints --------------------------------------------------------------------


def _stamp_arrays(prefix: str, arrays) -> list[tuple[str, np.ndarray]]:
    return [(f"{prefix}/{k}", v) for k, v in arrays.items()]


def save_checkpoint(
    path: str | Path,
    cfg: Config,
    policy: AttentionPolicy,
    baseline: BaselineState,
    adam: AdamState,
    epoch: int,
    metrics: Sequence[EpochMetrics],
    batch_rows: Sequence[dict] = (),
) -> Path:
    arrays = OrderedDict(
        _stamp_arrays("param", policy.store.arrays())
        + _stamp_arrays("buffer", policy.store.buffers)
        + _stamp_arrays("adam.m", {k: adam.m.get(k, np.zeros_like(v)) for k, v in policy.store.arrays().items()})
        + _stamp_arrays("adam.v", {k: adam.v.get(k, np.zeros_like(v)) for k, v in policy.store.arrays().items()})
        + _stamp_arrays("baseline.param", baseline.policy.store.arrays())
        + _stamp_arrays("baseline.buffer", baseline.policy.store.buffers)
    )
    meta = {
        "config": cfg.to_dict(),
        "epoch": epoch,
        "adam_step": adam.step,
        "win_history": list(baseline.history),
        "metrics": [asdict(m) for m in metrics],
        "batch_rows": list(batch_rows),
        "rng": {"seed": cfg.train.seed, "streams": "init=(0,) instances=(1,epoch,batch,episode) live=(2,epoch,batch) baseline=(4,epoch,batch) eval=(3,n,offset)"},
    }
    return ckpt.save(path, meta, arrays)


@dataclass
class LoadedCheckpoint:
    cfg: Config
    policy: AttentionPolicy
    baseline: BaselineState
    adam: AdamState
    epoch: int
    metrics: list[EpochMetrics]
    batch_rows: list[dict]


def _section(arrays, prefix: str) -> OrderedDict:
    cut = len(prefix) + 1
    return OrderedDict((k[cut:], v) for k, v in arrays.items() if k.startswith(prefix + "/"))


def load_checkpoint(path: str | Path, cfg: Config | None = None) -> LoadedCheckpoint:
    """Restore a training state; ``cfg`` defaults to the echoed config."""
    meta, arrays = ckpt.load(path)
    echoed = Config.from_dict(meta["config"])
    cfg = cfg or echoed
    policy = AttentionPolicy(cfg.policy, seed=0)
    base = AttentionPolicy(cfg.policy, seed=0)
    try:
        policy.store.load_arrays(_section(arrays, "param"), _section(arrays, "buffer"))
        base.store.load_arrays(_section(arrays, "baseline.param"), _section(arrays, "baseline.buffer"))
    except ValueError as exc:
        raise ckpt.CheckpointError(f"{path}: checkpoint does not match config: {exc}") from None
    adam = AdamState(step=int(meta["adam_step"]))
    if adam.step:
        adam.m = dict(_section(arrays, "adam.m"))
        adam.v = dict(_section(arrays, "adam.v"))
    metrics = [EpochMetrics(**m) for m in meta["metrics"]]
    return LoadedCheckpoint(
        cfg, policy, BaselineState(base, list(meta["win_history"])), adam,
        int(meta["epoch"]), metrics, list(meta.get("batch_rows", [])),
    )


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch{epoch}.ckpt"


# -- metrics ----------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def metrics_csv(metrics: Sequence[EpochMetrics], batch_rows: Sequence[dict] = ()) -> str:
    rows = [dict(r) for r in batch_rows]
    rows += [
        {"epoch": m.epoch, "batch": -1, "mean_cost": m.mean_cost, "baseline_mean_cost": m.baseline_mean_cost,
         "win_fraction": m.win_fraction, "lr": m.lr, "seconds": m.seconds}
        for m in metrics
    ]
    rows.sort(key=lambda r: (r["epoch"], r["batch"] if r["batch"] >= 0 else 1 << 30))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in METRICS_COLUMNS])
    return buf.getvalue()


# -- the loop --------------------------------------------------------------------------


def train(
    cfg: Config,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    """Run (or resume) training.  With ``out_dir`` a checkpoint and the full
    metrics CSV are rewritten after every epoch."""
    cfg.validate()
    tc = cfg.train
    use_baseline = tc.algorithm == "rollout_baseline"
    if resume is not None:
        state = load_checkpoint(resume, cfg)
        policy, baseline, adam = state.policy, state.baseline, state.adam
        metrics, batch_rows, start = state.metrics, state.batch_rows, state.epoch + 1
        log.info("resuming from %s at epoch %d", resume, start)
    else:
        init_seed = int(rng_stream(tc.seed, 0).integers(2**63))
        policy = AttentionPolicy(cfg.policy, seed=init_seed)
        baseline = BaselineState(policy.snapshot())
        adam = AdamState()
        metrics, batch_rows, start = [], [], 1
    out = Path(out_dir) if out_dir is not None else None
    pool = _pool(cfg)
    last_ckpt = None
    for epoch in range(start, tc.num_epochs + 1):
        lr = lr_schedule(epoch - 1, tc.lr0, tc.lr_decay, tc.lr_freeze_epoch)
        t0 = time.perf_counter()
        costs, base_costs = [], []
        for b in range(tc.batches_per_epoch):
            tb = time.perf_counter()
            instances = epoch_instances(cfg, epoch, b, pool)
            outcome = reinforce_batch(
                policy,
                baseline.policy if use_baseline else None,
                instances,
                lambda: rng_stream(tc.seed, 2, epoch, b),
                tc.baseline_mode,
                tc.max_grad_norm,
                lambda: rng_stream(tc.seed, 4, epoch, b),
            )
            adam_step_safe(policy.store, adam, lr, epoch, b)
            costs.append(outcome.costs)
            base_costs.append(outcome.baseline_costs)
            if tc.log_batches:
                batch_rows.append({
                    "epoch": epoch, "batch": b, "mean_cost": float(outcome.costs.mean()),
                    "baseline_mean_cost": float(outcome.baseline_costs.mean()),
                    "win_fraction": outcome.wins / len(outcome.costs) if use_baseline else math.nan,
                    "lr": lr, "seconds": time.perf_counter() - tb,
                })
        c = np.concatenate(costs)
        bc = np.concatenate(base_costs)
        win = float(np.mean(c < bc)) if use_baseline else math.nan
        updated = False
        if use_baseline:
            baseline.history.append(win)
            if baseline_test(baseline.history, tc.baseline_win_threshold, tc.baseline_streak,
                             tc.baseline_instant_threshold):
                baseline.policy = policy.snapshot()
                baseline.history = []
                updated = True
        m = EpochMetrics(epoch, float(c.mean()), float(c.min()), float(bc.mean()), win, lr,
                         time.perf_counter() - t0, updated)
        metrics.append(m)
        log.info("epoch %d mean %.4f baseline %.4f win %.3f lr %.3g%s", epoch, m.mean_cost,
                 m.baseline_mean_cost, win, lr, " (baseline updated)" if updated else "")
        if on_epoch is not None:
            on_epoch(m)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            last_ckpt = save_checkpoint(out / checkpoint_name(epoch), cfg, policy, baseline, adam,
                                        epoch, metrics, batch_rows)
            (out / "metrics.csv").write_text(metrics_csv(metrics, batch_rows), encoding="utf-8")
    return TrainResult(policy, baseline, metrics, batch_rows, last_ckpt)


def adam_step_safe(store: ParameterStore, adam: AdamState, lr: float, epoch: int, batch: int) -> None:
    try:
        ad.adam_step(store, adam, lr)
    except FloatingPointError as exc:
        raise FloatingPointError(f"epoch {epoch} batch {batch}: {exc}") from None


def reinforce_no_baseline(cfg: Config, out_dir: str | Path | None = None, **kw) -> TrainResult:
    """The plain estimator: advantage = route cost, no baseline rollouts.

    The discount factor has no effect because an episode is a single action
    (the whole route) followed by a single reward.
    """
    return train(cfg.with_values(train={"algorithm": "no_baseline"}), out_dir, **kw)


# -- evaluation ----------------------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    costs: np.ndarray
    routes: list[list[int]]

    @property
    def mean(self) -> float:
        return float(np.mean(self.costs))

    @property
    def median(self) -> float:
        return float(np.median(self.costs))

    @property
    def min(self) -> float:
        return float(np.min(self.costs))

    @property
    def std(self) -> float:
        return float(np.std(self.costs))

    def to_text(self) -> str:
        lines = [
            f"mode={self.mode}",
            f"count={len(self.costs)}",
            f"mean={self.mean!r}",
            f"median={self.median!r}",
            f"min={self.min!r}",
        ]
        for i, (c, r) in enumerate(zip(self.costs, self.routes)):
            lines.append(f"instance {i} cost={float(c)!r} route={'-'.join(map(str, r))}")
        return "\n".join(lines) + "\n"


def evaluate(
    policy: AttentionPolicy,
    instances: Sequence[Instance],
    mode: str = "greedy",
    seed: int = 0,
    chunk: int = 256,
) -> EvalReport:
    """Eval-mode rollouts; instances are grouped by size and decoded in chunks."""
    if not instances:
        raise ConfigError("evaluation set is empty")
    costs = np.zeros(len(instances))
    routes: list[list[int]] = [[] for _ in instances]
    by_size: dict[int, list[int]] = {}
    for i, inst in enumerate(instances):
        by_size.setdefault(inst.n, []).append(i)
    with ad.no_grad():
        for n in sorted(by_size):
            idx = by_size[n]
            for start in range(0, len(idx), chunk):
                part = idx[start:start + chunk]
                rng = rng_stream(seed, 3, n, start)
                res = policy.rollout([instances[i] for i in part], mode=mode, rng=rng, train=False)
                for j, i in enumerate(part):
                    costs[i] = res.costs[j]
                    routes[i] = res.routes[j]
    return EvalReport(mode, costs, routes)
