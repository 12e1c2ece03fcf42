"""Attention encoder/decoder policy with quantum compatibility heads.

Tensor layout inside the network: ``B`` episodes, ``n`` nodes, ``M`` heads,
``d`` = embedding width.  All heads of a layer are stored stacked, e.g.
``encoder.layer1.attn.key_angles`` has shape ``(M, 3, d)``, and evaluated
with one batched matmul.

A quantum head maps node ``i`` to key angles ``(theta1, theta2, alpha)``
and node ``j`` to query angles ``(phi1, phi2, beta)`` with bias-free linear
maps.  The compatibility ``u_ij`` is ``<S0.S2> + <S1.S3>`` of the circuit
for that pair, evaluated through the closed form in :mod:`qroute.qsim`, so
each observable reduces to a dot product of small per-node feature vectors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import qsim
from .autodiff import ParameterStore, Tensor, masked_fill
from .env import ContractError, Instance, mask_arrays, step_arrays

__all__ = [
    "PolicyConfig",
    "InstanceBatch",
    "Embeddings",
    "RolloutResult",
    "AttentionPolicy",
    "init_params",
    "embed_inputs",
    "quantum_head_compatibilities",
    "classical_head_compatibilities",
    "attention_aggregate",
]

HEAD_TYPES = ("quantum", "classical")
COMPAT_VARIANTS = ("sum", "mean", "learned")


@dataclass(frozen=True)
class PolicyConfig:
    d_h: int = 128
    n_layers: int = 3
    n_heads: int = 6
    d_k: int = 16
    d_ff: int = 128
    decoder_heads: int = 6
    dropout: float = 0.1
    head_type: str = "quantum"
    compat_variant: str = "sum"
    cnot_convention: str = qsim.DEFAULT_CONVENTION
    literal_query: bool = False
    tanh_clip: float = 10.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self) -> None:
        from .env import ConfigError

        problems = []
        for name in ("d_h", "n_heads", "d_k", "d_ff", "decoder_heads"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.n_layers < 0:
            problems.append("n_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must be in [0, 1)")
        if self.head_type not in HEAD_TYPES:
            problems.append(f"head_type must be one of {HEAD_TYPES}")
        if self.compat_variant not in COMPAT_VARIANTS:
            problems.append(f"compat_variant must be one of {COMPAT_VARIANTS}")
        if self.cnot_convention not in qsim.CNOT_CONVENTIONS:
            problems.append(f"cnot_convention must be one of {sorted(qsim.CNOT_CONVENTIONS)}")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InstanceBatch:
    """Equal-size instances stacked for vectorized rollouts."""

    coords: np.ndarray  # (B, n, 2)
    demands: np.ndarray  # (B, n - 1)

    @classmethod
    def stack(cls, instances: Sequence[Instance]) -> InstanceBatch:
        sizes = {inst.n for inst in instances}
        if len(sizes) != 1:
            raise ValueError(f"instances in a batch must share n, got sizes {sorted(sizes)}")
        return cls(
            np.stack([inst.coords for inst in instances]),
            np.stack([inst.demands for inst in instances]),
        )

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[1]

    def step_limit(self) -> int:
        totals = np.ceil(self.demands.sum(axis=1)).max()
        return int(10 * self.n * (1 + totals))


@dataclass
class Embeddings:
    nodes: Tensor  # (B, n, d)
    mean: Tensor  # (B, d)


@dataclass
class RolloutResult:
    routes: list[list[int]]
    log_prob: Tensor  # (B,)
    costs: np.ndarray  # (B,)
    actions: np.ndarray  # (B, T), zero-padded after completion
    step_probs: list[np.ndarray] = field(default_factory=list)


# -- parameters ---------------------------------------------------------------


def init_params(cfg: PolicyConfig, rng: np.random.Generator) -> ParameterStore:
    """Uniform(+-1/sqrt(fan_in)) weights, identity batch norms."""
    cfg.validate()
    d, dk, M = cfg.d_h, cfg.d_k, cfg.n_heads
    store = ParameterStore()
    u = ad.uniform_init
    store.register("encoder.init.W", u(rng, (d, 3), 3))
    store.register("encoder.init.b", u(rng, (d,), 3))
    store.register("encoder.init.W0", u(rng, (d, 2), 2))
    store.register("encoder.init.b0", u(rng, (d,), 2))
    for layer in range(1, cfg.n_layers + 1):
        p = f"encoder.layer{layer}"
        if cfg.head_type == "quantum":
            store.register(f"{p}.attn.key_angles", u(rng, (M, 3, d), d))
            store.register(f"{p}.attn.query_angles", u(rng, (M, 3, d), d))
            if cfg.compat_variant == "learned":
                store.register(f"{p}.attn.mix", np.ones((M, 2)))
        else:
            store.register(f"{p}.attn.query", u(rng, (M, dk, d), d))
            store.register(f"{p}.attn.key", u(rng, (M, dk, d), d))
        store.register(f"{p}.attn.value", u(rng, (M, dk, d), d))
        store.register(f"{p}.attn.out", u(rng, (M, d, dk), dk))
        for bn in ("bn1", "bn2"):
            store.register(f"{p}.{bn}.weight", np.ones(d))
            store.register(f"{p}.{bn}.bias", np.zeros(d))
            store.register_buffer(f"{p}.{bn}.running_mean", np.zeros(d))
            store.register_buffer(f"{p}.{bn}.running_var", np.ones(d))
        store.register(f"{p}.ff.W1", u(rng, (cfg.d_ff, d), d))
        store.register(f"{p}.ff.b1", u(rng, (cfg.d_ff,), d))
        store.register(f"{p}.ff.W2", u(rng, (d, cfg.d_ff), cfg.d_ff))
        store.register(f"{p}.ff.b2", u(rng, (d,), cfg.d_ff))
    Md = cfg.decoder_heads
    store.register("decoder.context_query", u(rng, (Md, dk, 2 * d + 1), 2 * d + 1))
    store.register("decoder.key", u(rng, (Md, dk, d), d))
    store.register("decoder.value", u(rng, (Md, dk, d), d))
    store.register("decoder.out", u(rng, (Md, d, dk), dk))
    store.register("decoder.final_query", u(rng, (d, d), d))
    store.register("decoder.final_key", u(rng, (d, d), d))
    return store


# -- building blocks ----------------------------------------------------------


def embed_inputs(
    coords: np.ndarray, demands: np.ndarray, W, b, W0, b0
) -> Tensor:
    """Initial projections: suppliers see ``[x, y, demand]``, the depot ``[x, y]``."""
    coords = np.asarray(coords, dtype=np.float64)
    sup = np.concatenate([coords[..., 1:, :], np.asarray(demands)[..., None]], axis=-1)
    h_sup = ad.matmul(Tensor(sup), ad.swapaxes(W, -1, -2)) + b
    h_dep = ad.matmul(Tensor(coords[..., :1, :]), ad.swapaxes(W0, -1, -2)) + b0
    return ad.concat([h_dep, h_sup], axis=-2)


def _side_features(angles: Tensor, terms, side: int) -> list[Tensor | None]:
    sym = qsim.trig_symbols(angles[..., 0], angles[..., 1], angles[..., 2], sin=ad.sin, cos=ad.cos)
    return [qsim.product(sym[s] for s in row[side]) if row[side] else None for row in terms]


def _observable(key_feats, query_feats) -> Tensor:
    """sum_r key_r(i) * query_r(j) as one matmul; ``None`` factors are 1."""
    shape = next(f for f in (*key_feats, *query_feats) if f is not None).shape
    one = Tensor(np.ones(shape))
    k = ad.stack([one if f is None else f for f in key_feats], axis=-1)
    q = ad.stack([one if f is None else f for f in query_feats], axis=-1)
    return ad.matmul(k, ad.swapaxes(q, -1, -2))


def quantum_head_compatibilities(
    h,
    key_angle_map,
    query_angle_map,
    variant: str = "sum",
    mix=None,
    convention: str = qsim.DEFAULT_CONVENTION,
    literal_query: bool = False,
    no_edge: np.ndarray | None = None,
    capture: dict | None = None,
) -> Tensor:
    """``u_ij`` from the circuit with key angles of node i and query angles of node j.

    ``h`` is ``(..., n, d)`` and the angle maps ``(..., 3, d)``; leading
    dimensions broadcast, so stacked heads work the same as a single head.
    """
    key_angles = ad.matmul(h, ad.swapaxes(key_angle_map, -1, -2))
    query_angles = ad.matmul(h, ad.swapaxes(query_angle_map, -1, -2))
    if capture is not None:
        capture["key_angles"] = key_angles.data.copy()
        capture["query_angles"] = query_angles.data.copy()
    table = qsim.closed_form_terms(convention, literal_query)
    obs = []
    for name in ("e13", "e24"):
        terms = table[name]
        obs.append(
            _observable(_side_features(key_angles, terms, 0), _side_features(query_angles, terms, 1))
            * 0.25
        )
    e13, e24 = obs
    if variant == "sum":
        u = e13 + e24
    elif variant == "mean":
        u = (e13 + e24) * 0.5
    elif variant == "learned":
        if mix is None:
            raise ValueError("learned compatibility variant needs mix weights")
        w = mix if isinstance(mix, Tensor) else Tensor(mix)
        lead = w.shape[:-1]
        w13 = ad.reshape(w[..., 0], lead + (1, 1))
        w24 = ad.reshape(w[..., 1], lead + (1, 1))
        u = e13 * w13 + e24 * w24
    else:
        raise ValueError(f"unknown compatibility variant {variant!r}")
    return masked_fill(u, no_edge)


def classical_head_compatibilities(h, query_map, key_map, no_edge: np.ndarray | None = None) -> Tensor:
    """Scaled dot products ``(Q h_i) . (K h_j) / sqrt(d_k)``."""
    q = ad.matmul(h, ad.swapaxes(query_map, -1, -2))
    k = ad.matmul(h, ad.swapaxes(key_map, -1, -2))
    d_k = q.shape[-1]
    u = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_k))
    return masked_fill(u, no_edge)


def attention_aggregate(u, h, value_map, out_map) -> Tensor:
    """Softmax over ``j`` then ``A V sum_j a_ij h_j``; stacked heads are summed by the caller."""
    if np.isneginf(u.data if isinstance(u, Tensor) else np.asarray(u)).all(axis=-1).any():
        raise ContractError("attention row has no admissible key")
    a = ad.masked_softmax(u, axis=-1)
    v = ad.matmul(h, ad.swapaxes(value_map, -1, -2))
    return ad.matmul(ad.matmul(a, v), ad.swapaxes(out_map, -1, -2))


# -- the policy ---------------------------------------------------------------


class AttentionPolicy:
    def __init__(self, cfg: PolicyConfig, store: ParameterStore | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg, np.random.default_rng(seed))

    def snapshot(self) -> AttentionPolicy:
        return AttentionPolicy(self.cfg, self.store.copy())

    def _p(self, name: str) -> Tensor:
        return self.store[name]

    # encoder

    def embed_inputs(self, batch: InstanceBatch) -> Tensor:
        p = self._p
        return embed_inputs(
            batch.coords, batch.demands,
            p("encoder.init.W"), p("encoder.init.b"), p("encoder.init.W0"), p("encoder.init.b0"),
        )

    def _batchnorm(self, x: Tensor, prefix: str, train: bool) -> Tensor:
        return ad.batchnorm(
            x,
            self._p(f"{prefix}.weight"),
            self._p(f"{prefix}.bias"),
            self.store.buffers[f"{prefix}.running_mean"],
            self.store.buffers[f"{prefix}.running_var"],
            train=train,
            momentum=self.cfg.bn_momentum,
            eps=self.cfg.bn_eps,
        )

    def head_compatibilities(
        self, h: Tensor, layer: int, no_edge: np.ndarray | None = None, capture: dict | None = None
    ) -> Tensor:
        """Stacked ``(B, M, n, n)`` compatibilities of one encoder layer."""
        p = f"encoder.layer{layer}.attn"
        hs = ad.reshape(h, h.shape[:-2] + (1,) + h.shape[-2:])
        mask = None if no_edge is None else np.asarray(no_edge)[..., None, :, :]
        if self.cfg.head_type == "quantum":
            return quantum_head_compatibilities(
                hs,
                self._p(f"{p}.key_angles"),
                self._p(f"{p}.query_angles"),
                variant=self.cfg.compat_variant,
                mix=self.store[f"{p}.mix"] if f"{p}.mix" in self.store else None,
                convention=self.cfg.cnot_convention,
                literal_query=self.cfg.literal_query,
                no_edge=mask,
                capture=capture,
            )
        return classical_head_compatibilities(
            hs, self._p(f"{p}.query"), self._p(f"{p}.key"), no_edge=mask
        )

    def encoder_layer(
        self,
        h: Tensor,
        layer: int,
        train: bool,
        rng: np.random.Generator | None,
        no_edge: np.ndarray | None = None,
        capture: dict | None = None,
    ) -> Tensor:
        p = f"encoder.layer{layer}"
        u = self.head_compatibilities(h, layer, no_edge, capture)
        hs = ad.reshape(h, h.shape[:-2] + (1,) + h.shape[-2:])
        heads = attention_aggregate(u, hs, self._p(f"{p}.attn.value"), self._p(f"{p}.attn.out"))
        g = self._batchnorm(h + ad.sum(heads, axis=-3), f"{p}.bn1", train)
        hidden = ad.relu(ad.matmul(g, ad.swapaxes(self._p(f"{p}.ff.W1"), -1, -2)) + self._p(f"{p}.ff.b1"))
        hidden = ad.dropout(hidden, self.cfg.dropout, rng, train)
        ff = ad.matmul(hidden, ad.swapaxes(self._p(f"{p}.ff.W2"), -1, -2)) + self._p(f"{p}.ff.b2")
        return self._batchnorm(g + ff, f"{p}.bn2", train)

    def encode(
        self,
        batch: InstanceBatch,
        train: bool = False,
        rng: np.random.Generator | None = None,
        no_edge: np.ndarray | None = None,
        capture: list | None = None,
    ) -> Embeddings:
        h = self.embed_inputs(batch)
        for layer in range(1, self.cfg.n_layers + 1):
            slot = {} if capture is not None else None
            h = self.encoder_layer(h, layer, train, rng, no_edge, slot)
            if capture is not None:
                capture.append(slot)
        return Embeddings(h, ad.mean(h, axis=-2))

    # decoder

    def _decoder_cache(self, emb: Embeddings) -> dict[str, Tensor]:
        p = self._p
        hs = ad.reshape(emb.nodes, emb.nodes.shape[:-2] + (1,) + emb.nodes.shape[-2:])
        return {
            "keys": ad.matmul(hs, ad.swapaxes(p("decoder.key"), -1, -2)),
            "values": ad.matmul(hs, ad.swapaxes(p("decoder.value"), -1, -2)),
            "final_keys": ad.matmul(emb.nodes, ad.swapaxes(p("decoder.final_key"), -1, -2)),
        }

    def _decode(
        self, emb: Embeddings, cache: dict, current: np.ndarray, capacity: np.ndarray, mask: np.ndarray
    ) -> tuple[Tensor, Tensor]:
        """Return ``(probabilities (B, n), clipped logits (B, n))``."""
        p = self._p
        if mask.all(axis=-1).any():
            raise ContractError("decode step called with every node masked")
        here = ad.gather_rows(emb.nodes, current)
        context = ad.concat([emb.mean, here, Tensor(capacity[:, None])], axis=-1)
        ctx = ad.reshape(context, (context.shape[0], 1, 1, context.shape[1]))
        q = ad.matmul(ctx, ad.swapaxes(p("decoder.context_query"), -1, -2))
        d_k = q.shape[-1]
        u = ad.matmul(q, ad.swapaxes(cache["keys"], -1, -2)) * (1.0 / math.sqrt(d_k))
        head_mask = mask[:, None, None, :]
        a = ad.masked_softmax(masked_fill(u, head_mask), head_mask)
        heads = ad.matmul(ad.matmul(a, cache["values"]), ad.swapaxes(p("decoder.out"), -1, -2))
        msg = ad.sum(heads, axis=1)  # (B, 1, d)
        qf = ad.matmul(msg, ad.swapaxes(p("decoder.final_query"), -1, -2))
        d = qf.shape[-1]
        compat = ad.matmul(qf, ad.swapaxes(cache["final_keys"], -1, -2)) * (1.0 / math.sqrt(d))
        logits = ad.tanh(ad.reshape(compat, compat.shape[:1] + compat.shape[2:])) * self.cfg.tanh_clip
        probs = ad.masked_softmax(logits, mask)
        return probs, logits

    def decode_step(self, emb: Embeddings, state, mask: np.ndarray) -> np.ndarray:
        """Probability vector for one episode (batch of one embeddings)."""
        cache = self._decoder_cache(emb)
        probs, _ = self._decode(
            emb,
            cache,
            np.array([state.current_node]),
            np.array([state.capacity], dtype=np.float64),
            np.asarray(mask, dtype=bool)[None, :],
        )
        return probs.data[0]

    def rollout(
        self,
        batch: InstanceBatch | Sequence[Instance],
        mode: str = "sample",
        rng: np.random.Generator | None = None,
        train: bool = False,
        actions: np.ndarray | None = None,
        record_probs: bool = False,
    ) -> RolloutResult:
        """Decode every episode of the batch to completion.

        ``actions`` replays fixed (zero-padded) action sequences instead of
        choosing; used for exact log-probabilities of known routes.
        """
        if not isinstance(batch, InstanceBatch):
            batch = InstanceBatch.stack(list(batch))
        if mode not in ("sample", "greedy"):
            raise ValueError(f"mode must be 'sample' or 'greedy', got {mode!r}")
        if (mode == "sample" and actions is None) or (train and self.cfg.dropout > 0):
            if rng is None:
                raise ValueError("sampling or dropout needs an rng")
        B, n = batch.size, batch.n
        emb = self.encode(batch, train=train, rng=rng)
        cache = self._decoder_cache(emb)
        current = np.zeros(B, dtype=np.intp)
        capacity = np.ones(B)
        residual = batch.demands.astype(np.float64).copy()
        done = np.zeros(B, dtype=bool)
        rows = np.arange(B)
        chosen_logp: list[Tensor] = []
        history: list[np.ndarray] = []
        step_probs: list[np.ndarray] = []
        limit = batch.step_limit()
        t = 0
        while not done.all():
            if t >= limit:
                raise RuntimeError(f"episode exceeded the step limit of {limit}")
            mask = mask_arrays(current, capacity, residual)
            mask[done] = True
            mask[done, 0] = False
            probs, _ = self._decode(emb, cache, current, capacity, mask)
            p = probs.data
            if record_probs:
                step_probs.append(p.copy())
            if actions is not None:
                act = actions[:, t] if t < actions.shape[1] else np.zeros(B, dtype=np.intp)
                act = np.asarray(act, dtype=np.intp)
                if np.any(p[rows, act] <= 0):
                    raise ContractError(f"replayed action at step {t} is masked")
            elif mode == "greedy":
                act = p.argmax(axis=1)
            else:
                cdf = np.cumsum(p, axis=1)
                draw = rng.random(B) * cdf[:, -1]
                act = (cdf > draw[:, None]).argmax(axis=1)
            chosen_logp.append(ad.log(probs[rows, act]))
            act = np.where(done, 0, act)
            history.append(act)
            current, capacity, residual = step_arrays(current, capacity, residual, act)
            done = done | ((current == 0) & (residual <= 0).all(axis=1))
            t += 1
        acts = np.stack(history, axis=1) if history else np.zeros((B, 0), dtype=np.intp)
        log_prob = ad.sum(ad.stack(chosen_logp, axis=-1), axis=-1)
        routes, costs = [], np.zeros(B)
        for b in range(B):
            seq = [0] + [int(a) for a in acts[b]]
            # trailing depot repeats after completion are padding
            while len(seq) > 2 and seq[-1] == 0 and seq[-2] == 0:
                seq.pop()
            routes.append(seq)
            xy = batch.coords[b][seq]
            costs[b] = float(np.linalg.norm(np.diff(xy, axis=0), axis=1).sum())
        return RolloutResult(routes, log_prob, costs, acts, step_probs)

    def circuit_angles(self, instance: Instance) -> list[dict[str, np.ndarray]]:
        """Per encoder layer, the ``(M, n, 3)`` key and query angles (eval mode)."""
        if self.cfg.head_type != "quantum":
            raise ValueError("circuit angles only exist for quantum heads")
        capture: list = []
        with ad.no_grad():
            self.encode(InstanceBatch.stack([instance]), train=False, capture=capture)
        return [
            {"key_angles": slot["key_angles"][0, :, :, :], "query_angles": slot["query_angles"][0, :, :, :]}
            for slot in capture
        ]
