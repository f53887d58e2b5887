"""Routing traces: data model, synthetic generator, JSONL serialization.

A trace records, for every token and every MoE layer, the ordered top-k
experts the router selected plus their gate weights. Traces are the ground
truth that compression, prediction, caching, and the pipeline simulator
consume; nothing downstream re-runs a router.

The synthetic generator reproduces three qualitative routing regimes:
text tokens route with strong locality (cluster-concentrated draws),
raw visual tokens fragment their routes (uniform resampling noise), and
routes persist across layers with a tunable probability.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from .errors import ParseError, ValidationError

TRACE_VERSION = 1

# Mass decay across a cluster's preferred experts; first support expert is
# the most likely draw.
_SUPPORT_DECAY = 0.6
_EMBED_NOISE = 0.15


class Modality(str, Enum):
    VISUAL = "visual"
    TEXT = "text"


class ExpertRef(NamedTuple):
    """Identity of one expert's weights. Experts are layer-local."""

    layer: int
    expert: int


@dataclass(eq=False)
class Token:
    id: int
    modality: Modality
    saliency: float
    embedding: np.ndarray
    cluster: int = -1

    def __eq__(self, other):
        if not isinstance(other, Token):
            return NotImplemented
        return (
            self.id == other.id
            and self.modality == other.modality
            and self.saliency == other.saliency
            and self.cluster == other.cluster
            and np.array_equal(self.embedding, other.embedding)
        )


@dataclass(eq=False)
class RoutingTrace:
    """Per-layer, per-token routing assignments plus token metadata.

    ``route_experts[l, t]`` holds the k distinct expert ids token ``t``
    activates at layer ``l``; ``route_gates`` the matching gate weights
    (positive, summing to 1 per route). ``phase_marks`` lists the token ids
    that form the decode phase, one token per decode step, in step order;
    it is empty for prefill-only traces.
    """

    layers: int
    experts: int
    k: int
    tokens: list[Token]
    route_experts: np.ndarray  # (L, N, k) int
    route_gates: np.ndarray  # (L, N, k) float64
    phase_marks: list[int] = field(default_factory=list)
    shared_experts: int = 0

    def __post_init__(self):
        self._embed_matrix = None

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    @property
    def embed_dim(self) -> int:
        return int(self.tokens[0].embedding.shape[0]) if self.tokens else 0

    def route(self, layer: int, token: int) -> np.ndarray:
        return self.route_experts[layer, token]

    def route_set(self, layer: int, token: int) -> set[int]:
        return set(int(e) for e in self.route_experts[layer, token])

    def active_union(self, layer: int, token_ids) -> set[int]:
        """Union of expert ids routed at ``layer`` over the given tokens."""
        ids = list(token_ids)
        if not ids:
            return set()
        return set(int(e) for e in self.route_experts[layer, ids].ravel())

    def prefill_ids(self) -> list[int]:
        decode = set(self.phase_marks)
        return [t.id for t in self.tokens if t.id not in decode]

    def visual_ids(self) -> list[int]:
        decode = set(self.phase_marks)
        return [
            t.id
            for t in self.tokens
            if t.modality is Modality.VISUAL and t.id not in decode
        ]

    def text_ids(self) -> list[int]:
        decode = set(self.phase_marks)
        return [
            t.id
            for t in self.tokens
            if t.modality is Modality.TEXT and t.id not in decode
        ]

    def embeddings(self) -> np.ndarray:
        """(N, D_v) embedding matrix, row index = token id order."""
        if self._embed_matrix is None:
            self._embed_matrix = np.stack([t.embedding for t in self.tokens])
        return self._embed_matrix

    def __eq__(self, other):
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return (
            self.layers == other.layers
            and self.experts == other.experts
            and self.k == other.k
            and self.shared_experts == other.shared_experts
            and self.phase_marks == other.phase_marks
            and self.tokens == other.tokens
            and np.array_equal(self.route_experts, other.route_experts)
            and np.array_equal(self.route_gates, other.route_gates)
        )


@dataclass
class TraceGenConfig:
    """Knobs for the synthetic trace generator.

    ``clusters`` latent preference groups each concentrate routing mass on
    ``cluster_support`` experts. ``rho`` is the probability a routed expert
    survives to the next layer; ``visual_noise`` the probability a surviving
    visual-token entry is resampled uniformly over all experts. Saliency is
    Gamma-distributed with ``saliency_shape`` = (shape, scale).
    """

    n_visual: int
    n_text: int
    layers: int
    experts: int
    k: int
    clusters: int = 4
    cluster_support: int = 8
    rho: float = 0.8
    visual_noise: float = 0.0
    saliency_shape: tuple[float, float] = (2.0, 1.0)
    embed_dim: int = 16
    decode_steps: int = 0
    seed: int = 0
    shared_experts: int = 0

    def validate(self) -> None:
        if self.n_visual < 0:
            raise ValidationError("n_visual must be >= 0")
        if self.n_text < 0:
            raise ValidationError("n_text must be >= 0")
        if self.n_visual + self.n_text < 1:
            raise ValidationError("n_visual + n_text must be >= 1")
        if self.layers < 1:
            raise ValidationError("layers must be >= 1")
        if self.experts < 1:
            raise ValidationError("experts must be >= 1")
        if not 1 <= self.k <= self.experts:
            raise ValidationError("k must satisfy 1 <= k <= experts")
        if self.clusters < 1:
            raise ValidationError("clusters must be >= 1")
        if not self.k <= self.cluster_support <= self.experts:
            raise ValidationError("cluster_support must satisfy k <= cluster_support <= experts")
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationError("rho must lie in [0, 1]")
        if not 0.0 <= self.visual_noise <= 1.0:
            raise ValidationError("visual_noise must lie in [0, 1]")
        shape, scale = self.saliency_shape
        if shape <= 0 or scale <= 0:
            raise ValidationError("saliency_shape parameters must be > 0")
        if self.embed_dim < 1:
            raise ValidationError("embed_dim must be >= 1")
        if self.decode_steps < 0:
            raise ValidationError("decode_steps must be >= 0")
        if self.shared_experts < 0:
            raise ValidationError("shared_experts must be >= 0")


class _ClusterSampler:
    """Draws expert ids from one cluster's concentrated preference distribution."""

    def __init__(self, rng: np.random.Generator, experts: int, support_size: int):
        self.experts = experts
        self.support = [int(e) for e in rng.choice(experts, size=support_size, replace=False)]
        w = _SUPPORT_DECAY ** np.arange(support_size)
        self.cum = np.cumsum(w / w.sum())

    def draw(self, rng: np.random.Generator, exclude: set[int]) -> int:
        for _ in range(64):
            e = self.support[int(np.searchsorted(self.cum, rng.random()))]
            if e not in exclude:
                return e
        for e in self.support:
            if e not in exclude:
                return e
        # support exhausted (k close to support size): fall back to uniform
        return _uniform_draw(rng, self.experts, exclude)


def _uniform_draw(rng: np.random.Generator, experts: int, exclude: set[int]) -> int:
    while True:
        e = int(rng.integers(experts))
        if e not in exclude:
            return e


def _next_route(
    rng: np.random.Generator,
    prev: list[int],
    sampler: _ClusterSampler,
    rho: float,
    noise: float,
    experts: int,
) -> list[int]:
    """Advance one token's route by one layer (or one decode step)."""
    k = len(prev)
    kept = [rng.random() < rho for _ in range(k)]
    route: list[int | None] = [prev[j] if kept[j] else None for j in range(k)]
    current = {e for e in route if e is not None}
    for j in range(k):
        if route[j] is None:
            e = sampler.draw(rng, current)
            route[j] = e
            current.add(e)
    if noise > 0.0:
        for j in range(k):
            if kept[j] and rng.random() < noise:
                others = {e for i, e in enumerate(route) if i != j}
                e = _uniform_draw(rng, experts, others)
                current.discard(route[j])  # type: ignore[arg-type]
                route[j] = e
                current.add(e)
    return route  # type: ignore[return-value]


def generate_trace(cfg: TraceGenConfig) -> RoutingTrace:
    """Deterministically synthesize a routing trace from ``cfg``.

    Same config, same bytes: every draw comes from a single seeded PCG64
    stream consumed in a fixed order. Layer-0 routes are k draws without
    replacement from the token's cluster distribution; each later layer
    keeps each entry with probability ``rho`` (visual entries that survive
    are then uniformly resampled with probability ``visual_noise``) and
    redraws the rest from the cluster. Decode tokens extend the prefill
    tokens, one per step, with the same keep/redraw rule applied across
    steps rather than layers.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    L, E, k = cfg.layers, cfg.experts, cfg.k
    n_prefill = cfg.n_visual + cfg.n_text
    n_total = n_prefill + cfg.decode_steps

    samplers = [_ClusterSampler(rng, E, cfg.cluster_support) for _ in range(cfg.clusters)]
    token_cluster = [int(c) for c in rng.integers(0, cfg.clusters, size=n_prefill)]
    decode_cluster = int(rng.integers(0, cfg.clusters)) if cfg.decode_steps else 0
    token_cluster += [decode_cluster] * cfg.decode_steps

    shape, scale = cfg.saliency_shape
    saliency = rng.gamma(shape, scale, size=n_total)

    centers = rng.normal(size=(cfg.clusters, cfg.embed_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    embeddings = centers[token_cluster] + _EMBED_NOISE * rng.normal(size=(n_total, cfg.embed_dim))

    tokens = []
    for t in range(n_total):
        modality = Modality.VISUAL if t < cfg.n_visual else Modality.TEXT
        tokens.append(
            Token(
                id=t,
                modality=modality,
                saliency=float(saliency[t]),
                embedding=embeddings[t].astype(np.float64),
                cluster=token_cluster[t],
            )
        )

    route_experts = np.zeros((L, n_total, k), dtype=np.int64)
    route_gates = np.zeros((L, n_total, k), dtype=np.float64)

    def fresh_chain(t: int, noisy: bool) -> None:
        sampler = samplers[token_cluster[t]]
        noise = cfg.visual_noise if noisy else 0.0
        route: list[int] = []
        for _ in range(k):
            route.append(sampler.draw(rng, set(route)))
        route_experts[0, t] = route
        route_gates[0, t] = rng.dirichlet(np.ones(k))
        for l in range(1, L):
            route = _next_route(rng, route, sampler, cfg.rho, noise, E)
            route_experts[l, t] = route
            route_gates[l, t] = rng.dirichlet(np.ones(k))

    for t in range(n_prefill):
        fresh_chain(t, noisy=t < cfg.n_visual)

    for s in range(cfg.decode_steps):
        t = n_prefill + s
        if s == 0:
            fresh_chain(t, noisy=False)
        else:
            sampler = samplers[decode_cluster]
            prev_t = t - 1
            for l in range(L):
                prev = [int(e) for e in route_experts[l, prev_t]]
                route_experts[l, t] = _next_route(rng, prev, sampler, cfg.rho, 0.0, E)
                route_gates[l, t] = rng.dirichlet(np.ones(k))

    return RoutingTrace(
        layers=L,
        experts=E,
        k=k,
        tokens=tokens,
        route_experts=route_experts,
        route_gates=route_gates,
        phase_marks=list(range(n_prefill, n_total)),
        shared_experts=cfg.shared_experts,
    )


def validate_trace(trace: RoutingTrace) -> list[str]:
    """Return every invariant violation, each naming layer/token/field."""
    violations: list[str] = []
    seen_ids: set[int] = set()
    for t in trace.tokens:
        if t.id in seen_ids:
            violations.append(f"token {t.id}: duplicate id")
        seen_ids.add(t.id)
        if not math.isfinite(t.saliency) or t.saliency < 0:
            violations.append(f"token {t.id}: saliency must be finite and >= 0")
        if t.embedding.shape != (trace.embed_dim,):
            violations.append(f"token {t.id}: embedding has wrong dimension")
        elif not np.all(np.isfinite(t.embedding)):
            violations.append(f"token {t.id}: embedding has non-finite entries")

    L, N, k = trace.route_experts.shape
    if L != trace.layers or N != trace.num_tokens or k != trace.k:
        violations.append("routes: table shape disagrees with header geometry")
        return violations

    for l in range(L):
        for t in range(N):
            experts = trace.route_experts[l, t]
            gates = trace.route_gates[l, t]
            if len(set(int(e) for e in experts)) != k:
                violations.append(f"layer {l} token {t}: route has duplicate experts")
            if np.any(experts < 0) or np.any(experts >= trace.experts):
                violations.append(f"layer {l} token {t}: expert id out of range")
            if not np.all(np.isfinite(gates)) or np.any(gates <= 0):
                violations.append(f"layer {l} token {t}: gates must be finite and > 0")
            elif abs(float(gates.sum()) - 1.0) > 1e-6:
                violations.append(f"layer {l} token {t}: gates must sum to 1")

    for mark in trace.phase_marks:
        if not 0 <= mark < N:
            violations.append(f"phase mark {mark}: token id out of range")
    return violations


def save_trace(trace: RoutingTrace, path: str) -> None:
    """Write the trace as JSON Lines (UTF-8, LF, round-trip float precision)."""
    header: dict = {
        "version": TRACE_VERSION,
        "L": trace.layers,
        "E": trace.experts,
        "k": trace.k,
        "N": trace.num_tokens,
        "D_v": trace.embed_dim,
    }
    if trace.shared_experts:
        header["shared"] = trace.shared_experts
    if trace.phase_marks:
        header["phase_marks"] = list(trace.phase_marks)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header) + "\n")
        for t in trace.tokens:
            rec = {
                "id": t.id,
                "modality": t.modality.value,
                "saliency": t.saliency,
                "embedding": [float(x) for x in t.embedding],
                "cluster": t.cluster,
            }
            f.write(json.dumps(rec) + "\n")
        for l in range(trace.layers):
            for t in range(trace.num_tokens):
                rec = {
                    "layer": l,
                    "token": t,
                    "experts": [int(e) for e in trace.route_experts[l, t]],
                    "gates": [float(g) for g in trace.route_gates[l, t]],
                }
                f.write(json.dumps(rec) + "\n")


def _parse_line(raw: str, lineno: int) -> dict:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: expected a JSON object")
    return obj


def load_trace(path: str) -> RoutingTrace:
    """Parse a trace file; raises ParseError / ValidationError on bad input."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError("line 1: empty trace file")

    header = _parse_line(lines[0], 1)
    for key in ("version", "L", "E", "k", "N", "D_v"):
        if key not in header:
            raise ParseError(f"line 1: header missing '{key}'")
    if header["version"] != TRACE_VERSION:
        raise ParseError(f"line 1: unsupported trace version {header['version']}")
    L, E, k, N, d_v = (int(header[x]) for x in ("L", "E", "k", "N", "D_v"))
    expected = 1 + N + L * N
    if len(lines) != expected:
        raise ParseError(f"line {len(lines)}: expected {expected} lines, found {len(lines)}")

    tokens: list[Token] = []
    for i in range(N):
        lineno = 2 + i
        rec = _parse_line(lines[lineno - 1], lineno)
        try:
            modality = Modality(rec["modality"])
        except (KeyError, ValueError) as exc:
            raise ParseError(f"line {lineno}: bad modality") from exc
        emb = np.asarray(rec.get("embedding", []), dtype=np.float64)
        tokens.append(
            Token(
                id=int(rec["id"]),
                modality=modality,
                saliency=float(rec["saliency"]),
                embedding=emb,
                cluster=int(rec.get("cluster", -1)),
            )
        )
        if emb.shape != (d_v,):
            raise ValidationError(f"token {rec['id']}: embedding must have exactly {d_v} entries")

    route_experts = np.zeros((L, N, k), dtype=np.int64)
    route_gates = np.zeros((L, N, k), dtype=np.float64)
    for i in range(L * N):
        lineno = 2 + N + i
        rec = _parse_line(lines[lineno - 1], lineno)
        l, t = int(rec["layer"]), int(rec["token"])
        if not (0 <= l < L and 0 <= t < N):
            raise ParseError(f"line {lineno}: route layer/token out of range")
        experts = rec.get("experts", [])
        gates = rec.get("gates", [])
        if len(experts) != k or len(gates) != k:
            raise ValidationError(f"layer {l} token {t}: route must have exactly k={k} experts")
        route_experts[l, t] = experts
        route_gates[l, t] = gates

    trace = RoutingTrace(
        layers=L,
        experts=E,
        k=k,
        tokens=tokens,
        route_experts=route_experts,
        route_gates=route_gates,
        phase_marks=[int(m) for m in header.get("phase_marks", [])],
        shared_experts=int(header.get("shared", 0)),
    )
    violations = validate_trace(trace)
    if violations:
        raise ValidationError("; ".join(violations[:5]))
    return trace
