"""Affinity-aware visual-token compression.

Selection proceeds in two stages: a salient core of the top-alpha fraction
of visual tokens anchors semantic fidelity, then the remaining keep budget
goes to tokens scoring best on normalized saliency minus a weighted
marginal-expansion penalty (the fraction of a token's prefix-routed experts
that fall outside the core-induced expert set). Text tokens are always
retained and never count against the visual budget.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, TraceError, ValidationError
from .trace import RoutingTrace

DEFAULT_TRADEOFF = 2.0  # penalty weight: working-set growth counts double


@dataclass(frozen=True)
class CompressionConfig:
    alpha: float
    beta: float
    lam: float = DEFAULT_TRADEOFF
    prefix_layers: tuple[int, ...] = (0,)

    def validate(self, layers: int | None = None) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError("beta must lie in [0, 1]")
        if self.alpha > self.beta:
            raise ValidationError("alpha must not exceed beta")
        if self.lam < 0.0:
            raise ValidationError("lam must be >= 0")
        if not self.prefix_layers:
            raise ValidationError("prefix_layers must be non-empty")
        if layers is not None and any(not 0 <= l < layers for l in self.prefix_layers):
            raise ValidationError("prefix_layers must all be valid layer indices")


@dataclass
class CompressionPlan:
    """Output of one compression run over a trace's visual tokens.

    ``core`` and ``keep`` are sorted visual-token id lists with
    core <= keep; ``delta`` and ``score`` cover exactly the non-core visual
    tokens; ``saliency_norm`` covers every visual token.
    """

    core: list[int]
    keep: list[int]
    target_experts: set[int]
    delta: dict[int, float]
    score: dict[int, float]
    saliency_norm: dict[int, float]
    config: CompressionConfig

    def retained_ids(self, trace: RoutingTrace) -> list[int]:
        """Kept visual tokens plus all prefill text tokens, sorted."""
        return sorted(set(self.keep) | set(trace.text_ids()))

    def to_json(self) -> str:
        obj = {
            "core": sorted(self.core),
            "keep": sorted(self.keep),
            "target_experts": sorted(self.target_experts),
            "delta": {str(i): self.delta[i] for i in sorted(self.delta)},
            "score": {str(i): self.score[i] for i in sorted(self.score)},
            "saliency_norm": {str(i): self.saliency_norm[i] for i in sorted(self.saliency_norm)},
            "config": {
                "alpha": self.config.alpha,
                "beta": self.config.beta,
                "lam": self.config.lam,
                "prefix_layers": list(self.config.prefix_layers),
            },
        }
        return json.dumps(obj, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CompressionPlan":
        obj = json.loads(text)
        cfg = CompressionConfig(
            alpha=obj["config"]["alpha"],
            beta=obj["config"]["beta"],
            lam=obj["config"]["lam"],
            prefix_layers=tuple(obj["config"]["prefix_layers"]),
        )
        return cls(
            core=list(obj["core"]),
            keep=list(obj["keep"]),
            target_experts=set(obj["target_experts"]),
            delta={int(i): v for i, v in obj["delta"].items()},
            score={int(i): v for i, v in obj["score"].items()},
            saliency_norm={int(i): v for i, v in obj["saliency_norm"].items()},
            config=cfg,
        )


def normalize_saliency(raw) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant vector maps to all 0.5."""
    s = np.asarray(raw, dtype=np.float64)
    if s.size and (not np.all(np.isfinite(s)) or np.any(s < 0)):
        raise ValidationError("saliency entries must be finite and >= 0")
    if s.size == 0:
        return s
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def salient_core(s_norm, alpha: float, n_visual: int) -> list[int]:
    """Positions of the floor(alpha * n_visual) largest scores, ties to lower index."""
    s = np.asarray(s_norm, dtype=np.float64)
    budget = math.floor(alpha * n_visual)
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    return sorted(order[:budget])


def active_experts(trace: RoutingTrace, token: int, prefix_layers) -> set[int]:
    """Union of the token's routed expert ids over the prefix layers."""
    out: set[int] = set()
    for l in prefix_layers:
        if not 0 <= l < trace.layers:
            raise TraceError(f"trace has no layer {l}")
        out.update(int(e) for e in trace.route_experts[l, token])
    return out


def marginal_expansion(token_experts: set[int], target_experts: set[int]) -> float:
    """Fraction of the token's experts outside the target set, in [0, 1]."""
    if not token_experts:
        raise ContractError("token expert set must be non-empty")
    return len(token_experts - target_experts) / len(token_experts)


def compress(trace: RoutingTrace, cfg: CompressionConfig) -> CompressionPlan:
    """Run the full selection policy over the trace's visual tokens."""
    cfg.validate(trace.layers)
    visual = trace.visual_ids()
    n_visual = len(visual)

    s_norm_vec = normalize_saliency([trace.tokens[i].saliency for i in visual])
    s_norm = {tok: float(s_norm_vec[pos]) for pos, tok in enumerate(visual)}

    k_core = math.floor(cfg.alpha * n_visual)
    k_keep = math.floor(cfg.beta * n_visual)
    if k_keep < k_core:
        raise ValidationError("beta budget smaller than alpha budget")

    core_order = sorted(visual, key=lambda i: (-s_norm[i], i))
    core = sorted(core_order[:k_core])

    target: set[int] = set()
    for tok in core:
        target |= active_experts(trace, tok, cfg.prefix_layers)

    delta: dict[int, float] = {}
    score: dict[int, float] = {}
    core_set = set(core)
    for tok in visual:
        if tok in core_set:
            continue
        e_i = active_experts(trace, tok, cfg.prefix_layers)
        d = marginal_expansion(e_i, target)
        delta[tok] = d
        score[tok] = s_norm[tok] - cfg.lam * d

    extra_order = sorted(delta, key=lambda i: (-score[i], -s_norm[i], i))
    keep = sorted(core + extra_order[: k_keep - k_core])

    return CompressionPlan(
        core=core,
        keep=keep,
        target_experts=target,
        delta=delta,
        score=score,
        saliency_norm=s_norm,
        config=cfg,
    )
