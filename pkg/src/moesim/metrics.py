"""Routing diagnostics: working sets, concentration, inter-layer similarity.

All functions take an explicit token subset so raw and compressed token
populations can be compared on the same trace.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .trace import RoutingTrace


def _histogram(trace: RoutingTrace, subset, layer: int) -> np.ndarray:
    counts = np.zeros(trace.experts, dtype=np.float64)
    for t in subset:
        for e in trace.route_experts[layer, t]:
            counts[int(e)] += 1.0
    return counts


def working_set(trace: RoutingTrace, subset, layer: int) -> int:
    """Number of distinct experts the subset activates at the layer."""
    return len(trace.active_union(layer, subset))


def topk_coverage(trace: RoutingTrace, subset, layer: int, top: int) -> float:
    """Fraction of activations captured by the `top` most-activated experts."""
    subset = list(subset)
    if not subset:
        raise ValidationError("subset must be non-empty")
    if not 0 <= top <= trace.experts:
        raise ValidationError("top must lie in [0, experts]")
    counts = _histogram(trace, subset, layer)
    order = sorted(range(trace.experts), key=lambda e: (-counts[e], e))
    covered = sum(counts[e] for e in order[:top])
    return covered / (len(subset) * trace.k)


def interlayer_similarity(trace: RoutingTrace, subset, layer: int) -> float:
    """Cosine similarity of activation-count histograms at layer and layer+1."""
    if layer + 1 >= trace.layers:
        raise ValidationError("layer+1 must be a valid layer")
    a = _histogram(trace, subset, layer)
    b = _histogram(trace, subset, layer + 1)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def interlayer_jaccard(trace: RoutingTrace, subset, layer: int) -> float:
    """Set-valued similarity variant: |A ∩ B| / |A ∪ B| of the working sets."""
    if layer + 1 >= trace.layers:
        raise ValidationError("layer+1 must be a valid layer")
    a = trace.active_union(layer, subset)
    b = trace.active_union(layer + 1, subset)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


@dataclass
class AffinityReport:
    per_layer_working_set: list[int]
    inactive_experts: list[int]
    topk_coverage: list[float]
    interlayer_similarity: list[float]
    interlayer_jaccard: list[float]
    top: int

    @property
    def mean_working_set(self) -> float:
        return float(np.mean(self.per_layer_working_set))

    @property
    def mean_inactive(self) -> float:
        return float(np.mean(self.inactive_experts))

    @property
    def mean_coverage(self) -> float:
        return float(np.mean(self.topk_coverage))

    @property
    def mean_similarity(self) -> float:
        return float(np.mean(self.interlayer_similarity)) if self.interlayer_similarity else 1.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "top": self.top,
                "per_layer_working_set": self.per_layer_working_set,
                "inactive_experts": self.inactive_experts,
                "topk_coverage": self.topk_coverage,
                "interlayer_similarity": self.interlayer_similarity,
                "interlayer_jaccard": self.interlayer_jaccard,
                "mean_working_set": self.mean_working_set,
                "mean_inactive": self.mean_inactive,
                "mean_coverage": self.mean_coverage,
                "mean_similarity": self.mean_similarity,
            },
            indent=2,
        )

    def to_csv(self) -> str:
        lines = ["layer,working_set,inactive,topk_coverage,interlayer_similarity,interlayer_jaccard"]
        for l, ws in enumerate(self.per_layer_working_set):
            sim = self.interlayer_similarity[l] if l < len(self.interlayer_similarity) else ""
            jac = self.interlayer_jaccard[l] if l < len(self.interlayer_jaccard) else ""
            lines.append(
                f"{l},{ws},{self.inactive_experts[l]},{self.topk_coverage[l]},{sim},{jac}"
            )
        return "\n".join(lines) + "\n"


def affinity_report(trace: RoutingTrace, subset, top: int) -> AffinityReport:
    """Per-layer working set, inactivity, coverage, and similarity for a subset."""
    subset = list(subset)
    if not subset:
        raise ValidationError("subset must be non-empty")
    ws = [working_set(trace, subset, l) for l in range(trace.layers)]
    inactive = [trace.experts - w for w in ws]
    coverage = [topk_coverage(trace, subset, l, top) for l in range(trace.layers)]
    sims = [interlayer_similarity(trace, subset, l) for l in range(trace.layers - 1)]
    jacs = [interlayer_jaccard(trace, subset, l) for l in range(trace.layers - 1)]
    return AffinityReport(
        per_layer_working_set=ws,
        inactive_experts=inactive,
        topk_coverage=coverage,
        interlayer_similarity=sims,
        interlayer_jaccard=jacs,
        top=top,
    )
