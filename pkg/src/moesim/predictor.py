"""Lookahead expert-demand prediction.

Features combine a decayed routing histogram, a mean-pooled synthetic
hidden-state summary of the retained tokens, and a static mean-pooled
visual summary. A small bottleneck MLP maps features to per-expert
priority scores and is trained with soft binary cross-entropy against
distance-decayed targets over a bounded window of future layers.
Oracle / random / history baselines share the same interface so the
pipeline can swap them freely.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, TrainingError, ValidationError
from .trace import RoutingTrace

DEFAULT_WINDOW = 5
DEFAULT_GAMMA = 0.8
DEFAULT_BUDGET = 20
DEFAULT_HISTORY_DECAY = 0.5

MODEL_VERSION = 1

# Single fixed stream for the per-layer hidden-state drift so that features
# computed from a freshly generated trace and from its reloaded copy agree.
_DRIFT_SEED = 0x0D121F7
_DRIFT_STEP = 0.05
_drift_cache: dict[tuple[int, int], np.ndarray] = {}


def layer_drift(layer: int, dim: int) -> np.ndarray:
    """Deterministic cumulative drift added to embeddings at each layer."""
    key = (layer, dim)
    if key not in _drift_cache:
        rng = np.random.default_rng(_DRIFT_SEED)
        steps = rng.normal(0.0, _DRIFT_STEP, size=(layer + 1, dim))
        for l in range(layer + 1):
            _drift_cache.setdefault((l, dim), steps[: l + 1].sum(axis=0))
    return _drift_cache[key]


def hidden_states(trace: RoutingTrace, layer: int, token_ids) -> np.ndarray:
    """Synthetic hidden states: embeddings shifted by the layer drift."""
    ids = list(token_ids)
    return trace.embeddings()[ids] + layer_drift(layer, trace.embed_dim)


@dataclass
class FeatureVector:
    h_r: np.ndarray  # (E,) decayed routing histogram, unit L1 (or zero)
    h_h: np.ndarray  # (D_v,) mean hidden-state summary at the layer
    h_v: np.ndarray  # (D_v,) static mean visual summary

    def concat(self) -> np.ndarray:
        return np.concatenate([self.h_r, self.h_h, self.h_v])


def routing_histogram(trace: RoutingTrace, token_ids, layer: int, decay: float) -> np.ndarray:
    """Decay-weighted activation counts over layers <= layer, unit L1 sum."""
    counts = np.zeros(trace.experts, dtype=np.float64)
    ids = list(token_ids)
    for past in range(layer + 1):
        w = decay ** (layer - past)
        if w == 0.0 and past < layer:
            continue
        for t in ids:
            for e in trace.route_experts[past, t]:
                counts[int(e)] += w
    total = counts.sum()
    return counts / total if total > 0 else counts


def visual_summary(trace: RoutingTrace, plan) -> np.ndarray:
    """Static mean embedding of the retained visual tokens; reused in decode."""
    kept_visual = sorted(plan.keep) if plan is not None else trace.visual_ids()
    if not kept_visual:
        return np.zeros(trace.embed_dim, dtype=np.float64)
    return trace.embeddings()[kept_visual].mean(axis=0)


def build_features(
    trace: RoutingTrace,
    plan,
    layer: int,
    history_decay: float = DEFAULT_HISTORY_DECAY,
    token_ids=None,
    h_v: np.ndarray | None = None,
) -> FeatureVector:
    """Feature vector at ``layer`` from realized routing up to that layer.

    ``token_ids`` overrides the pooled token set (used per decode step);
    by default it is the plan's retained tokens, or all prefill tokens when
    no plan is given. ``h_v`` may carry the precomputed static visual
    summary so decode steps do not recompute it.
    """
    if token_ids is None:
        token_ids = plan.retained_ids(trace) if plan is not None else trace.prefill_ids()
    ids = list(token_ids)
    if not ids:
        raise ContractError("retained token set must be non-empty")
    if plan is not None and plan.config.prefix_layers and layer < max(plan.config.prefix_layers):
        raise ContractError("features need the full pinned prefix realized")
    h_r = routing_histogram(trace, ids, layer, history_decay)
    h_h = hidden_states(trace, layer, ids).mean(axis=0)
    if h_v is None:
        h_v = visual_summary(trace, plan)
    return FeatureVector(h_r=h_r, h_h=h_h, h_v=h_v)


def demand_set(trace: RoutingTrace, layer: int, token_ids) -> set[int]:
    """Experts the given tokens activate at ``layer``."""
    return trace.active_union(layer, token_ids)


def build_targets(
    trace: RoutingTrace,
    layer: int,
    window: int = DEFAULT_WINDOW,
    gamma: float = DEFAULT_GAMMA,
    token_ids=None,
) -> np.ndarray:
    """Distance-decayed supervision target over the expert pool.

    Expert e scores max over d in [1, window] of gamma**(d-1) when e is
    activated by the scoped tokens at layer+d; the window truncates at the
    last layer, and the last layer itself yields an all-zero target.
    """
    if window < 1:
        raise ValidationError("window must be >= 1")
    if not 0.0 < gamma <= 1.0:
        raise ValidationError("gamma must lie in (0, 1]")
    if token_ids is None:
        token_ids = trace.prefill_ids()
    g = np.zeros(trace.experts, dtype=np.float64)
    for d in range(1, window + 1):
        future = layer + d
        if future > trace.layers - 1:
            break
        w = gamma ** (d - 1)
        for e in demand_set(trace, future, token_ids):
            if w > g[e]:
                g[e] = w
    return g


# ---------------------------------------------------------------------------
# Bottleneck MLP
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    gamma: float = DEFAULT_GAMMA
    window: int = DEFAULT_WINDOW
    dropout_rate: float = 0.0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValidationError("gamma must lie in (0, 1]")
        if self.window < 1:
            raise ValidationError("window must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1)")


@dataclass
class MLPModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    dropout_rate: float = 0.0
    final_loss: float = math.nan

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.w1.shape[1], self.w1.shape[0], self.w2.shape[0], self.wo.shape[0])

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Inference pass, no dropout. Accepts a vector or a batch."""
        z1 = x @ self.w1.T + self.b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.w2.T + self.b2
        a2 = np.maximum(z2, 0.0)
        return a2 @ self.wo.T + self.bo

    def save(self, path: str, train_config: TrainConfig | None = None) -> None:
        obj = {
            "version": MODEL_VERSION,
            "dims": list(self.dims),
            "dropout_rate": self.dropout_rate,
            "final_loss": self.final_loss,
            "weights": {
                "w1": self.w1.ravel().tolist(),
                "b1": self.b1.tolist(),
                "w2": self.w2.ravel().tolist(),
                "b2": self.b2.tolist(),
                "wo": self.wo.ravel().tolist(),
                "bo": self.bo.tolist(),
            },
        }
        if train_config is not None:
            obj["train_config"] = {
                "learning_rate": train_config.learning_rate,
                "epochs": train_config.epochs,
                "batch_size": train_config.batch_size,
                "seed": train_config.seed,
                "gamma": train_config.gamma,
                "window": train_config.window,
                "dropout_rate": train_config.dropout_rate,
            }
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(obj, f)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "MLPModel":
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
        d_in, d_hidden, d_bottleneck, n_out = obj["dims"]
        w = obj["weights"]
        return cls(
            w1=np.asarray(w["w1"], dtype=np.float64).reshape(d_hidden, d_in),
            b1=np.asarray(w["b1"], dtype=np.float64),
            w2=np.asarray(w["w2"], dtype=np.float64).reshape(d_bottleneck, d_hidden),
            b2=np.asarray(w["b2"], dtype=np.float64),
            wo=np.asarray(w["wo"], dtype=np.float64).reshape(n_out, d_bottleneck),
            bo=np.asarray(w["bo"], dtype=np.float64),
            dropout_rate=float(obj.get("dropout_rate", 0.0)),
            final_loss=float(obj.get("final_loss", math.nan)),
        )


def mlp_forward(model: MLPModel, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != model.dims[0]:
        raise ValidationError(f"input dim {x.shape[-1]} != model dim {model.dims[0]}")
    return model.forward(x)


def init_model(
    d_in: int,
    n_experts: int,
    d_hidden: int | None = None,
    d_bottleneck: int | None = None,
    seed: int = 0,
    dropout_rate: float = 0.0,
) -> MLPModel:
    """Uniform(+-1/sqrt(fan_in)) initialization, reproducible per seed."""
    d_hidden = d_hidden if d_hidden is not None else 4 * n_experts
    d_bottleneck = d_bottleneck if d_bottleneck is not None else n_experts
    rng = np.random.default_rng(seed)

    def uni(rows, cols):
        bound = 1.0 / math.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    return MLPModel(
        w1=uni(d_hidden, d_in),
        b1=np.zeros(d_hidden),
        w2=uni(d_bottleneck, d_hidden),
        b2=np.zeros(d_bottleneck),
        wo=uni(n_experts, d_bottleneck),
        bo=np.zeros(n_experts),
        dropout_rate=dropout_rate,
    )


def bce_loss_and_grads(
    model: MLPModel,
    x: np.ndarray,
    g: np.ndarray,
    dropout_masks: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Mean-per-example summed BCE(sigmoid(y), g) and its weight gradients.

    Uses the softplus form log(1+e^y) - g*y for numerical stability. The
    optional dropout masks (already scaled by 1/(1-rate)) multiply the two
    hidden activations, matching the training-time forward pass.
    """
    n = x.shape[0]
    z1 = x @ model.w1.T + model.b1
    a1 = np.maximum(z1, 0.0)
    if dropout_masks is not None:
        a1 = a1 * dropout_masks[0]
    z2 = a1 @ model.w2.T + model.b2
    a2 = np.maximum(z2, 0.0)
    if dropout_masks is not None:
        a2 = a2 * dropout_masks[1]
    y = a2 @ model.wo.T + model.bo

    # softplus(y) - g*y, elementwise; stable for large |y|
    softplus = np.logaddexp(0.0, y)
    loss = float((softplus - g * y).sum() / n)

    p = 1.0 / (1.0 + np.exp(-y))
    dy = (p - g) / n
    grads = {
        "wo": dy.T @ a2,
        "bo": dy.sum(axis=0),
    }
    da2 = dy @ model.wo
    if dropout_masks is not None:
        da2 = da2 * dropout_masks[1]
    dz2 = da2 * (z2 > 0.0)
    grads["w2"] = dz2.T @ a1
    grads["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ model.w2
    if dropout_masks is not None:
        da1 = da1 * dropout_masks[0]
    dz1 = da1 * (z1 > 0.0)
    grads["w1"] = dz1.T @ x
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def train(
    dataset,
    cfg: TrainConfig,
    d_hidden: int | None = None,
    d_bottleneck: int | None = None,
) -> MLPModel:
    """Mini-batch SGD over (feature, target) pairs; deterministic per config.

    ``dataset`` is a sequence of (x, g) arrays or FeatureVector/target pairs.
    Raises TrainingError with the step index if the loss goes non-finite.
    """
    cfg.validate()
    if not dataset:
        raise ValidationError("dataset must be non-empty")
    xs, gs = [], []
    for feat, tgt in dataset:
        xs.append(feat.concat() if isinstance(feat, FeatureVector) else np.asarray(feat, dtype=np.float64))
        gs.append(np.asarray(tgt, dtype=np.float64))
    x_all = np.stack(xs)
    g_all = np.stack(gs)
    if len({x.shape[0] for x in xs}) != 1 or len({g.shape[0] for g in gs}) != 1:
        raise ValidationError("dataset entries must be dimension-consistent")

    model = init_model(
        x_all.shape[1], g_all.shape[1], d_hidden, d_bottleneck, seed=cfg.seed,
        dropout_rate=cfg.dropout_rate,
    )
    rng = np.random.default_rng(cfg.seed)
    n = x_all.shape[0]
    step = 0
    loss = math.nan
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xb, gb = x_all[batch], g_all[batch]
            masks = None
            if cfg.dropout_rate > 0.0:
                keep = 1.0 - cfg.dropout_rate
                m1 = (rng.random((len(batch), model.w1.shape[0])) < keep) / keep
                m2 = (rng.random((len(batch), model.w2.shape[0])) < keep) / keep
                masks = (m1, m2)
            loss, grads = bce_loss_and_grads(model, xb, gb, masks)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            model.w1 -= cfg.learning_rate * grads["w1"]
            model.b1 -= cfg.learning_rate * grads["b1"]
            model.w2 -= cfg.learning_rate * grads["w2"]
            model.b2 -= cfg.learning_rate * grads["b2"]
            model.wo -= cfg.learning_rate * grads["wo"]
            model.bo -= cfg.learning_rate * grads["bo"]
            step += 1
    final, _ = bce_loss_and_grads(model, x_all, g_all)
    model.final_loss = final
    return model


def build_dataset(
    trace: RoutingTrace,
    plan,
    layers,
    history_decay: float = DEFAULT_HISTORY_DECAY,
    window: int = DEFAULT_WINDOW,
    gamma: float = DEFAULT_GAMMA,
):
    """(FeatureVector, target) pairs for the given prefill layers."""
    tokens = plan.retained_ids(trace) if plan is not None else trace.prefill_ids()
    h_v = visual_summary(trace, plan)
    out = []
    for l in layers:
        feat = build_features(trace, plan, l, history_decay, token_ids=tokens, h_v=h_v)
        tgt = build_targets(trace, l, window, gamma, token_ids=tokens)
        out.append((feat, tgt))
    return out


def save_dataset(dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for feat, tgt in dataset:
            x = feat.concat() if isinstance(feat, FeatureVector) else np.asarray(feat)
            f.write(json.dumps({"features": x.tolist(), "targets": np.asarray(tgt).tolist()}) + "\n")


def load_dataset(path: str):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            out.append(
                (np.asarray(obj["features"], dtype=np.float64), np.asarray(obj["targets"], dtype=np.float64))
            )
    return out


# ---------------------------------------------------------------------------
# Prediction, baselines, evaluation
# ---------------------------------------------------------------------------


def predict_topb(y, budget: int) -> list[int]:
    """Expert ids of the `budget` highest scores, descending, ties to lower id."""
    y = np.asarray(y, dtype=np.float64)
    if budget > y.shape[0]:
        raise ValidationError("budget must not exceed the expert count")
    order = np.lexsort((np.arange(y.shape[0]), -y))
    return [int(e) for e in order[:budget]]


def hot_recall(predicted, trace: RoutingTrace, layer: int, token_ids=None) -> float:
    """Fraction of layer+1's activated experts present in the prediction."""
    if token_ids is None:
        token_ids = trace.prefill_ids()
    actual = demand_set(trace, layer + 1, token_ids)
    if not actual:
        return 1.0
    return len(set(predicted) & actual) / len(actual)


def window_recall(
    predicted, trace: RoutingTrace, layer: int, window: int, token_ids=None
) -> float:
    """Secondary metric: recall against the union of the next `window` layers."""
    if token_ids is None:
        token_ids = trace.prefill_ids()
    actual: set[int] = set()
    for d in range(1, window + 1):
        if layer + d > trace.layers - 1:
            break
        actual |= demand_set(trace, layer + d, token_ids)
    if not actual:
        return 1.0
    return len(set(predicted) & actual) / len(actual)


class OraclePredictor:
    """Perfect within-window knowledge: scores equal the decayed targets."""

    def __init__(self, trace: RoutingTrace, token_ids=None, window: int = DEFAULT_WINDOW, gamma: float = DEFAULT_GAMMA):
        self.trace = trace
        self.token_ids = list(token_ids) if token_ids is not None else trace.prefill_ids()
        self.window = window
        self.gamma = gamma

    def priorities(self, layer: int, token_ids=None) -> np.ndarray:
        ids = list(token_ids) if token_ids is not None else self.token_ids
        return build_targets(self.trace, layer, self.window, self.gamma, token_ids=ids)

    def predict(self, layer: int, budget: int, token_ids=None) -> list[int]:
        return predict_topb(self.priorities(layer, token_ids), budget)


class RandomPredictor:
    """Uniform scores; top-B is a uniform B-subset without replacement."""

    def __init__(self, n_experts: int, seed: int = 0):
        self.n_experts = n_experts
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self) -> None:
        """Rewind the draw stream so a reused plan replays identically."""
        self.rng = np.random.default_rng(self.seed)

    def priorities(self, layer: int, token_ids=None) -> np.ndarray:
        return self.rng.random(self.n_experts)

    def predict(self, layer: int, budget: int, token_ids=None) -> list[int]:
        return predict_topb(self.priorities(layer), budget)


class HistoryPredictor:
    """Scores equal the decayed routing histogram up to the current layer."""

    def __init__(self, trace: RoutingTrace, token_ids=None, decay: float = DEFAULT_HISTORY_DECAY):
        self.trace = trace
        self.token_ids = list(token_ids) if token_ids is not None else trace.prefill_ids()
        self.decay = decay

    def priorities(self, layer: int, token_ids=None) -> np.ndarray:
        ids = list(token_ids) if token_ids is not None else self.token_ids
        return routing_histogram(self.trace, ids, layer, self.decay)

    def predict(self, layer: int, budget: int, token_ids=None) -> list[int]:
        return predict_topb(self.priorities(layer, token_ids), budget)


class MLPPredictor:
    """Runs the trained model on features built from the realized routing.

    Priorities are sigmoid probabilities rather than raw logits so they sit
    on the same positive [0, 1] scale as the oracle targets and the history
    histogram (the ordering, and thus top-B, is unchanged).
    """

    def __init__(
        self,
        model: MLPModel,
        trace: RoutingTrace,
        plan=None,
        decay: float = DEFAULT_HISTORY_DECAY,
    ):
        self.model = model
        self.trace = trace
        self.plan = plan
        self.decay = decay
        self._h_v = visual_summary(trace, plan)

    def priorities(self, layer: int, token_ids=None) -> np.ndarray:
        feat = build_features(
            self.trace, self.plan, layer, self.decay, token_ids=token_ids, h_v=self._h_v
        )
        logits = self.model.forward(feat.concat())
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, layer: int, budget: int, token_ids=None) -> list[int]:
        return predict_topb(self.priorities(layer, token_ids), budget)


def baseline_predict(kind: str, state, layer: int, budget: int) -> list[int]:
    """Dispatch helper for the three baseline predictors.

    ``state`` is the matching predictor instance (OraclePredictor,
    RandomPredictor, or HistoryPredictor).
    """
    kinds = {"oracle": OraclePredictor, "random": RandomPredictor, "history": HistoryPredictor}
    if kind not in kinds:
        raise ValidationError(f"unknown baseline kind '{kind}'")
    if not isinstance(state, kinds[kind]):
        raise ValidationError(f"state is not a {kind} predictor")
    return state.predict(layer, budget)
