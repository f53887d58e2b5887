"""Two-stream execution pipeline: transfer channel + compute stream.

One simulation run is a deterministic, logically single-threaded event loop.
The transfer channel moves one expert at a time, back to back, serving
on-demand loads first and otherwise the highest-priority pending prefetch.
The compute stream executes each layer's demanded experts sequentially,
stalling only on the expert it is waiting for while the channel keeps
draining. The pinned prefix runs with zero transfer cost and doubles as the
startup window that hides the first wave of prefetches.

Execution modes: prefetching (lookahead predictor drives the channel),
reactive (each miss transfers serially right before its compute), and
hybrid (misses whose projected wait exceeds a threshold execute on a serial
CPU stream instead of transferring).
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace

from .cache import (
    ExpertCache,
    LookupStatus,
    RequestStatus,
    ResidencyClass,
    SlabState,
)
from .compress import CompressionConfig, CompressionPlan, compress
from .errors import PlanningError, SimulationError, ValidationError
from .predictor import (
    DEFAULT_BUDGET,
    DEFAULT_GAMMA,
    DEFAULT_HISTORY_DECAY,
    DEFAULT_WINDOW,
    HistoryPredictor,
    MLPPredictor,
    OraclePredictor,
    RandomPredictor,
    predict_topb,
)
from .trace import ExpertRef, RoutingTrace

# Fixed one-time latencies folded into prefix execution (ms), overridable
# in SimConfig: token compression and the predictor's bootstrap invocation.
DEFAULT_COMPRESS_MS = 14.70
DEFAULT_PREDICTOR_BOOTSTRAP_MS = 2.72


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrefixPlan:
    lo: int
    hi: int
    chosen: int


def plan_prefix(
    m_avail_mb: float,
    s_layer_mb: float,
    c_safe_mb: float,
    l_semantic: int,
    override: int | None = None,
) -> PrefixPlan:
    """Pick the pinned-prefix depth inside the valid memory interval.

    The interval is [l_semantic, floor((m_avail - c_safe) / s_layer)]; the
    compact end is chosen so the remaining memory feeds the dynamic cache.
    An explicit override is honored only inside the interval.
    """
    if s_layer_mb <= 0 or m_avail_mb <= 0 or c_safe_mb < 0:
        raise PlanningError("memory quantities must be positive")
    if l_semantic < 0:
        raise PlanningError("l_semantic must be >= 0")
    hi = math.floor((m_avail_mb - c_safe_mb) / s_layer_mb)
    if hi < l_semantic:
        raise PlanningError("insufficient memory for semantic prefix")
    chosen = l_semantic
    if override is not None:
        if not l_semantic <= override <= hi:
            raise PlanningError(
                f"prefix override {override} outside valid interval [{l_semantic}, {hi}]"
            )
        chosen = override
    return PrefixPlan(lo=l_semantic, hi=hi, chosen=chosen)


@dataclass
class MemoryBudget:
    m_avail_mb: float
    c_safe_mb: float
    static_resident_mb: float = 0.0


@dataclass
class PredictorSpec:
    kind: str = "oracle"  # oracle | random | history | mlp | none
    budget: int = DEFAULT_BUDGET
    window: int = DEFAULT_WINDOW
    gamma: float = DEFAULT_GAMMA
    history_decay: float = DEFAULT_HISTORY_DECAY


@dataclass
class SimConfig:
    bandwidth_mb_per_ms: float = 10.0
    expert_size_mb: float = 17.3
    gpu_ms_per_expert: float = 1.0
    cpu_ms_per_expert: float = math.inf
    hybrid_threshold_ms: float = math.inf
    memory: MemoryBudget | None = None
    l_semantic: int = 1
    l_pinned: int | None = None
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    num_slabs: int | None = None
    decode_steps: int = 0
    seed: int = 0
    speculative_grace: int = 1
    victim_policy: str = "priority"
    compress_latency_ms: float = DEFAULT_COMPRESS_MS
    predictor_bootstrap_ms: float = DEFAULT_PREDICTOR_BOOTSTRAP_MS
    shared_experts: int = 0
    event_log: bool = False

    def validate(self) -> None:
        if not self.bandwidth_mb_per_ms > 0:
            raise ValidationError("bandwidth_mb_per_ms must be > 0")
        if not self.expert_size_mb > 0:
            raise ValidationError("expert_size_mb must be > 0")
        if self.gpu_ms_per_expert < 0:
            raise ValidationError("gpu_ms_per_expert must be >= 0")
        if self.cpu_ms_per_expert <= 0:
            raise ValidationError("cpu_ms_per_expert must be > 0")
        if self.decode_steps < 0:
            raise ValidationError("decode_steps must be >= 0")
        if self.speculative_grace < 0:
            raise ValidationError("speculative_grace must be >= 0")
        if self.victim_policy not in ("priority", "fifo"):
            raise ValidationError("victim_policy must be 'priority' or 'fifo'")
        if self.compress_latency_ms < 0 or self.predictor_bootstrap_ms < 0:
            raise ValidationError("bootstrap latencies must be >= 0")

    @property
    def transfer_ms(self) -> float:
        return self.expert_size_mb / self.bandwidth_mb_per_ms


@dataclass
class ExecutionPlan:
    l_pinned: int
    num_slabs: int
    compression: CompressionPlan | None = None
    predictor: object | None = None

    def pinned_keys(self, trace: RoutingTrace) -> set[ExpertRef]:
        return {
            ExpertRef(l, e)
            for l in range(self.l_pinned)
            for e in range(trace.experts)
        }

    def retained_ids(self, trace: RoutingTrace) -> list[int]:
        if self.compression is None:
            return trace.prefill_ids()
        return self.compression.retained_ids(trace)


def build_predictor(trace: RoutingTrace, plan: ExecutionPlan, cfg: SimConfig, model=None):
    spec = cfg.predictor
    tokens = plan.retained_ids(trace)
    if spec.kind == "none":
        return None
    if spec.kind == "oracle":
        return OraclePredictor(trace, tokens, spec.window, spec.gamma)
    if spec.kind == "random":
        return RandomPredictor(trace.experts, cfg.seed)
    if spec.kind == "history":
        return HistoryPredictor(trace, tokens, spec.history_decay)
    if spec.kind == "mlp":
        if model is None:
            raise ValidationError("mlp predictor requires a trained model")
        return MLPPredictor(model, trace, plan.compression, spec.history_decay)
    raise ValidationError(f"unknown predictor kind '{spec.kind}'")


def build_plan(
    trace: RoutingTrace,
    cfg: SimConfig,
    compression_cfg: CompressionConfig | None = None,
    model=None,
) -> ExecutionPlan:
    """Resolve prefix depth, slab count, compression, and the predictor."""
    cfg.validate()
    if cfg.memory is not None:
        s_layer = trace.experts * cfg.expert_size_mb
        prefix = plan_prefix(
            cfg.memory.m_avail_mb, s_layer, cfg.memory.c_safe_mb, cfg.l_semantic, cfg.l_pinned
        )
        l_pinned = prefix.chosen
        num_slabs = cfg.num_slabs
        if num_slabs is None:
            num_slabs = math.floor(cfg.memory.c_safe_mb / cfg.expert_size_mb)
        pinned_mb = l_pinned * s_layer
        if pinned_mb + cfg.memory.c_safe_mb > cfg.memory.m_avail_mb:
            raise PlanningError("pinned prefix plus cache reserve exceeds available memory")
    else:
        l_pinned = cfg.l_pinned if cfg.l_pinned is not None else cfg.l_semantic
        if cfg.num_slabs is None:
            raise PlanningError("num_slabs required when no memory budget is given")
        num_slabs = cfg.num_slabs
    if not 0 <= l_pinned <= trace.layers:
        raise PlanningError("pinned prefix depth outside the trace's layer range")
    if num_slabs < 1:
        raise PlanningError("cache needs at least one slab")

    comp = compress(trace, compression_cfg) if compression_cfg is not None else None
    plan = ExecutionPlan(l_pinned=l_pinned, num_slabs=num_slabs, compression=comp)
    plan.predictor = build_predictor(trace, plan, cfg, model)
    if plan.predictor is not None and l_pinned < 1 and cfg.predictor.kind != "random":
        raise PlanningError("lookahead prediction needs at least one pinned layer of context")
    return plan


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class LayerStat:
    phase: str  # "prefill" or "decode"
    step: int  # -1 for prefill
    layer: int
    start: float
    end: float
    stall_ms: float
    transfers: int
    hits: int


REPORT_COLUMNS = [
    "makespan",
    "total_compute",
    "total_transfer",
    "exposed_transfer",
    "overlapped_transfer",
    "hits",
    "misses",
    "hit_rate",
    "stalls",
    "rejected_loads",
    "cpu_dispatches",
    "on_demand_transfers",
    "inflight_waits",
    "evictions",
    "prefill_ms",
    "decode_steps",
]


@dataclass
class SimReport:
    makespan: float
    total_compute: float
    total_transfer: float
    exposed_transfer: float
    hits: int
    misses: int
    stalls: int
    rejected_loads: int
    cpu_dispatches: int
    on_demand_transfers: int
    inflight_waits: int
    evictions: int
    prefill_ms: float
    decode_ms_per_step: list[float]
    per_layer: list[LayerStat]
    events: list[tuple] = field(default_factory=list)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 1.0

    @property
    def overlapped_transfer(self) -> float:
        return self.total_transfer - self.exposed_transfer

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "total_compute": self.total_compute,
            "total_transfer": self.total_transfer,
            "exposed_transfer": self.exposed_transfer,
            "overlapped_transfer": self.overlapped_transfer,
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": self.hit_rate,
            "stalls": self.stalls,
            "rejected_loads": self.rejected_loads,
            "cpu_dispatches": self.cpu_dispatches,
            "on_demand_transfers": self.on_demand_transfers,
            "inflight_waits": self.inflight_waits,
            "evictions": self.evictions,
            "prefill_ms": self.prefill_ms,
            "decode_ms_per_step": self.decode_ms_per_step,
            "per_layer": [
                [s.phase, s.step, s.layer, s.start, s.end, s.stall_ms, s.transfers, s.hits]
                for s in self.per_layer
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_row(self) -> str:
        vals = {
            "makespan": self.makespan,
            "total_compute": self.total_compute,
            "total_transfer": self.total_transfer,
            "exposed_transfer": self.exposed_transfer,
            "overlapped_transfer": self.overlapped_transfer,
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": self.hit_rate,
            "stalls": self.stalls,
            "rejected_loads": self.rejected_loads,
            "cpu_dispatches": self.cpu_dispatches,
            "on_demand_transfers": self.on_demand_transfers,
            "inflight_waits": self.inflight_waits,
            "evictions": self.evictions,
            "prefill_ms": self.prefill_ms,
            "decode_steps": len(self.decode_ms_per_step),
        }
        return ",".join(repr(vals[c]) if isinstance(vals[c], float) else str(vals[c]) for c in REPORT_COLUMNS)

    def timeline_csv(self) -> str:
        lines = ["phase,step,layer,start_ms,end_ms,stall_ms,transfers,hits"]
        for s in self.per_layer:
            lines.append(
                f"{s.phase},{s.step},{s.layer},{s.start!r},{s.end!r},{s.stall_ms!r},{s.transfers},{s.hits}"
            )
        return "\n".join(lines) + "\n"


def exposed_time(transfers: list[tuple[float, float]], computes: list[tuple[float, float]]) -> float:
    """Total transfer time not covered by any compute-busy interval.

    Both lists must be sorted and non-overlapping, which the serial channel
    and the sequential compute stream guarantee.
    """
    exposed = 0.0
    ci = 0
    for ts, te in transfers:
        if te <= ts:
            continue
        while ci < len(computes) and computes[ci][1] <= ts:
            ci += 1
        t = ts
        j = ci
        while j < len(computes) and computes[j][0] < te and t < te:
            cs, ce = computes[j]
            if cs > t:
                exposed += min(cs, te) - t
            t = max(t, min(ce, te))
            j += 1
        if t < te:
            exposed += te - t
    return exposed


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class _Engine:
    def __init__(
        self,
        trace: RoutingTrace,
        plan: ExecutionPlan,
        cfg: SimConfig,
        reactive: bool,
    ):
        cfg.validate()
        if plan.l_pinned > trace.layers:
            raise SimulationError("plan pins more layers than the trace has")
        self.trace = trace
        self.plan = plan
        self.cfg = cfg
        self.reactive = reactive
        self.cache = ExpertCache(plan.num_slabs, cfg.victim_policy)
        self.predictor = plan.predictor if not reactive else None
        if self.predictor is not None and hasattr(self.predictor, "reset"):
            self.predictor.reset()  # a reused plan must replay identically
        self.prefetching = self.predictor is not None and cfg.predictor.budget > 0
        self.tau = cfg.hybrid_threshold_ms
        self.hybrid = math.isfinite(cfg.cpu_ms_per_expert) and math.isfinite(self.tau)
        self.transfer_ms = cfg.transfer_ms
        self.gpu_ms = cfg.gpu_ms_per_expert
        self.shared = cfg.shared_experts or trace.shared_experts

        self.retained = plan.retained_ids(trace)
        self.all_prefill = trace.prefill_ids()

        # transfer channel
        self.inflight_key: ExpertRef | None = None
        self.inflight_ready = 0.0
        self.demand_q: deque[ExpertRef] = deque()
        self.prefetch_q: dict[ExpertRef, tuple[float, int]] = {}
        self._seq = 0

        # accounting
        self.transfer_intervals: list[tuple[float, float]] = []
        self.compute_intervals: list[tuple[float, float]] = []
        self.total_compute = 0.0
        self.total_transfer = 0.0
        self.hits = 0
        self.misses = 0
        self.stalls = 0
        self.rejected_loads = 0
        self.cpu_dispatches = 0
        self.on_demand_transfers = 0
        self.inflight_waits = 0
        self.cpu_free = 0.0
        self.per_layer: list[LayerStat] = []
        self.events: list[tuple] = []

    # -- transfer channel ---------------------------------------------------
    # On-demand loads hold their slab from the moment they are demanded and
    # go to the front of the channel. Prefetch candidates hold no slab while
    # queued; a slab is claimed only when the channel issues the transfer, so
    # a wide lookahead window can never starve the current layer's demand.

    def _start_transfer(self, key: ExpertRef, t: float) -> None:
        self.inflight_key = key
        self.inflight_ready = t + self.transfer_ms
        self.cache.set_ready(key, self.inflight_ready)
        self.transfer_intervals.append((t, self.inflight_ready))
        self.total_transfer += self.transfer_ms
        if self.cfg.event_log:
            self.events.append((t, "issue", key.layer, key.expert))

    def _try_issue(self, t: float) -> None:
        """Issue the next viable pending request, demand first."""
        while self.inflight_key is None:
            if self.demand_q:
                self._start_transfer(self.demand_q.popleft(), t)
                return
            if not self.prefetch_q:
                return
            key = min(
                self.prefetch_q,
                key=lambda k: (-self.prefetch_q[k][0], k.layer, k.expert, self.prefetch_q[k][1]),
            )
            pri, _ = self.prefetch_q.pop(key)
            if self.cache.lookup(key).status is not LookupStatus.MISS:
                continue
            res = self.cache.request_load(key, pri, ResidencyClass.REQUIRED)
            if res.status is RequestStatus.REJECTED:
                self.rejected_loads += 1
                continue
            if self.cfg.event_log and res.evicted is not None:
                self.events.append((t, "evict", res.evicted.layer, res.evicted.expert))
            self._start_transfer(key, t)

    def _advance(self, until: float) -> None:
        while self.inflight_key is not None and self.inflight_ready <= until:
            key, ready = self.inflight_key, self.inflight_ready
            self.inflight_key = None
            self.cache.complete_load(key, ready)
            if self.cfg.event_log:
                self.events.append((ready, "complete", key.layer, key.expert))
            self._try_issue(ready)

    def _enqueue_demand(self, key: ExpertRef, t: float) -> None:
        self.demand_q.append(key)
        if self.inflight_key is None:
            self._try_issue(t)

    def _wait_resident(self, key: ExpertRef, t: float) -> float:
        self._advance(t)
        entry = self.cache.entry(key)
        while entry is None or entry.state is not SlabState.RESIDENT:
            if self.inflight_key is None:
                raise SimulationError(f"deadlock waiting for expert {key}")
            self._advance(self.inflight_ready)
            entry = self.cache.entry(key)
        return entry.ready_time if entry.ready_time is not None else 0.0

    # -- lookahead emission ---------------------------------------------------

    def _emit(self, context_layer: int, t: float, token_ids) -> None:
        """Refresh priorities, window classes, and the prefetch queue."""
        self._advance(t)
        y = self.predictor.priorities(context_layer, token_ids)
        topb = predict_topb(y, min(self.cfg.predictor.budget, self.trace.experts))
        # zero-score entries carry no predicted demand; fetching them would
        # only hoard slabs, so they never become window keys
        candidates = [int(e) for e in topb if float(y[e]) > 0.0]
        window_keys: set[ExpertRef] = set()
        pri: dict[ExpertRef, float] = {}
        for d in range(1, self.cfg.predictor.window + 1):
            l2 = context_layer + d
            if l2 > self.trace.layers - 1:
                break
            if l2 < self.plan.l_pinned:
                continue
            decay = self.cfg.predictor.gamma ** (d - 1)
            for e in candidates:
                key = ExpertRef(l2, e)
                window_keys.add(key)
                pri[key] = float(y[e]) * decay

        refresh = {
            entry.key: float(y[entry.key.expert])
            for entry in self.cache.slabs
            if entry.state is SlabState.RESIDENT
        }
        self.cache.reclassify(window_keys, self.cfg.speculative_grace, priorities=refresh)

        for key in sorted(window_keys, key=lambda k: (-pri[k], k.layer, k.expert)):
            status = self.cache.lookup(key).status
            if status is not LookupStatus.MISS:
                # resident or already transferring: upgrade class, refresh score
                self.cache.request_load(key, pri[key], ResidencyClass.REQUIRED)
                continue
            old = self.prefetch_q.get(key)
            self.prefetch_q[key] = (pri[key], old[1] if old else self._seq)
            if old is None:
                self._seq += 1

        # the window moved on: drop pending candidates it no longer wants
        for key in [k for k in self.prefetch_q if k not in window_keys]:
            del self.prefetch_q[key]
        if self.inflight_key is None:
            self._try_issue(t)

    # -- layers ---------------------------------------------------------------

    def _compute_block(self, start: float, n_experts: int) -> float:
        """Sequential expert executions with no cache interaction."""
        dur = n_experts * self.gpu_ms
        if dur > 0:
            self.compute_intervals.append((start, start + dur))
        self.total_compute += dur
        return start + dur

    def _run_pinned_layer(self, layer: int, demand: set[int], cursor: float, phase: str, step: int) -> float:
        end = self._compute_block(cursor, len(demand) + self.shared)
        self.per_layer.append(LayerStat(phase, step, layer, cursor, end, 0.0, 0, 0))
        return end

    def _run_cached_layer(
        self, layer: int, demand: set[int], cursor: float, phase: str, step: int, demand_tokens
    ) -> float:
        t0 = cursor
        self._advance(t0)
        layer_hits = 0
        layer_transfers = 0
        stall_ms = 0.0
        gpu_keys: list[ExpertRef | None] = []  # None marks a CPU-dispatched slot
        cpu_jobs = 0

        proj_free = self.inflight_ready if self.inflight_key is not None else t0
        proj_free += sum(self.transfer_ms for _ in self.demand_q)

        for e in sorted(demand):
            key = ExpertRef(layer, e)
            res = self.cache.lookup(key)
            if res.status is LookupStatus.HIT:
                self.hits += 1
                layer_hits += 1
                self.cache.request_load(key, math.inf, ResidencyClass.REQUIRED)
                gpu_keys.append(key)
                continue

            self.misses += 1
            layer_transfers += 1
            if res.status is LookupStatus.IN_FLIGHT and res.ready_time is not None:
                # transfer already under way; cannot be canceled
                if self.hybrid and res.ready_time - t0 > self.tau:
                    self.cpu_dispatches += 1
                    cpu_jobs += 1
                    gpu_keys.append(None)
                else:
                    self.inflight_waits += 1
                    self.cache.request_load(key, math.inf, ResidencyClass.REQUIRED)
                    gpu_keys.append(key)
                continue

            # plain miss (a still-queued prefetch candidate holds no slab)
            self.prefetch_q.pop(key, None)
            projected_wait = (proj_free - t0) + self.transfer_ms
            if self.hybrid and projected_wait > self.tau:
                self.cpu_dispatches += 1
                cpu_jobs += 1
                gpu_keys.append(None)
                continue

            req = self.cache.request_load(key, math.inf, ResidencyClass.REQUIRED)
            if req.status is RequestStatus.REJECTED:
                self.rejected_loads += 1
                if self.hybrid:
                    self.cpu_dispatches += 1
                    cpu_jobs += 1
                    gpu_keys.append(None)
                    continue
                raise SimulationError(
                    f"cache too small for layer {layer} demand (no evictable slab)"
                )
            if self.cfg.event_log and req.evicted is not None:
                self.events.append((t0, "evict", req.evicted.layer, req.evicted.expert))
            self.on_demand_transfers += 1
            self._enqueue_demand(key, t0)
            proj_free = max(proj_free, t0) + self.transfer_ms
            gpu_keys.append(key)

        cpu_end = t0
        for _ in range(cpu_jobs):
            start = max(self.cpu_free, t0)
            self.cpu_free = start + self.cfg.cpu_ms_per_expert
            cpu_end = self.cpu_free

        for key in gpu_keys:
            if key is None:
                continue
            ready = self._wait_resident(key, cursor)
            start = max(cursor, ready)
            if start > cursor:
                stall_ms += start - cursor
                self.stalls += 1
            cursor = self._compute_block(start, 1)

        if self.shared:
            cursor = self._compute_block(cursor, self.shared)

        layer_end = max(cursor, cpu_end)
        cursor = layer_end

        for key in gpu_keys:
            if key is not None:
                self.cache.mark_executed(key)

        self.per_layer.append(LayerStat(phase, step, layer, t0, layer_end, stall_ms, layer_transfers, layer_hits))
        return cursor

    def _run_reactive_layer(
        self, layer: int, demand: set[int], cursor: float, phase: str, step: int
    ) -> float:
        t0 = cursor
        layer_hits = 0
        layer_transfers = 0
        stall_ms = 0.0
        executed: list[ExpertRef] = []
        for e in sorted(demand):
            key = ExpertRef(layer, e)
            res = self.cache.lookup(key)
            if res.status is LookupStatus.HIT:
                self.hits += 1
                layer_hits += 1
                self.cache.request_load(key, math.inf, ResidencyClass.REQUIRED)
            else:
                self.misses += 1
                self.on_demand_transfers += 1
                layer_transfers += 1
                req = self.cache.request_load(key, math.inf, ResidencyClass.REQUIRED)
                if req.status is RequestStatus.REJECTED:
                    raise SimulationError(
                        f"cache too small for layer {layer} demand (no evictable slab)"
                    )
                self.transfer_intervals.append((cursor, cursor + self.transfer_ms))
                self.total_transfer += self.transfer_ms
                self.cache.set_ready(key, cursor + self.transfer_ms)
                self.cache.complete_load(key, cursor + self.transfer_ms)
                stall_ms += self.transfer_ms
                self.stalls += 1
                cursor += self.transfer_ms
            cursor = self._compute_block(cursor, 1)
            executed.append(key)
        if self.shared:
            cursor = self._compute_block(cursor, self.shared)
        for key in executed:
            self.cache.mark_executed(key)
        self.per_layer.append(LayerStat(phase, step, layer, t0, cursor, stall_ms, layer_transfers, layer_hits))
        return cursor

    # -- run ------------------------------------------------------------------

    def run(self) -> SimReport:
        trace, plan, cfg = self.trace, self.plan, self.cfg
        t_boot = 0.0
        if plan.compression is not None:
            t_boot += cfg.compress_latency_ms
        if self.prefetching:
            t_boot += cfg.predictor_bootstrap_ms
        if t_boot > 0:
            self.compute_intervals.append((0.0, t_boot))
        cursor = t_boot

        if self.prefetching and plan.l_pinned > 0:
            self._emit(plan.l_pinned - 1, t_boot, self.retained)

        for layer in range(trace.layers):
            if layer < plan.l_pinned:
                demand = trace.active_union(layer, self.all_prefill)
                cursor = self._run_pinned_layer(layer, demand, cursor, "prefill", -1)
            else:
                demand = trace.active_union(layer, self.retained)
                if self.reactive:
                    cursor = self._run_reactive_layer(layer, demand, cursor, "prefill", -1)
                else:
                    cursor = self._run_cached_layer(layer, demand, cursor, "prefill", -1, self.retained)
                if self.prefetching and layer < trace.layers - 1:
                    self._emit(layer, cursor, self.retained)
        prefill_ms = cursor

        decode_ms: list[float] = []
        steps = trace.phase_marks[: cfg.decode_steps]
        for s, tok in enumerate(steps):
            step_start = cursor
            for layer in range(trace.layers):
                demand = trace.route_set(layer, tok)
                if layer < plan.l_pinned:
                    cursor = self._run_pinned_layer(layer, demand, cursor, "decode", s)
                    if self.prefetching and layer == plan.l_pinned - 1:
                        self._emit(layer, cursor, [tok])
                else:
                    if self.reactive:
                        cursor = self._run_reactive_layer(layer, demand, cursor, "decode", s)
                    else:
                        cursor = self._run_cached_layer(layer, demand, cursor, "decode", s, [tok])
                    if self.prefetching and layer < trace.layers - 1:
                        self._emit(layer, cursor, [tok])
            decode_ms.append(cursor - step_start)

        exposed = exposed_time(self.transfer_intervals, self.compute_intervals)
        return SimReport(
            makespan=cursor,
            total_compute=self.total_compute,
            total_transfer=self.total_transfer,
            exposed_transfer=exposed,
            hits=self.hits,
            misses=self.misses,
            stalls=self.stalls,
            rejected_loads=self.rejected_loads,
            cpu_dispatches=self.cpu_dispatches,
            on_demand_transfers=self.on_demand_transfers,
            inflight_waits=self.inflight_waits,
            evictions=self.cache.evictions,
            prefill_ms=prefill_ms,
            decode_ms_per_step=decode_ms,
            per_layer=self.per_layer,
            events=self.events,
        )


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def simulate(trace: RoutingTrace, plan: ExecutionPlan, cfg: SimConfig) -> SimReport:
    """Pipelined run: layer demand batched onto the channel, prefetch if a
    predictor with a positive budget is attached to the plan."""
    return _Engine(trace, plan, cfg, reactive=False).run()


def simulate_reactive(trace: RoutingTrace, plan: ExecutionPlan, cfg: SimConfig) -> SimReport:
    """No-prefetch control: every miss transfers serially before its compute."""
    return _Engine(trace, plan, cfg, reactive=True).run()


def simulate_hybrid(
    trace: RoutingTrace, plan: ExecutionPlan, cfg: SimConfig, threshold_ms: float | None = None
) -> SimReport:
    """Pipelined run with the CPU fallback armed for long projected waits."""
    if threshold_ms is not None:
        cfg = replace(cfg, hybrid_threshold_ms=threshold_ms)
    if not math.isfinite(cfg.cpu_ms_per_expert):
        raise ValidationError("hybrid mode requires a finite cpu_ms_per_expert")
    return _Engine(trace, plan, cfg, reactive=False).run()


ABLATION_ROWS = ("base", "+compression", "+prediction", "full")


def run_ablation(
    trace: RoutingTrace,
    cfg: SimConfig,
    compression_cfg: CompressionConfig,
    model=None,
) -> list[tuple[str, SimReport]]:
    """Four stacked configurations under one trace and seed.

    base: reactive on the raw token stream, no compression cost.
    +compression: reactive on the compressed demand.
    +prediction: lookahead prefetching, but no speculative grace and naive
    FIFO eviction among Expired entries.
    full: prefetching plus priority eviction and the speculative grace.
    """
    base_cfg = replace(cfg, compress_latency_ms=0.0, predictor_bootstrap_ms=0.0)
    plan_base = build_plan(trace, replace(base_cfg, predictor=PredictorSpec(kind="none")))
    r_base = simulate_reactive(trace, plan_base, base_cfg)

    comp_cfg = replace(cfg, predictor_bootstrap_ms=0.0)
    plan_comp = build_plan(
        trace, replace(comp_cfg, predictor=PredictorSpec(kind="none")), compression_cfg
    )
    r_comp = simulate_reactive(trace, plan_comp, comp_cfg)

    pred_cfg = replace(cfg, speculative_grace=0, victim_policy="fifo")
    plan_pred = build_plan(trace, pred_cfg, compression_cfg, model=model)
    r_pred = simulate(trace, plan_pred, pred_cfg)

    plan_full = build_plan(trace, cfg, compression_cfg, model=model)
    r_full = simulate(trace, plan_full, cfg)

    return [
        ("base", r_base),
        ("+compression", r_comp),
        ("+prediction", r_pred),
        ("full", r_full),
    ]
