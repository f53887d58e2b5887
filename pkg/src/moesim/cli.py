"""Command-line front end: reproducible experiments from one config file.

Subcommands: gen-trace, compress, train, simulate, ablate, report, defaults.
Exit codes: 0 success, 1 internal error, 2 input/validation error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

from .compress import CompressionConfig, compress
from .errors import (
    ContractError,
    ParseError,
    PlanningError,
    SimulationError,
    TrainingError,
    ValidationError,
)
from .metrics import affinity_report
from .pipeline import (
    DEFAULT_COMPRESS_MS,
    DEFAULT_PREDICTOR_BOOTSTRAP_MS,
    REPORT_COLUMNS,
    MemoryBudget,
    PredictorSpec,
    SimConfig,
    build_plan,
    run_ablation,
    simulate,
)
from .predictor import (
    DEFAULT_BUDGET,
    DEFAULT_GAMMA,
    DEFAULT_HISTORY_DECAY,
    DEFAULT_WINDOW,
    HistoryPredictor,
    MLPModel,
    MLPPredictor,
    OraclePredictor,
    RandomPredictor,
    TrainConfig,
    build_dataset,
    hot_recall,
    save_dataset,
    train,
)
from .presets import preset_geometry
from .trace import TraceGenConfig, generate_trace, load_trace, save_trace

CONFIG_SCHEMA_VERSION = 1

DEFAULTS = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "compression.lambda": 2.0,
    "predictor.window": DEFAULT_WINDOW,
    "predictor.gamma": DEFAULT_GAMMA,
    "predictor.budget": DEFAULT_BUDGET,
    "predictor.history_decay": DEFAULT_HISTORY_DECAY,
    "cache.speculative_grace": 1,
    "pipeline.compress_latency_ms": DEFAULT_COMPRESS_MS,
    "pipeline.predictor_bootstrap_ms": DEFAULT_PREDICTOR_BOOTSTRAP_MS,
}


@dataclass
class RunConfig:
    """Parsed experiment config; sections mirror the library dataclasses."""

    preset: str = "custom"
    trace: dict = field(default_factory=dict)
    compression: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config {path}: invalid JSON ({exc.msg})") from exc
        version = obj.get("schema_version")
        if version != CONFIG_SCHEMA_VERSION:
            raise ValidationError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}")
        return cls(
            preset=obj.get("preset", "custom"),
            trace=obj.get("trace", {}),
            compression=obj.get("compression", {}),
            train=obj.get("train", {}),
            sim=obj.get("sim", {}),
            paths=obj.get("paths", {}),
        )

    def trace_gen_config(self, seed: int | None = None) -> TraceGenConfig:
        geo = preset_geometry(self.preset)
        t = dict(self.trace)
        for key in ("layers", "experts", "k", "shared_experts"):
            if key in geo:
                t.setdefault(key, geo[key])
        if seed is not None:
            t["seed"] = seed
        shape = t.get("saliency_shape", (2.0, 1.0))
        known = {
            "n_visual", "n_text", "layers", "experts", "k", "clusters",
            "cluster_support", "rho", "visual_noise", "embed_dim",
            "decode_steps", "seed", "shared_experts",
        }
        unknown = set(t) - known - {"saliency_shape"}
        if unknown:
            raise ValidationError(f"unknown trace config keys: {sorted(unknown)}")
        try:
            return TraceGenConfig(
                saliency_shape=tuple(shape),
                **{k: v for k, v in t.items() if k != "saliency_shape"},
            )
        except TypeError as exc:
            raise ValidationError(f"bad trace config: {exc}") from exc

    def compression_config(self, l_pinned: int | None = None) -> CompressionConfig:
        c = dict(self.compression)
        prefix = c.get("prefix_layers")
        if prefix is None:
            prefix = tuple(range(l_pinned)) if l_pinned else (0,)
        return CompressionConfig(
            alpha=c.get("alpha", 0.1),
            beta=c.get("beta", 0.5),
            lam=c.get("lambda", c.get("lam", DEFAULTS["compression.lambda"])),
            prefix_layers=tuple(prefix),
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = dict(self.train)
        t.pop("history_decay", None)
        if seed is not None:
            t["seed"] = seed
        try:
            return TrainConfig(**t)
        except TypeError as exc:
            raise ValidationError(f"bad train config: {exc}") from exc

    def sim_config(self, seed: int | None = None) -> SimConfig:
        s = dict(self.sim)
        geo = preset_geometry(self.preset)
        if "expert_size_mb" in geo:
            s.setdefault("expert_size_mb", geo["expert_size_mb"])
        if "shared_experts" in geo:
            s.setdefault("shared_experts", geo["shared_experts"])
        mem = s.pop("memory", None)
        pred = s.pop("predictor", {})
        for key in ("cpu_ms_per_expert", "hybrid_threshold_ms"):
            if s.get(key) is None:
                s.pop(key, None)
        if seed is not None:
            s["seed"] = seed
        try:
            cfg = SimConfig(
                memory=MemoryBudget(**mem) if mem else None,
                predictor=PredictorSpec(**pred) if pred else PredictorSpec(),
                **s,
            )
        except TypeError as exc:
            raise ValidationError(f"bad sim config: {exc}") from exc
        cfg.validate()
        return cfg


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _load_trace_arg(cfg: RunConfig, args):
    path = args.trace or cfg.paths.get("trace")
    if not path:
        raise ValidationError("no trace path given (config paths.trace or --trace)")
    if not os.path.exists(path):
        raise FileNotFoundError(f"trace file not found: {path}")
    return load_trace(path)


def cmd_gen_trace(cfg: RunConfig, args) -> int:
    gen = cfg.trace_gen_config(seed=args.seed)
    trace = generate_trace(gen)
    path = args.trace or cfg.paths.get("trace") or _out_path(args, "trace.jsonl")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_trace(trace, path)
    _say(args, f"wrote trace: {path} (L={trace.layers} E={trace.experts} k={trace.k} N={trace.num_tokens})")
    return 0


def cmd_compress(cfg: RunConfig, args) -> int:
    trace = _load_trace_arg(cfg, args)
    sim = cfg.sim_config(seed=args.seed)
    l_pinned = sim.l_pinned if sim.l_pinned is not None else sim.l_semantic
    ccfg = cfg.compression_config(l_pinned)
    plan = compress(trace, ccfg)

    plan_path = _out_path(args, "plan.json")
    with open(plan_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(plan.to_json() + "\n")

    top = min(sim.predictor.budget, trace.experts)
    raw = affinity_report(trace, trace.prefill_ids(), top)
    kept = affinity_report(trace, plan.retained_ids(trace), top)
    for name, rep in (("affinity_raw.csv", raw), ("affinity_kept.csv", kept)):
        with open(_out_path(args, name), "w", encoding="utf-8", newline="\n") as f:
            f.write(rep.to_csv())
    _say(
        args,
        f"kept {len(plan.keep)}/{len(trace.visual_ids())} visual tokens; "
        f"mean working set {raw.mean_working_set:.2f} -> {kept.mean_working_set:.2f}",
    )
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    trace = _load_trace_arg(cfg, args)
    sim = cfg.sim_config(seed=args.seed)
    l_pinned = sim.l_pinned if sim.l_pinned is not None else sim.l_semantic
    ccfg = cfg.compression_config(l_pinned)
    plan = compress(trace, ccfg)
    tcfg = cfg.train_config(seed=args.seed)
    decay = cfg.train.get("history_decay", DEFAULT_HISTORY_DECAY)

    layers = range(max(l_pinned, 1) - 1, trace.layers - 1)
    dataset = build_dataset(trace, plan, layers, decay, tcfg.window, tcfg.gamma)
    model = train(dataset, tcfg)
    model_path = args.model or cfg.paths.get("model") or _out_path(args, "model.json")
    os.makedirs(os.path.dirname(model_path) or ".", exist_ok=True)
    model.save(model_path, tcfg)
    save_dataset(dataset, _out_path(args, "dataset.jsonl"))

    tokens = plan.retained_ids(trace)
    predictors = {
        "mlp": MLPPredictor(model, trace, plan, decay),
        "history": HistoryPredictor(trace, tokens, decay),
        "random": RandomPredictor(trace.experts, sim.seed),
        "oracle": OraclePredictor(trace, tokens, tcfg.window, tcfg.gamma),
    }
    budget = min(sim.predictor.budget, trace.experts)
    lines = ["layer," + ",".join(predictors)]
    for l in range(max(l_pinned, 1), trace.layers - 1):
        row = [str(l)]
        for predictor in predictors.values():
            picks = predictor.predict(l, budget)
            row.append(repr(hot_recall(picks, trace, l, tokens)))
        lines.append(",".join(row))
    with open(_out_path(args, "recall.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    _say(args, f"trained model -> {model_path} (final loss {model.final_loss:.4f})")
    return 0


def _resolve_plan(cfg: RunConfig, trace, sim: SimConfig, args):
    l_pinned = sim.l_pinned if sim.l_pinned is not None else sim.l_semantic
    ccfg = cfg.compression_config(l_pinned) if cfg.compression else None
    model = None
    if sim.predictor.kind == "mlp":
        model_path = args.model or cfg.paths.get("model")
        if not model_path or not os.path.exists(model_path):
            raise ValidationError("mlp predictor needs an existing model file (paths.model or --model)")
        model = MLPModel.load(model_path)
    return build_plan(trace, sim, ccfg, model=model)


def cmd_simulate(cfg: RunConfig, args) -> int:
    trace = _load_trace_arg(cfg, args)
    sim = cfg.sim_config(seed=args.seed)
    plan = _resolve_plan(cfg, trace, sim, args)
    report = simulate(trace, plan, sim)

    with open(_out_path(args, "report.json"), "w", encoding="utf-8", newline="\n") as f:
        f.write(report.to_json() + "\n")
    with open(_out_path(args, "report.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(REPORT_COLUMNS) + "\n" + report.csv_row() + "\n")
    with open(_out_path(args, "timeline.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write(report.timeline_csv())
    if sim.event_log:
        with open(_out_path(args, "events.csv"), "w", encoding="utf-8", newline="\n") as f:
            f.write("time,op,layer,expert\n")
            for ev in report.events:
                f.write(",".join(str(x) for x in ev) + "\n")
    _say(args, f"makespan {report.makespan:.3f} ms, hit rate {report.hit_rate:.3f}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    trace = _load_trace_arg(cfg, args)
    sim = cfg.sim_config(seed=args.seed)
    l_pinned = sim.l_pinned if sim.l_pinned is not None else sim.l_semantic
    ccfg = cfg.compression_config(l_pinned)
    model = None
    if sim.predictor.kind == "mlp":
        model_path = args.model or cfg.paths.get("model")
        if not model_path or not os.path.exists(model_path):
            raise ValidationError("mlp predictor needs an existing model file (paths.model or --model)")
        model = MLPModel.load(model_path)
    rows = run_ablation(trace, sim, ccfg, model=model)

    lines = ["scenario," + ",".join(REPORT_COLUMNS)]
    for name, report in rows:
        lines.append(f"{name}," + report.csv_row())
        safe = name.replace("+", "plus_")
        with open(_out_path(args, f"ablation_{safe}.json"), "w", encoding="utf-8", newline="\n") as f:
            f.write(report.to_json() + "\n")
    with open(_out_path(args, "ablation.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    for name, report in rows:
        _say(args, f"{name:>13}: makespan {report.makespan:.3f} ms")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    out = args.out
    if not os.path.isdir(out):
        raise FileNotFoundError(f"output directory not found: {out}")
    md = ["# Simulation summary", ""]
    rows = []

    ablation = os.path.join(out, "ablation.csv")
    if os.path.exists(ablation):
        with open(ablation, encoding="utf-8") as f:
            lines = f.read().strip().splitlines()
        md.append("## Ablation")
        md.append("")
        md.append("| scenario | makespan (ms) | hit rate | exposed transfer (ms) |")
        md.append("|---|---|---|---|")
        header = lines[0].split(",")
        for line in lines[1:]:
            cells = line.split(",")
            rec = dict(zip(header, cells))
            rows.append(("ablation:" + rec["scenario"], rec["makespan"], rec["hit_rate"]))
            md.append(
                f"| {rec['scenario']} | {float(rec['makespan']):.3f} | "
                f"{float(rec['hit_rate']):.3f} | {float(rec['exposed_transfer']):.3f} |"
            )
        md.append("")

    report_json = os.path.join(out, "report.json")
    if os.path.exists(report_json):
        with open(report_json, encoding="utf-8") as f:
            rep = json.load(f)
        rows.append(("simulate", rep["makespan"], rep["hit_rate"]))
        md.append("## Single run")
        md.append("")
        md.append(f"- makespan: {rep['makespan']:.3f} ms")
        md.append(f"- hit rate: {rep['hit_rate']:.3f}")
        md.append(f"- exposed transfer: {rep['exposed_transfer']:.3f} ms of {rep['total_transfer']:.3f} ms")
        md.append(f"- stalls: {rep['stalls']}, cpu dispatches: {rep['cpu_dispatches']}")
        md.append("")

    recall = os.path.join(out, "recall.csv")
    if os.path.exists(recall):
        with open(recall, encoding="utf-8") as f:
            lines = f.read().strip().splitlines()
        md.append("## Hot recall per layer")
        md.append("")
        md.append("| " + " | ".join(lines[0].split(",")) + " |")
        md.append("|" + "---|" * len(lines[0].split(",")))
        for line in lines[1:]:
            cells = line.split(",")
            md.append("| " + " | ".join(f"{float(c):.3f}" if i else c for i, c in enumerate(cells)) + " |")
        md.append("")

    for name in ("affinity_raw.csv", "affinity_kept.csv"):
        path = os.path.join(out, name)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                lines = f.read().strip().splitlines()
            ws = [float(line.split(",")[1]) for line in lines[1:]]
            label = "raw" if "raw" in name else "compressed"
            md.append(f"- mean working set ({label} tokens): {sum(ws)/len(ws):.2f}")
    if md[-1] != "":
        md.append("")

    with open(os.path.join(out, "summary.md"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(md) + "\n")
    with open(os.path.join(out, "summary.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("run,makespan,hit_rate\n")
        for name, makespan, hit_rate in rows:
            f.write(f"{name},{makespan},{hit_rate}\n")
    _say(args, f"wrote {os.path.join(out, 'summary.md')}")
    return 0


def cmd_defaults(cfg: RunConfig, args) -> int:
    print(json.dumps(DEFAULTS, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moesim", description=__doc__)
    parser.add_argument("--config", default=None, help="experiment config file (JSON)")
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seeds")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, needs_trace in (
        ("gen-trace", cmd_gen_trace, False),
        ("compress", cmd_compress, True),
        ("train", cmd_train, True),
        ("simulate", cmd_simulate, True),
        ("ablate", cmd_ablate, True),
        ("report", cmd_report, False),
        ("defaults", cmd_defaults, False),
    ):
        p = sub.add_parser(name)
        p.set_defaults(func=fn)
        p.add_argument("--trace", default=None, help="trace file path")
        p.add_argument("--model", default=None, help="model file path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        return args.func(cfg, args)
    except (ValidationError, ParseError, PlanningError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, TrainingError, ContractError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
