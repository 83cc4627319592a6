"""Command-line front end: plan, reorder, run, and bench subcommands.

Configuration is a flat ``key=value`` text file plus flag overrides; reports
are structured text with a machine-readable ``[metrics]`` section (one
``key=value`` per line) so CI can assert on numbers without a parser.
Reports written via ``--report`` are deterministic functions of
(config, seed); wall-clock timing (the reordering overhead ratio) is printed
to stdout only.

Exit codes: 0 verified run, 2 verification failure, 1 usage/config error.
"""

from __future__ import annotations

import argparse
import re
import statistics
import sys
import time
from dataclasses import dataclass, field, fields, replace

from . import graph_io, noo as noo_mod
from .packing import SlotLayout, plan_packing
from .pipeline import LayerSpec, dry_run, infer, required_depth, select_mode, sweep_packing
from .slotvm import CostModel
from .spintra import SpintraOpts, dump_schedule

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    graph: str = ""
    features: str = ""
    weights: str = ""  # comma-separated CSV paths, one per layer
    dims: str = ""  # e.g. "1433-32-16"
    slots: int = 4096
    levels: int = 6
    t: str = "auto"
    n: int = 4
    seed: int = 0
    th: int = 1024
    cpoo_threshold: float = 0.25
    aoo: bool = True
    cpoo: bool = True
    noo: bool = True
    agg: str = "mean"  # "mean" (sampled) | "gcn" (full normalized adjacency)
    activation: str = "square"
    rot_weight: float = 20.0
    unit_seconds: float = 1.75e-4
    bench_seeds: int = 5
    sweep: bool = False
    dump_schedule: str = ""
    report: str = ""
    mode_layers: dict = field(default_factory=dict)

    def layer_dims(self) -> list[int]:
        try:
            dims = [int(d) for d in self.dims.split("-")]
        except ValueError:
            raise UsageError(f"bad dims {self.dims!r}; expected e.g. 64-32-16")
        if len(dims) < 2:
            raise UsageError("dims must name at least input and output width")
        return dims

    def layers(self) -> list[LayerSpec]:
        dims = self.layer_dims()
        return [LayerSpec(a, b, mode=self.mode_layers.get(i + 1, "auto"),
                          activation=self.activation)
                for i, (a, b) in enumerate(zip(dims, dims[1:]))]

    def spintra_opts(self) -> SpintraOpts:
        return SpintraOpts(aoo=self.aoo,
                           cpoo_threshold=self.cpoo_threshold if self.cpoo else 0.0)

    def cost_model(self) -> CostModel:
        return CostModel(rot_cost=self.rot_weight, cmult_cost=self.rot_weight,
                         unit_seconds=self.unit_seconds)


_BOOL_KEYS = {"aoo", "cpoo", "noo", "sweep"}


def load_config_file(path: str) -> dict:
    values: dict = {}
    valid = {f.name for f in fields(RunConfig)} - {"mode_layers"}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            m = re.fullmatch(r"mode_layer(\d+)", key)
            if m:
                values.setdefault("mode_layers", {})[int(m.group(1))] = value
                continue
            if key not in valid:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value
    return values


def _coerce(key: str, value):
    if isinstance(value, str):
        target = RunConfig.__dataclass_fields__[key].type
        if key in _BOOL_KEYS:
            return value.lower() in ("1", "true", "yes", "on")
        if target == "int":
            return int(value)
        if target == "float":
            return float(value)
    return value


def build_config(args, extra_modes: dict) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            if key == "mode_layers":
                cfg.mode_layers.update(value)
            else:
                setattr(cfg, key, _coerce(key, value))
    for f in fields(RunConfig):
        if f.name == "mode_layers":
            continue
        flag = getattr(args, f.name, None)
        if flag is not None:
            setattr(cfg, f.name, _coerce(f.name, flag))
    cfg.mode_layers.update(extra_modes)
    for mode in cfg.mode_layers.values():
        if mode not in ("inter", "spintra", "auto"):
            raise UsageError(f"bad layer mode {mode!r}")
    if cfg.slots & (cfg.slots - 1):
        raise UsageError(f"slots must be a power of two, got {cfg.slots}")
    return cfg


def _load_problem(cfg: RunConfig, seed: int | None = None, need_data: bool = True):
    if not cfg.graph:
        raise UsageError("--graph is required")
    seed = cfg.seed if seed is None else seed
    g = graph_io.load_graph(cfg.graph)
    if cfg.agg == "gcn":
        adj = graph_io.normalize_gcn(g)
    else:
        adj = graph_io.sample_neighbors(g, cfg.n, seed)
    dims = cfg.layer_dims()
    if not need_data:
        return g, adj, None, None
    if cfg.features:
        x = graph_io.load_matrix(cfg.features)
        if x.shape != (g.num_nodes, dims[0]):
            raise UsageError(f"features shape {x.shape} does not match "
                             f"N={g.num_nodes}, dims[0]={dims[0]}")
    else:
        x = graph_io.random_matrix(g.num_nodes, dims[0], seed)
    if cfg.weights:
        paths = cfg.weights.split(",")
        if len(paths) != len(dims) - 1:
            raise UsageError(f"need {len(dims) - 1} weight files, got {len(paths)}")
        weights = [graph_io.load_matrix(p) for p in paths]
        for w, (a, b) in zip(weights, zip(dims, dims[1:])):
            if w.shape != (a, b):
                raise UsageError(f"weight shape {w.shape} != ({a}, {b})")
    else:
        weights = [graph_io.random_matrix(a, b, seed + 1 + i)
                   for i, (a, b) in enumerate(zip(dims, dims[1:]))]
    return g, adj, x, weights


def _resolve_t(cfg: RunConfig, num_nodes: int) -> tuple[int, int]:
    dims = cfg.layer_dims()
    analytic = plan_packing(cfg.slots, num_nodes, dims[0], dims[1], cfg.n,
                            rot_weight=cfg.rot_weight).t
    if cfg.t == "auto":
        return analytic, analytic
    try:
        t = int(cfg.t)
    except ValueError:
        raise UsageError(f"bad packing width {cfg.t!r}; use 'auto' or an integer")
    if t < 1 or t & (t - 1):
        raise UsageError("packing width must be a power of two")
    return analytic, t


def _node_order(cfg: RunConfig, adj, t: int):
    """(positions, wall seconds) for the configured ordering."""
    ring = cfg.slots // t
    if not cfg.noo:
        return None, 0.0
    if adj.num_nodes > ring:
        return None, 0.0  # block layouts keep the identity order
    start = time.perf_counter()
    order = noo_mod.optimize_order(adj, ring, cfg.th)
    return noo_mod.order_backprop(order), time.perf_counter() - start


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def _config_lines(cfg: RunConfig) -> list[str]:
    lines = ["[config]"]
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        if f.name in ("report", "dump_schedule"):
            continue  # output destinations, not run semantics
        value = getattr(cfg, f.name)
        if f.name == "mode_layers":
            for i in sorted(value):
                lines.append(f"mode_layer{i}={value[i]}")
            continue
        lines.append(f"{f.name}={_fmt(value)}")
    return lines


def _hoc_lines(hoc, cfg) -> list[str]:
    lines = []
    for label in sorted(hoc.sections):
        c = hoc.section_counts(label)
        lines.append(f"[{label}]")
        for kind in ("Rot", "PMult", "CMult", "Add"):
            lines.append(f"{kind.lower()}={c[kind]}")
        lines.append(f"latency={_fmt(hoc.sections[label]['latency'])}")
    counts = hoc.counts()
    lines.append("[metrics]")
    lines.append(f"schema={SCHEMA_VERSION}")
    for kind in ("Rot", "PMult", "CMult", "Add"):
        lines.append(f"{kind.lower()}_total={counts[kind]}")
    lines.append(f"latency_units={_fmt(hoc.latency)}")
    lines.append(f"latency_seconds_equiv={_fmt(hoc.latency * cfg.unit_seconds)}")
    return lines


def _emit(text: str, path: str):
    print(text, end="")
    if path:
        with open(path, "w") as fh:
            fh.write(text)


def cmd_plan(cfg: RunConfig) -> int:
    g, adj, _x, _w = _load_problem(cfg, need_data=False)
    analytic, used = _resolve_t(cfg, g.num_nodes)
    dims = cfg.layer_dims()
    lines = ["slotgcn plan report"]
    lines += _config_lines(cfg)
    lines.append("[plan]")
    lines.append(f"t_analytic={analytic}")
    lines.append(f"t_used={used}")
    if cfg.sweep:
        sweep = sweep_packing(adj, cfg.layers(), slots=cfg.slots, levels=cfg.levels,
                              spintra_opts=cfg.spintra_opts(),
                              rot_weight=cfg.rot_weight, cost_model=cfg.cost_model())
        lines.append(f"t_sweep={sweep['best_t']}")
        for t in sorted(sweep["costs"]):
            lines.append(f"sweep_cost_t{t}={_fmt(sweep['costs'][t])}")
    _hoc, decisions, _scheds = dry_run(
        adj, cfg.layers(), slots=cfg.slots, levels=cfg.levels, t=used,
        spintra_opts=cfg.spintra_opts(), rot_weight=cfg.rot_weight,
        cost_model=cfg.cost_model())
    for d in decisions:
        forced = " forced" if d.forced else ""
        lines.append(f"mode_layer{d.layer}={d.chosen}{forced} "
                     f"inter_cost={_fmt(d.inter_cost)} "
                     f"spintra_cost={_fmt(d.spintra_cost)} c={_fmt(d.c)}")
    for i, (a, b) in enumerate(zip(dims, dims[1:]), start=1):
        layout = SlotLayout(slots=cfg.slots, t=used, num_nodes=g.num_nodes,
                            feat_dim=a)
        lines.append(f"utilization_layer{i}={_fmt(layout.utilization())}")
    lines.append("[metrics]")
    lines.append(f"schema={SCHEMA_VERSION}")
    lines.append(f"t={used}")
    _emit("\n".join(lines) + "\n", cfg.report)
    return 0


def cmd_reorder(cfg: RunConfig, out_path: str) -> int:
    _g, adj, _x, _w = _load_problem(cfg, need_data=False)
    _analytic, t = _resolve_t(cfg, adj.num_nodes)
    ring = cfg.slots // t
    if adj.num_nodes > ring:
        raise UsageError(f"{adj.num_nodes} nodes exceed the ring of {ring} slots")
    order = noo_mod.optimize_order(adj, ring, cfg.th)
    noo_mod.write_order(order, out_path)
    print(f"order written to {out_path} "
          f"(regions={len(order.regions)}, ring={ring})")
    return 0


def cmd_run(cfg: RunConfig) -> int:
    g, adj, x, weights = _load_problem(cfg)
    _analytic, t = _resolve_t(cfg, g.num_nodes)
    node_pos, noo_wall = _node_order(cfg, adj, t)
    res = infer(adj, x, weights, cfg.layers(), slots=cfg.slots, levels=cfg.levels,
                t=t, node_pos=node_pos, spintra_opts=cfg.spintra_opts(),
                rot_weight=cfg.rot_weight, cost_model=cfg.cost_model())
    lines = ["slotgcn run report"]
    lines += _config_lines(cfg)
    lines.append("[plan]")
    lines.append(f"t_used={t}")
    lines.append(f"depth={res.depth}")
    lines.append(f"noo_applied={_fmt(node_pos is not None)}")
    for d in res.decisions:
        forced = " forced" if d.forced else ""
        lines.append(f"mode_layer{d.layer}={d.chosen}{forced} "
                     f"inter_cost={_fmt(d.inter_cost)} "
                     f"spintra_cost={_fmt(d.spintra_cost)} c={_fmt(d.c)}")
    for i, layout in enumerate(res.layouts[:-1], start=1):
        lines.append(f"utilization_layer{i}={_fmt(layout.utilization())}")
    body = _hoc_lines(res.hoc, cfg)
    body.append(f"verify_max_abs={_fmt(res.verify.max_abs)}")
    body.append(f"verify_max_rel={_fmt(res.verify.max_rel)}")
    body.append(f"verified={_fmt(res.verify.passed)}")
    schedule_rots = sum(s.rot_count() for s in res.schedules.values())
    body.append(f"schedule_rot={schedule_rots}")
    text = "\n".join(lines + body) + "\n"
    _emit(text, cfg.report)
    # Wall-clock timing is kept out of the report file so reports stay
    # byte-identical across runs of the same config.
    he_seconds = res.hoc.latency * cfg.unit_seconds
    print("[timing]")
    print(f"noo_wall_seconds={noo_wall:.3f}")
    print(f"latency_seconds_equiv={_fmt(he_seconds)}")
    rho = noo_wall / he_seconds if he_seconds > 0 else float("inf")
    print(f"rho={rho:.6f}")
    if cfg.dump_schedule:
        with open(cfg.dump_schedule, "w") as fh:
            for layer in sorted(res.schedules):
                fh.write(f"# layer {layer}\n")
                fh.write(dump_schedule(res.schedules[layer]))
        print(f"schedule trace written to {cfg.dump_schedule}")
    return 0 if res.verify.passed else 2


def cmd_bench(cfg: RunConfig, cpoo_sweep: bool) -> int:
    g, _adj, _x, _w = _load_problem(cfg, need_data=False)
    _analytic, t = _resolve_t(cfg, g.num_nodes)
    seeds = [cfg.seed + i for i in range(max(cfg.bench_seeds, 1))]
    lines = ["slotgcn bench report"]
    lines += _config_lines(cfg)

    def measure(aoo: bool, cpoo_threshold: float, use_noo: bool, seed: int):
        adj = (graph_io.normalize_gcn(g) if cfg.agg == "gcn"
               else graph_io.sample_neighbors(g, cfg.n, seed))
        sub = replace(cfg, aoo=aoo, cpoo=cpoo_threshold > 0,
                      cpoo_threshold=cpoo_threshold, noo=use_noo)
        node_pos, _ = _node_order(sub, adj, t)
        hoc, _, scheds = dry_run(adj, cfg.layers(), slots=cfg.slots,
                                 levels=cfg.levels, t=t, node_pos=node_pos,
                                 spintra_opts=sub.spintra_opts(),
                                 rot_weight=cfg.rot_weight,
                                 cost_model=cfg.cost_model())
        sched_rot = sum(s.rot_count() for s in scheds.values())
        return hoc.counts()["Rot"], hoc.latency, sched_rot

    if cpoo_sweep:
        lines.append("[cpoo-sweep]")
        for threshold in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]:
            rots = [measure(cfg.aoo, threshold, cfg.noo, s)[0] for s in seeds]
            lines.append(f"threshold={threshold:.1f} rot_mean={_fmt(statistics.mean(rots))} "
                         f"rot_std={_fmt(statistics.pstdev(rots))}")
    else:
        lines.append("[grid]")
        for aoo in (True, False):
            for cpoo in (True, False):
                for use_noo in (True, False):
                    rows = [measure(aoo, cfg.cpoo_threshold if cpoo else 0.0,
                                    use_noo, s) for s in seeds]
                    rot_m = statistics.mean(r[0] for r in rows)
                    rot_s = statistics.pstdev([r[0] for r in rows])
                    lat_m = statistics.mean(r[1] for r in rows)
                    lat_s = statistics.pstdev([r[1] for r in rows])
                    lines.append(
                        f"aoo={_fmt(aoo)} cpoo={_fmt(cpoo)} noo={_fmt(use_noo)} "
                        f"rot_mean={_fmt(rot_m)} rot_std={_fmt(rot_s)} "
                        f"latency_mean={_fmt(lat_m)} latency_std={_fmt(lat_s)}")
    lines.append("[metrics]")
    lines.append(f"schema={SCHEMA_VERSION}")
    lines.append(f"seeds={len(seeds)}")
    _emit("\n".join(lines) + "\n", cfg.report)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _extract_mode_flags(argv: list[str]) -> tuple[list[str], dict]:
    """Pull dynamic --mode-layer<i> flags out of argv before argparse."""
    modes: dict = {}
    cleaned: list[str] = []
    i = 0
    while i < len(argv):
        arg = argv[i]
        m = re.fullmatch(r"--mode-layer(\d+)(?:=(.*))?", arg)
        if m:
            if m.group(2) is not None:
                modes[int(m.group(1))] = m.group(2)
            else:
                if i + 1 >= len(argv):
                    raise UsageError(f"{arg} needs a value")
                modes[int(m.group(1))] = argv[i + 1]
                i += 1
        else:
            cleaned.append(arg)
        i += 1
    return cleaned, modes


def make_parser() -> _Parser:
    parser = _Parser(prog="slotgcn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--graph")
        p.add_argument("--features")
        p.add_argument("--weights")
        p.add_argument("--dims")
        p.add_argument("--slots", type=int)
        p.add_argument("--levels", type=int)
        p.add_argument("--t")
        p.add_argument("--n", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--th", type=int)
        p.add_argument("--cpoo-threshold", dest="cpoo_threshold", type=float)
        p.add_argument("--no-aoo", dest="aoo", action="store_false", default=None)
        p.add_argument("--no-cpoo", dest="cpoo", action="store_false", default=None)
        p.add_argument("--no-noo", dest="noo", action="store_false", default=None)
        p.add_argument("--agg", choices=["mean", "gcn"])
        p.add_argument("--activation", choices=["square", "none"])
        p.add_argument("--rot-weight", dest="rot_weight", type=float)
        p.add_argument("--unit-seconds", dest="unit_seconds", type=float)
        p.add_argument("--report")

    p_plan = sub.add_parser("plan", help="packing width and mode decisions")
    common(p_plan)
    p_plan.add_argument("--sweep", action="store_true", default=None)

    p_reorder = sub.add_parser("reorder", help="emit the optimized node order")
    common(p_reorder)
    p_reorder.add_argument("--out", required=True, help="order output path")

    p_run = sub.add_parser("run", help="execute and verify one inference")
    common(p_run)
    p_run.add_argument("--dump-schedule", dest="dump_schedule")

    p_bench = sub.add_parser("bench", help="optimization ablation grid")
    common(p_bench)
    p_bench.add_argument("--bench-seeds", dest="bench_seeds", type=int)
    p_bench.add_argument("--cpoo-sweep", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cleaned, modes = _extract_mode_flags(list(argv))
        args = make_parser().parse_args(cleaned)
        cfg = build_config(args, modes)
        if args.command == "plan":
            return cmd_plan(cfg)
        if args.command == "reorder":
            return cmd_reorder(cfg, args.out)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "bench":
            return cmd_bench(cfg, args.cpoo_sweep)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
