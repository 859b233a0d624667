"""Benchmark harness: random orienteering instances, every solver, one table.

Instances are uniform in the unit square with start and end at opposite
corners. Every solver on a given instance is evaluated on the same realized
edge multipliers, so differences between rows are paired.
"""

from __future__ import annotations

import configparser
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .sop import (
    EXACT_MAX_TARGETS,
    TOO_LARGE,
    Metrics,
    OnlinePolicy,
    SOPError,
    SOPInstance,
    SOPNode,
    evaluate,
    solve_exact,
    solve_greedy_offline,
)

GREEDY = "greedy_offline"
ONLINE = "online"
EXACT = "exact"
SOLVERS = (GREEDY, ONLINE, EXACT)


def gen_instance(n: int, seed: int, budget: float = 2.0, variance: float = 0.1) -> SOPInstance:
    """``n`` targets uniform in the unit square with rewards uniform on (0, 1].

    Start and end are extra nodes at (0, 0) and (1, 1) with reward 0; all
    coordinates are divided by the square's diagonal, so the start-end
    distance is exactly 1.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, (n, 2))
    rew = 1.0 - rng.uniform(0.0, 1.0, n)  # [0, 1) flipped to (0, 1]
    P = np.vstack([[0.0, 0.0], pts, [1.0, 1.0]]) / math.sqrt(2)
    w = len(str(n))
    nodes = [SOPNode("start", float(P[0, 0]), float(P[0, 1]))]
    nodes += [SOPNode(f"n{i:0{w}d}", float(P[i, 0]), float(P[i, 1]), float(rew[i - 1])) for i in range(1, n + 1)]
    nodes.append(SOPNode("end", float(P[-1, 0]), float(P[-1, 1])))
    return SOPInstance(tuple(nodes), "start", "end", budget, variance)


@dataclass(frozen=True)
class BenchConfig:
    sizes: tuple[int, ...] = (20, 30, 40)
    budget: float = 2.0
    variance: float = 0.1
    trials: int = 100
    seed: int = 0
    solvers: tuple[str, ...] = (GREEDY, ONLINE)
    delta: float = 0.1
    exact_trials: int = 200

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "solvers", tuple(self.solvers))
        if not self.sizes or min(self.sizes) < 2:
            raise ValueError("sizes must be a nonempty list of counts >= 2")
        if self.trials < 1 or self.exact_trials < 1:
            raise ValueError("trials must be >= 1")
        bad = [s for s in self.solvers if s not in SOLVERS]
        if bad or not self.solvers:
            raise ValueError(f"unknown solvers {bad}; choose from {', '.join(SOLVERS)}")
        if not (self.budget >= 0 and self.variance >= 0):
            raise ValueError("budget and variance must be >= 0")
        if EXACT in self.solvers and max(self.sizes) > EXACT_MAX_TARGETS:
            raise SOPError(TOO_LARGE, f"exact solver allows sizes up to {EXACT_MAX_TARGETS}, got {max(self.sizes)}")


_KEYS = {"sizes", "budget", "variance", "trials", "seed", "solvers", "delta", "exact_trials"}


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def load_bench_config(path) -> BenchConfig:
    """Read the ``[bench]`` section of an INI file; omitted keys keep their defaults."""
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise OSError(f"cannot read bench config {path}")
    if "bench" not in cp:
        raise ValueError(f"{path}: missing [bench] section")
    sec = cp["bench"]
    unknown = set(sec) - _KEYS
    if unknown:
        raise ValueError(f"{path}: unknown bench keys {sorted(unknown)}")
    kw: dict = {}
    if "sizes" in sec:
        kw["sizes"] = tuple(int(s) for s in _split(sec["sizes"]))
    if "solvers" in sec:
        kw["solvers"] = tuple(_split(sec["solvers"]))
    for key in ("budget", "variance", "delta"):
        if key in sec:
            kw[key] = sec.getfloat(key)
    for key in ("trials", "seed", "exact_trials"):
        if key in sec:
            kw[key] = sec.getint(key)
    return BenchConfig(**kw)


@dataclass(frozen=True)
class BenchRow:
    size: int
    solver: str
    metrics: Metrics
    wall_s: float


@dataclass
class BenchTable:
    config: BenchConfig
    rows: list[BenchRow] = field(default_factory=list)

    def cell(self, size: int, solver: str) -> BenchRow:
        for row in self.rows:
            if row.size == size and row.solver == solver:
                return row
        raise KeyError((size, solver))

    def to_json(self, timings: bool = False) -> str:
        """Deterministic JSON; wall times only when ``timings`` is set."""
        rows = []
        for row in self.rows:
            d = {"graph": f"graph{row.size}", "size": row.size, "solver": row.solver, **row.metrics.to_dict()}
            if timings:
                d["wall_s"] = row.wall_s
            rows.append(d)
        cfg = asdict(self.config)
        cfg["sizes"], cfg["solvers"] = list(self.config.sizes), list(self.config.solvers)
        return json.dumps({"config": cfg, "rows": rows}, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        header = ("graph", "solver", "R", "stderr", "F", "trials", "wall_s")
        body = [(f"graph{r.size}", r.solver, f"{r.metrics.R:.3f}", r.metrics.stderr_text(), f"{r.metrics.F:.3f}",
                 str(r.metrics.trials), f"{r.wall_s:.2f}") for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        lines = []
        for i, line in enumerate([header] + body):
            cells = [c.ljust(w) if j < 2 else c.rjust(w) for j, (c, w) in enumerate(zip(line, widths))]
            lines.append("  ".join(cells).rstrip())
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def run_benchmark(config: BenchConfig) -> BenchTable:
    """One instance per size (seeded by ``config.seed``), every solver on it."""
    table = BenchTable(config)
    for n in config.sizes:
        inst = gen_instance(n, config.seed, config.budget, config.variance)
        for solver in config.solvers:
            t0 = time.perf_counter()
            if solver == GREEDY:
                strategy = solve_greedy_offline(inst)
            elif solver == ONLINE:
                strategy = OnlinePolicy(config.delta)
            else:
                strategy = solve_exact(inst, config.exact_trials, config.seed)
            metrics = evaluate(strategy, inst, config.trials, config.seed)
            table.rows.append(BenchRow(n, solver, metrics, time.perf_counter() - t0))
    return table
