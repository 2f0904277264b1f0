"""Command-line front door and the composition-generalization evaluation."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import stats

from . import checks
from . import diffcore as dc
from . import env
from .errors import ConfigError, ContractError, TeamformError
from .matching import PreferenceMatrix, balance_capacities, find_blocking_pairs, match
from .nets import ModelConfig, describe
from .training import TrainConfig, collect_episode, train

log = logging.getLogger(__name__)

# (agents, leaders) cells evaluated at execution time
EVAL_CELLS = ((6, 2), (6, 3), (7, 2), (7, 3), (8, 2), (8, 3), (8, 4))
EVAL_AGENTS = (6, 7, 8)
EVAL_CSV_HEADER = ["algo", "leaders", "agents", "mean_return", "std_return", "capture_rate",
                   "blocking_pair_rate"]


@dataclass(frozen=True)
class EvalComposition:
    agents: int
    leaders: int
    episodes: int = 200
    checkpoint: str = ""
    algorithm: str = "oom"

    def __post_init__(self):
        if self.leaders > self.agents - self.leaders:
            raise ConfigError(f"{self.leaders} leaders need at least as many followers "
                              f"among {self.agents} agents")


@dataclass
class EvalReport:
    algo: str
    agents: int
    leaders: int
    seed_means: list          # mean return per seed
    mean_return: float
    std_return: float         # across seeds
    capture_rate: float       # episodes clearing every target
    blocking_pair_rate: float  # team formations with at least one blocking pair
    groupings_per_episode: float
    episodes: int

    def csv_row(self) -> list:
        return [self.algo, self.leaders, self.agents, f"{self.mean_return:.6f}",
                f"{self.std_return:.6f}", f"{self.capture_rate:.6f}",
                f"{self.blocking_pair_rate:.6f}"]


def evaluate_cell(store, comp: EvalComposition, world: env.WorldConfig, seeds: int = 5,
                  base_seed: int = 0, policy: str = "network", trace_path: str | None = None) -> EvalReport:
    """Greedy returns for one (agents, leaders) cell, ``comp.episodes`` split over ``seeds``.

    Every algorithm sees the same start states for a given seed.
    """
    cfg = ModelConfig.from_params(store) if store is not None else ModelConfig()
    cell_world = replace(world, min_agents=comp.agents, max_agents=comp.agents, leaders=comp.leaders)
    per_seed = np.array_split(np.arange(comp.episodes), seeds)
    seed_means, captures, formations, blocked = [], 0, 0, 0
    for s, chunk in enumerate(per_seed):
        rng = np.random.default_rng([base_seed, comp.agents, comp.leaders, s])
        returns = []
        for i in chunk:
            writer = env.TraceWriter(trace_path) if trace_path and i == 0 else None
            if writer:
                writer.__enter__()
            try:
                ep = collect_episode(cell_world, store, cfg, 0.0, comp.algorithm, rng,
                                     episode_id=int(i), trace=writer, policy=policy)
            finally:
                if writer:
                    writer.__exit__(None, None, None)
            returns.append(ep.total_return)
            captures += ep.all_captured
            formations += len(ep.matchings)
            blocked += sum(1 for _, _, b in ep.matchings if b > 0)
        seed_means.append(float(np.mean(returns)) if returns else float("nan"))
    means = np.array(seed_means)
    return EvalReport(comp.algorithm if policy == "network" else "random", comp.agents,
                      comp.leaders, seed_means, float(means.mean()), float(means.std(ddof=1)),
                      captures / comp.episodes, blocked / max(formations, 1),
                      formations / comp.episodes, comp.episodes)


def evaluate(checkpoints: dict, episodes: int = 200, seeds: int = 5, base_seed: int = 0,
             cells=EVAL_CELLS, world: env.WorldConfig | None = None,
             baseline: bool = False, trace_path: str | None = None) -> list[EvalReport]:
    """Run every cell for each ``{algorithm: checkpoint store}`` entry."""
    world = world or env.WorldConfig()
    reports = []
    runs = [(algo, store, "network") for algo, store in checkpoints.items()]
    if baseline:
        runs.append(("oom", None, "random"))
    for algo, store, policy in runs:
        for agents, leaders in cells:
            comp = EvalComposition(agents, leaders, episodes, algorithm=algo)
            rep = evaluate_cell(store, comp, world, seeds, base_seed, policy, trace_path)
            log.info("%s agents=%d leaders=%d return %.3f +- %.3f", rep.algo, agents, leaders,
                     rep.mean_return, rep.std_return)
            reports.append(rep)
    return reports


def seed_mean_pvalue(a: EvalReport, b: EvalReport) -> float:
    """Two-sided Welch test on per-seed mean returns; 1.0 when both are constant and equal."""
    x, y = np.asarray(a.seed_means), np.asarray(b.seed_means)
    if np.ptp(x) == 0 and np.ptp(y) == 0:
        return 1.0 if x[0] == y[0] else 0.0
    return float(stats.ttest_ind(x, y, equal_var=False).pvalue)


def baseline_pvalues(reports: list[EvalReport]) -> dict:
    """``{(algo, agents, leaders): p}`` of every network cell against its random-policy cell."""
    base = {(r.agents, r.leaders): r for r in reports if r.algo == "random"}
    return {(r.algo, r.agents, r.leaders): seed_mean_pvalue(r, base[(r.agents, r.leaders)])
            for r in reports if r.algo != "random" and (r.agents, r.leaders) in base}


def write_eval_csv(reports: list[EvalReport], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def composition_table(reports: list[EvalReport], training: dict | None = None) -> str:
    """Rows per (algorithm, leaders); a training column then one column per agent count.

    Cells without a report (or infeasible) show ``-``.  ``training`` maps an
    algorithm to its training-range return, shown on the two-leader row.
    """
    header = ["algo", "leaders", "train (3-5)"] + [f"{a} agents" for a in EVAL_AGENTS]
    lines = [header]
    rows = sorted({(r.algo, r.leaders) for r in reports}, key=lambda k: (k[0] != "oom", k))
    cells = {(r.algo, r.leaders, r.agents): r for r in reports}
    for algo, leaders in rows:
        label = algo + (" (bp=0)" if algo == "oom" and all(
            r.blocking_pair_rate == 0 for r in reports if r.algo == "oom") else "")
        trained = "-"
        if training and algo in training and leaders == 2:
            trained = f"{training[algo]:.3f}"
        row = [label, str(leaders), trained]
        for agents in EVAL_AGENTS:
            r = cells.get((algo, leaders, agents))
            row.append(f"{r.mean_return:.3f} +- {r.std_return:.3f}" if r else "-")
        lines.append(row)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines)


# command line

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="teamform", description="Leader/follower team formation for cooperative MARL.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a network and write metrics and checkpoints")
    t.add_argument("--config", help="key = value file with training and scenario settings")
    t.add_argument("--seed", type=int)
    t.add_argument("--algo", choices=["oom", "som"])
    t.add_argument("--agents", type=int, help="fix the training population size")
    t.add_argument("--leaders", type=int)
    t.add_argument("--steps", type=int, help="total environment steps")
    t.add_argument("--out", default="runs/train")

    e = sub.add_parser("eval", help="evaluate checkpoints over the composition grid")
    e.add_argument("--oom", metavar="CKPT", help="checkpoint evaluated with order-oriented matching")
    e.add_argument("--som", metavar="CKPT", help="checkpoint evaluated with score-oriented matching")
    e.add_argument("--config", help="scenario file (grid, targets, hazards, ...)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--agents", type=int, help="evaluate one agent count only")
    e.add_argument("--leaders", type=int, help="evaluate one leader count only")
    e.add_argument("--episodes", type=int, default=200, help="episodes per cell, split over seeds")
    e.add_argument("--seeds", type=int, default=5)
    e.add_argument("--baseline", action="store_true", help="add random-policy rows")
    e.add_argument("--trace", help="write the first episode of every cell to this trace log")
    e.add_argument("--out", default="runs/eval")

    m = sub.add_parser("match", help="match a preference record offline")
    m.add_argument("preferences", help="JSON record with agents, leaders and row-major scores ('-' for stdin)")
    m.add_argument("--algorithm", "--algo", dest="algorithm", choices=["oom", "som"], default="oom")
    m.add_argument("--leaders", type=int, help="override the record's leader count")
    m.add_argument("--certify", action="store_true", help="also list blocking pairs")

    c = sub.add_parser("check", help="run the self-check suites")
    c.add_argument("--only", action="append", choices=sorted(checks.SUITES),
                   help="run just this suite (repeatable)")

    r = sub.add_parser("replay", help="render a trace log as text frames")
    r.add_argument("trace")
    r.add_argument("--episode", type=int, help="only frames of this episode id")

    d = sub.add_parser("describe", help="list the parameters stored in a checkpoint")
    d.add_argument("checkpoint")
    return p


def _train_config(args) -> TrainConfig:
    values = env.read_key_values(args.config) if args.config else {}
    overrides = {"seed": args.seed, "algorithm": args.algo, "total_steps": args.steps,
                 "leaders": args.leaders}
    if args.agents is not None:
        overrides.update(min_agents=args.agents, max_agents=args.agents)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_mapping(values)


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    result = train(cfg, out_dir=args.out)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {result.episodes} episodes, {result.optimizer_steps} updates; "
          f"final greedy return {last.get('mean_return', float('nan')):.3f}; outputs in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    if not (args.oom or args.som or args.baseline):
        raise _UsageError("eval needs --oom, --som or --baseline")
    world = env.WorldConfig.from_file(args.config) if args.config else env.WorldConfig()
    cells = [c for c in EVAL_CELLS
             if (args.agents is None or c[0] == args.agents)
             and (args.leaders is None or c[1] == args.leaders)]
    if not cells:
        raise _UsageError("no evaluation cell matches --agents/--leaders")
    stores = {}
    for algo in ("oom", "som"):
        path = getattr(args, algo)
        if path:
            stores[algo] = dc.load_checkpoint(path)
    reports = evaluate(stores, args.episodes, args.seeds, args.seed, cells, world,
                       args.baseline, args.trace)
    os.makedirs(args.out, exist_ok=True)
    write_eval_csv(reports, os.path.join(args.out, "eval.csv"))
    table = composition_table(reports)
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write(table + "\n")
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump([asdict(r) for r in reports], fh, indent=1)
    print(table)
    for (algo, agents, leaders), p in baseline_pvalues(reports).items():
        print(f"{algo} agents={agents} leaders={leaders}: p={p:.3f} against the random policy")
    return 0


def _cmd_match(args) -> int:
    text = sys.stdin.read() if args.preferences == "-" else open(args.preferences).read()
    prefs = PreferenceMatrix.from_record(json.loads(text), args.leaders)
    plan = balance_capacities(prefs.leader_count, len(prefs.followers))
    grouping = match(prefs, args.algorithm, plan)
    out = grouping.to_record()
    if args.certify:
        out["blocking_pairs"] = [list(p) for p in find_blocking_pairs(grouping, prefs, plan)]
    print(json.dumps(out))
    return 0


def _cmd_check(args) -> int:
    results = []
    for name in args.only or checks.SUITES:
        res = checks.run(name)
        print(res.line(), flush=True)
        results.append(res)
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


def _cmd_replay(args) -> int:
    for frame in env.render_trace(args.trace):
        if args.episode is not None and not frame.startswith(f"episode {args.episode} "):
            continue
        print(frame + "\n")
    return 0


def _cmd_describe(args) -> int:
    print(describe(dc.load_checkpoint(args.checkpoint)))
    return 0


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "match": _cmd_match, "check": _cmd_check,
            "replay": _cmd_replay, "describe": _cmd_describe}


def cli(argv=None) -> int:
    """Run one subcommand; returns 0 on success, 1 on failed checks, 2 on usage errors."""
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"teamform: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ContractError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"teamform: error: {exc}", file=sys.stderr)
        return 2
    except TeamformError as exc:
        print(f"teamform: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
