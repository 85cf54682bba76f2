"""Command-line front end.

    hallucdet gen-world [--config PATH] [--seed-list S] [--out DIR]
    hallucdet train     [--config PATH] [--seed-list S] [--shots K] [--m M] ...
    hallucdet ablate AXIS [...]      AXIS in em_vs_joint, num_halluc, head_kind, variant, shots
    hallucdet report CSV [CSV ...] [--out DIR]

Configs are sectioned key=value files with sections [world], [train] and
[run]. Nested settings use dotted keys (``finetune.learning_rate = 0.1``).
Every run directory gets a ``manifest.ini`` in the same format, which can be
passed back through ``--config`` to repeat the run bit for bit.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import pipeline
from .metrics import mean_and_half_width
from .numerics import Rng
from .synthworld import WorldConfig, generate_world, save_world

AXES = ("em_vs_joint", "num_halluc", "head_kind", "variant", "shots")
HALLUC_GRID = (0, 1, 2, 3, 5, 10, 20)
SHOT_GRID = (1, 2, 3, 5, 10)
FIXED_COLUMNS = ("seed", "shot", "proposal_mode", "head_kind", "variant", "m", "em_iters",
                 "mean_novel_ap", "tp_count", "fp_count")
AGGREGATE = "AGGREGATE"


class ConfigError(ValueError):
    pass


class ReportError(ValueError):
    pass


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: pipeline.TrainConfig = field(default_factory=pipeline.TrainConfig)
    seeds: tuple[int, ...] = tuple(range(20))
    out: Path = Path("runs")


# ---------------------------------------------------------------- config text

def parse_seed_list(text: str) -> tuple[int, ...]:
    """``"0-19"``, ``"1,4,9"`` or a mix such as ``"0-4,10"``."""
    seeds = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed list {text!r}") from None
    if not seeds:
        raise ConfigError(f"empty seed list {text!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {text!r}")
    return tuple(seeds)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_like(default, text: str, key: str):
    text = text.strip()
    try:
        if default is None:
            return None if text.lower() == "none" else int(text)
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def _flatten(obj, prefix: str = "") -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = value
    return out


def _apply(obj, items: dict[str, str], section: str):
    """New dataclass with flattened ``items`` applied; unknown keys are errors."""
    known = _flatten(obj)
    unknown = sorted(set(items) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    nested: dict[str, dict[str, str]] = {}
    direct = {}
    for key, text in items.items():
        if "." in key:
            head, rest = key.split(".", 1)
            nested.setdefault(head, {})[rest] = text
        else:
            direct[key] = _parse_like(known[key], text, f"[{section}] {key}")
    for head, sub in nested.items():
        direct[head] = _apply(getattr(obj, head), sub, f"{section}.{head}")
    try:
        return replace(obj, **direct)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def load_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    exp = ExperimentConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "world":
            exp.world = _apply(exp.world, items, "world")
        elif section == "train":
            exp.train = _apply(exp.train, items, "train")
        elif section == "run":
            unknown = sorted(set(items) - {"seeds", "out"})
            if unknown:
                raise ConfigError(f"unknown key(s) in [run]: {', '.join(unknown)}")
            if "seeds" in items:
                exp.seeds = parse_seed_list(items["seeds"])
            if "out" in items:
                exp.out = Path(items["out"])
        elif section == "manifest":
            continue
        else:
            raise ConfigError(f"unknown section [{section}]")
    return exp


def dump_config(exp: ExperimentConfig, extra: dict[str, str] | None = None) -> str:
    lines = []
    for name, obj in (("world", exp.world), ("train", exp.train)):
        lines.append(f"[{name}]")
        lines += [f"{k} = {_format_value(v)}" for k, v in _flatten(obj).items()]
        lines.append("")
    lines += ["[run]", f"seeds = {','.join(str(s) for s in exp.seeds)}", f"out = {exp.out}", ""]
    if extra:
        lines.append("[manifest]")
        lines += [f"{k} = {v}" for k, v in extra.items()]
        lines.append("")
    return "\n".join(lines)


def write_manifest(directory: Path, exp: ExperimentConfig, command: str) -> Path:
    path = directory / "manifest.ini"
    path.write_text(dump_config(exp, {"command": command, "code_version": code_version()}))
    return path


# ---------------------------------------------------------------- running

def worker_count() -> int:
    raw = os.environ.get("HALLUC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"HALLUC_THREADS must be an integer, got {raw!r}") from None


class BaseCache:
    """Stage-1 results shared between sweep cells that agree on every stage-1 setting."""

    def __init__(self):
        self._states = {}

    def state(self, config: pipeline.TrainConfig, seed: int, world: WorldConfig) -> pipeline.BaseState:
        key = (pipeline.base_stage_key(config), seed, world)
        state = self._states.get(key)
        if state is None:
            rng = Rng(seed)
            w = generate_world(world, rng.child("world"))
            state = pipeline.train_base_stage(w, config, rng.child("base"))
            self._states[key] = state
        return state

    def run(self, config: pipeline.TrainConfig, seed: int, world: WorldConfig) -> pipeline.EvalReport:
        return pipeline.run_single(config, seed, world, self.state(config, seed, world)).report


def run_cell(config: pipeline.TrainConfig, seeds, world: WorldConfig,
             cache: BaseCache | None = None) -> dict[int, pipeline.EvalReport]:
    cache = cache or BaseCache()
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        reports = list(pool.map(lambda s: cache.run(config, int(s), world), seeds))
    return dict(sorted(zip((int(s) for s in seeds), reports)))


def cell_rows(config: pipeline.TrainConfig, reports: dict[int, pipeline.EvalReport]) -> tuple[list[str], list[list]]:
    classes = sorted(next(iter(reports.values())).per_class_ap)
    header = list(FIXED_COLUMNS) + [f"ap_{c}" for c in classes] + ["procedure"]
    variant = config.variant if config.m > 0 else pipeline.NONE
    em_iters = config.em_iterations if config.procedure == "em" else 0
    common = [config.shot, config.proposal_mode, config.head_kind, variant, config.m, em_iters]
    rows = []
    for seed, r in reports.items():
        rows.append([seed, *common, repr(r.mean_novel_ap), r.tp_count, r.fp_count,
                     *(repr(r.per_class_ap[c]) for c in classes), config.procedure])
    agg = pipeline.aggregate(reports)
    rows.append([AGGREGATE, *common, repr(agg.mean_novel_ap), repr(agg.mean_tp), repr(agg.mean_fp),
                 *(repr(agg.per_class_ap[c]) for c in classes), config.procedure])
    return header, rows


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def ablation_cells(axis: str, base: pipeline.TrainConfig, shots=None) -> list[tuple[str, pipeline.TrainConfig]]:
    if axis == "em_vs_joint":
        return [("joint", replace(base, procedure="joint")),
                ("em1", replace(base, procedure="em", em_iterations=1)),
                ("em2", replace(base, procedure="em", em_iterations=2))]
    if axis == "num_halluc":
        return [(f"m{m}", replace(base, m=m)) for m in HALLUC_GRID]
    m = base.m if base.m > 0 else 20
    if axis == "head_kind":
        return [(f"{k}_{tag}", replace(base, head_kind=k, m=mm))
                for k in ("cosine", "fc") for tag, mm in (("base", 0), ("halluc", m))]
    if axis == "variant":
        return [("none", replace(base, m=0)),
                ("conservative", replace(base, variant=pipeline.CONSERVATIVE, m=m)),
                ("aggressive", replace(base, variant=pipeline.AGGRESSIVE, m=m))]
    if axis == "shots":
        return [(f"k{k}_{tag}", replace(base, shot=k, m=mm))
                for k in (shots or SHOT_GRID) for tag, mm in (("base", 0), ("halluc", m))]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


# ---------------------------------------------------------------- report

@dataclass
class CellSummary:
    source: str
    labels: dict[str, str]
    aps: np.ndarray
    tp: np.ndarray
    fp: np.ndarray

    @property
    def name(self) -> str:
        lab = self.labels
        proc = "joint" if lab["procedure"] == "joint" else f"em{lab['em_iters']}"
        return (f"K={lab['shot']} {lab['proposal_mode']}/{lab['head_kind']} "
                f"{lab['variant']} m={lab['m']} {proc}")

    def key_without(self, *names) -> tuple:
        return tuple(sorted((k, v) for k, v in self.labels.items() if k not in names))


def read_cell_csv(path: Path) -> CellSummary:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ReportError(f"{path}: empty file")
    header = rows[0]
    missing = [c for c in FIXED_COLUMNS if c not in header]
    if missing:
        raise ReportError(f"{path}: header lacks column(s) {', '.join(missing)}")
    col = {name: i for i, name in enumerate(header)}
    label_cols = ["shot", "proposal_mode", "head_kind", "variant", "m", "em_iters"]
    aps, tps, fps, labels, saw_aggregate = [], [], [], None, False
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ReportError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
        if row[0] == AGGREGATE:
            saw_aggregate = True
            continue
        try:
            int(row[0])
            aps.append(float(row[col["mean_novel_ap"]]))
            tps.append(float(row[col["tp_count"]]))
            fps.append(float(row[col["fp_count"]]))
        except ValueError as exc:
            raise ReportError(f"{path}: row {lineno}: {exc}") from None
        these = {c: row[col[c]] for c in label_cols}
        these["procedure"] = row[col["procedure"]] if "procedure" in col else "em"
        if labels is None:
            labels = these
        elif these != labels:
            raise ReportError(f"{path}: row {lineno} belongs to a different cell")
    if not saw_aggregate:
        raise ReportError(f"{path}: missing {AGGREGATE} row")
    if len(aps) < 2:
        raise ReportError(f"{path}: need at least two seed rows")
    return CellSummary(str(path), labels, np.array(aps), np.array(tps), np.array(fps))


def _paired(a: CellSummary, b: CellSummary) -> bool:
    return len(a.aps) == len(b.aps)


def directional_checks(cells: list[CellSummary]) -> list[tuple[str, bool]]:
    """Pass/fail flags for every comparable pair of cells found in the input."""
    checks = []
    baselines = [c for c in cells if c.labels["m"] == "0" or c.labels["variant"] == pipeline.NONE]
    hallucinating = [c for c in cells if c not in baselines]
    for h in hallucinating:
        for b in baselines:
            if h.key_without("m", "variant", "em_iters", "procedure") != b.key_without("m", "variant", "em_iters", "procedure"):
                continue
            gain = h.aps.mean() - b.aps.mean()
            checks.append((f"{h.name} vs baseline: AP gain {gain:+.4f} >= 0.02", gain >= 0.02))
            checks.append((f"{h.name} vs baseline: FP {h.fp.mean():.2f} < {b.fp.mean():.2f}",
                           h.fp.mean() < b.fp.mean()))
    by_proc = {}
    for c in cells:
        proc = "joint" if c.labels["procedure"] == "joint" else f"em{c.labels['em_iters']}"
        by_proc.setdefault(c.key_without("em_iters", "procedure"), {})[proc] = c
    for group in by_proc.values():
        if "em2" in group and "joint" in group and _paired(group["em2"], group["joint"]):
            e, j = group["em2"], group["joint"]
            wins = int((e.aps > j.aps).sum())
            need = int(np.ceil(0.7 * len(e.aps)))
            checks.append((f"EM-2 >= joint: {e.aps.mean():.4f} vs {j.aps.mean():.4f}, wins {wins}/{len(e.aps)}",
                           e.aps.mean() >= j.aps.mean() and wins >= need))
        if "em2" in group and "em1" in group:
            e2, e1 = group["em2"], group["em1"]
            checks.append((f"EM-2 >= EM-1: {e2.aps.mean():.4f} vs {e1.aps.mean():.4f}",
                           e2.aps.mean() >= e1.aps.mean()))
    return checks


def render_report(cells: list[CellSummary]) -> tuple[str, list[list]]:
    lines = ["| cell | seeds | mean novel AP | 95% half-width | mean TP | mean FP |",
             "|---|---|---|---|---|---|"]
    plot = []
    for c in cells:
        mean, half = mean_and_half_width(c.aps)
        lines.append(f"| {c.name} | {len(c.aps)} | {mean:.4f} | {half:.4f} | "
                     f"{c.tp.mean():.2f} | {c.fp.mean():.2f} |")
        plot.append([c.name, repr(mean), repr(half)])
    checks = directional_checks(cells)
    if checks:
        lines += ["", "Directional checks:"]
        lines += [f"- [{'PASS' if ok else 'FAIL'}] {text}" for text, ok in checks]
    return "\n".join(lines) + "\n", plot


# ---------------------------------------------------------------- commands

def _resolve(args) -> ExperimentConfig:
    exp = load_config(Path(args.config).read_text()) if args.config else ExperimentConfig()
    if args.seed_list:
        exp.seeds = parse_seed_list(args.seed_list)
    if args.out:
        exp.out = Path(args.out)
    train = {}
    if getattr(args, "shots", None):
        shots = parse_seed_list(args.shots)
        train["shot"] = shots[0]
        args.shot_list = shots
    for flag, key in (("m", "m"), ("proposal", "proposal_mode"), ("head", "head_kind"),
                      ("variant", "variant"), ("em_iters", "em_iterations")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    if train:
        exp.train = replace(exp.train, **train)
    if exp.train.variant == pipeline.NONE and "m" not in train:
        exp.train = replace(exp.train, m=0)
    exp.world.validate()
    exp.train.validate()
    return exp


def cmd_gen_world(args) -> int:
    exp = _resolve(args)
    exp.out.mkdir(parents=True, exist_ok=True)
    seed = exp.seeds[0]
    world = generate_world(exp.world, Rng(seed).child("world"))
    path = exp.out / f"world_seed{seed}.kv"
    save_world(path, world)
    write_manifest(exp.out, exp, "gen-world")
    err = world.orthonormality_error()
    print(f"wrote {path}: d={world.feature_dim}, {world.base_classes} base / {world.novel_classes} novel classes")
    print(f"mode orthonormality error {err:.3e} ({'ok' if err < 1e-10 else 'FAILED'})")
    return 0


def cmd_train(args) -> int:
    exp = _resolve(args)
    if len(exp.seeds) < 2:
        raise ConfigError("train needs at least two seeds")
    exp.out.mkdir(parents=True, exist_ok=True)
    reports = run_cell(exp.train, exp.seeds, exp.world)
    header, rows = cell_rows(exp.train, reports)
    path = exp.out / "results.csv"
    write_csv(path, header, rows)
    write_manifest(exp.out, exp, "train")
    agg = pipeline.aggregate(reports)
    print(f"wrote {path}: mean novel AP {agg.mean_novel_ap:.4f} +- {agg.ap_half_width:.4f}, "
          f"TP {agg.mean_tp:.1f}, FP {agg.mean_fp:.1f}")
    return 0


def cmd_ablate(args) -> int:
    exp = _resolve(args)
    if len(exp.seeds) < 2:
        raise ConfigError("ablate needs at least two seeds")
    shot_list = getattr(args, "shot_list", None) if args.axis == "shots" else None
    cells = ablation_cells(args.axis, exp.train, shot_list)
    directory = exp.out / args.axis
    directory.mkdir(parents=True, exist_ok=True)
    cache = BaseCache()
    sweep = []
    for name, config in cells:
        reports = run_cell(config, exp.seeds, exp.world, cache)
        header, rows = cell_rows(config, reports)
        write_csv(directory / f"{name}.csv", header, rows)
        agg = pipeline.aggregate(reports)
        sweep.append([name, repr(agg.mean_novel_ap), repr(agg.ap_half_width), repr(agg.mean_tp), repr(agg.mean_fp)])
        print(f"{name:16s} AP {agg.mean_novel_ap:.4f} +- {agg.ap_half_width:.4f}  "
              f"TP {agg.mean_tp:.1f}  FP {agg.mean_fp:.1f}", flush=True)
    write_csv(directory / "sweep.csv", ["cell", "mean_novel_ap", "half_width", "mean_tp", "mean_fp"], sweep)
    write_manifest(directory, exp, f"ablate {args.axis}")
    return 0


def cmd_report(args) -> int:
    cells = [read_cell_csv(Path(p)) for p in args.csv]
    text, plot = render_report(cells)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.md").write_text(text)
        write_csv(out / "plot.csv", ["x", "y", "err"], plot)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hallucdet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training=True):
        p.add_argument("--config", help="sectioned key=value config file")
        p.add_argument("--seed-list", help="seeds, e.g. 0-19 or 1,2,5")
        p.add_argument("--out", help="output directory")
        if training:
            p.add_argument("--shots", help="shot count (a list for the shots axis)")
            p.add_argument("--m", type=int, help="hallucinated examples per class per batch")
            p.add_argument("--proposal", choices=[pipeline.SINGLE, pipeline.CORPNS])
            p.add_argument("--head", choices=["cosine", "fc"])
            p.add_argument("--variant", choices=[pipeline.CONSERVATIVE, pipeline.AGGRESSIVE, pipeline.NONE])
            p.add_argument("--em-iters", type=int, choices=[1, 2])

    p = sub.add_parser("gen-world", help="write a synthetic world file")
    common(p, training=False)
    p.set_defaults(func=cmd_gen_world)
    p = sub.add_parser("train", help="multi-seed run of one configuration")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("ablate", help="sweep one axis with shared seeds")
    p.add_argument("axis", choices=AXES)
    common(p)
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("report", help="summarize result CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help="directory for summary.md and plot.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, ReportError):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        parser.error(str(exc))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
