"""Command-line front end: simulate, verify-bounds, sweep, cache-size.

Exit codes: 0 all checks pass, 1 a check failed, 2 bad input/config, 3 invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from . import validate
from .core import ConfigError, InvariantError, StoreError, cache_size, human_bytes
from .sim import ErrorReport, SimConfig, run_comparison

log = logging.getLogger("sketchkv")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3

REPORT_COLUMNS = [
    "seed",
    "n_tokens",
    "budget_fraction",
    "total_budget",
    "recent_ratio",
    "candidate_ratio",
    "vague_ratio",
    "replace_rate",
    "status",
    "a",
    "N",
    "var_dk",
    "var_dv",
    "var_dk_bound",
    "var_dp",
    "var_dp_first_order",
    "swaps",
    "max_resident",
    "memory_ceiling",
    "passed",
]
VALIDATION_COLUMNS = ["seed", "name", "empirical", "predicted", "standard_error", "trials", "holds"]

# vague ratios enumerated for the budget-split table; recent and candidate split the rest evenly
DEFAULT_VAGUE_RATIOS = [0.1, 0.15, 0.2, 0.3, 0.4]


@dataclass
class RunManifest:
    command: str
    config_path: Optional[Path]
    output_path: Optional[Path]
    seeds: list[int]
    format: str = "json"
    jobs: int = 1


def parse_seeds(text: str) -> list[int]:
    """'0,1,5' or '0-7' or a mix of both."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    if any(s < 0 or s > 2**64 - 1 for s in seeds):
        raise argparse.ArgumentTypeError("seeds must be 64-bit unsigned integers")
    return seeds


def _clean(obj: Any) -> Any:
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dump_json(doc: dict[str, Any]) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def dump_csv(columns: Sequence[str], rows: Iterable[dict[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _clean(row.get(c, "")) for c in columns})
    return buf.getvalue()


def _write(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def report_row(config: SimConfig, report: Optional[ErrorReport], status: str = "ok") -> dict[str, Any]:
    row: dict[str, Any] = {
        "seed": config.seed,
        "n_tokens": config.n_tokens,
        "budget_fraction": config.budget_fraction if config.budget_fraction is not None else "",
        "total_budget": config.store.total_budget,
        "recent_ratio": config.store.recent_ratio,
        "candidate_ratio": config.store.candidate_ratio,
        "vague_ratio": config.store.vague_ratio,
        "replace_rate": config.store.replace_rate,
        "status": status,
    }
    if report is not None:
        row.update(
            a=report.occupancy["a"],
            N=report.occupancy["N"],
            var_dk=report.empirical["var_dk"],
            var_dv=report.empirical["var_dv"],
            var_dk_bound=report.predicted["var_dk_bound"],
            var_dp=report.empirical["var_dp_overall"],
            var_dp_first_order=report.predicted["var_dp_first_order"],
            swaps=report.empirical["swaps"],
            max_resident=report.occupancy["max_resident"],
            memory_ceiling=report.occupancy["memory_ceiling"],
            passed=report.passed,
        )
    return row


def _simulate_one(config: SimConfig) -> ErrorReport:
    return run_comparison(config)[1]


def _run_many(configs: list[SimConfig], jobs: int) -> list[ErrorReport]:
    if jobs <= 1 or len(configs) <= 1:
        return [_simulate_one(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_simulate_one, configs))


def load_sim_config(path: Optional[Path]) -> SimConfig:
    if path is None:
        return SimConfig()
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return SimConfig.load(path)


def cmd_simulate(manifest: RunManifest) -> int:
    base = load_sim_config(manifest.config_path)
    configs = [replace(base, seed=s) for s in manifest.seeds]
    reports = _run_many(configs, manifest.jobs)
    for cfg, rep in zip(configs, reports):
        log.info("seed %d: a=%d N=%d flags=%s", cfg.seed, rep.occupancy["a"], rep.occupancy["N"], rep.pass_flags)
    if manifest.format == "csv":
        text = dump_csv(REPORT_COLUMNS, (report_row(c, r) for c, r in zip(configs, reports)))
    else:
        text = dump_json(
            {
                "command": "simulate",
                "timestamp": time.time(),
                "reports": [r.to_dict() for r in reports],
            }
        )
    _write(text, manifest.output_path)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_verify_bounds(manifest: RunManifest, trials: Optional[int] = None) -> int:
    rows = []
    for seed in manifest.seeds:
        for res in validate.run_all(trials=trials, seed=seed):
            log.info("seed %d %-20s empirical=%.6g predicted=%.6g holds=%s",
                     seed, res.name, res.empirical, res.predicted, res.holds)
            rows.append({"seed": seed, **res.to_dict()})
    if manifest.format == "csv":
        text = dump_csv(VALIDATION_COLUMNS, rows)
    else:
        text = dump_json({"command": "verify-bounds", "timestamp": time.time(), "results": rows})
    _write(text, manifest.output_path)
    return EXIT_OK if all(r["holds"] for r in rows) else EXIT_FAIL


def load_grid(path: Optional[Path]) -> dict[str, list]:
    if path is None:
        return {"vague_ratio": list(DEFAULT_VAGUE_RATIOS)}
    if not path.is_file():
        raise ConfigError(f"grid file not found: {path}")
    try:
        grid = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    allowed = {"vague_ratio", "ratios", "replace_rate", "budget_fraction", "n_tokens"}
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("grid must be a non-empty JSON object")
    unknown = set(grid) - allowed
    if unknown:
        raise ConfigError(f"unknown grid axes: {sorted(unknown)}")
    if "vague_ratio" in grid and "ratios" in grid:
        raise ConfigError("give either 'vague_ratio' or 'ratios', not both")
    for axis, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid axis {axis!r} must be a non-empty list")
    return grid


def grid_points(base: SimConfig, grid: dict[str, list]) -> list[tuple[dict[str, Any], Optional[SimConfig], str]]:
    """Expand the cartesian grid; points violating config invariants are marked skipped."""
    if "ratios" in grid:
        ratio_axis = [tuple(r) for r in grid["ratios"]]
    elif "vague_ratio" in grid:
        ratio_axis = [((1 - v) / 2, (1 - v) / 2, v) for v in grid["vague_ratio"]]
    else:
        ratio_axis = [(base.store.recent_ratio, base.store.candidate_ratio, base.store.vague_ratio)]
    axes = [
        ratio_axis,
        grid.get("replace_rate", [base.store.replace_rate]),
        grid.get("budget_fraction", [base.budget_fraction]),
        grid.get("n_tokens", [base.n_tokens]),
    ]
    points = []
    for ratios, rate, fraction, n in itertools.product(*axes):
        desc = {"ratios": ratios, "replace_rate": rate, "budget_fraction": fraction, "n_tokens": n}
        try:
            recent, candidate, vague = ratios
            store = replace(
                base.store,
                recent_ratio=recent,
                candidate_ratio=candidate,
                vague_ratio=vague,
                replace_rate=rate,
            )
            cfg = replace(base, store=store, budget_fraction=fraction, n_tokens=n)
            cfg.store_config()  # budget allocation errors surface here
            points.append((desc, cfg, "ok"))
        except (ConfigError, ValueError, TypeError) as exc:
            points.append((desc, None, f"skipped: {exc}"))
    return points


def _skipped_row(desc: dict[str, Any], seed: int, status: str) -> dict[str, Any]:
    recent, candidate, vague = (list(desc["ratios"]) + ["", "", ""])[:3]
    return {
        "seed": seed,
        "n_tokens": desc["n_tokens"],
        "budget_fraction": desc["budget_fraction"] if desc["budget_fraction"] is not None else "",
        "recent_ratio": recent,
        "candidate_ratio": candidate,
        "vague_ratio": vague,
        "replace_rate": desc["replace_rate"],
        "status": status,
    }


def cmd_sweep(manifest: RunManifest, grid_path: Optional[Path] = None) -> int:
    base = load_sim_config(manifest.config_path)
    points = grid_points(base, load_grid(grid_path))
    runnable = [
        (i, replace(cfg, seed=s))
        for i, (_, cfg, _) in enumerate(points)
        if cfg is not None
        for s in manifest.seeds
    ]
    reports = iter(_run_many([c for _, c in runnable], manifest.jobs))
    rows = []
    for desc, cfg, status in points:
        for s in manifest.seeds:
            if cfg is None:
                rows.append(_skipped_row(desc, s, status))
            else:
                rows.append(report_row(replace(cfg, seed=s), next(reports)))
    if manifest.format == "json":
        text = dump_json({"command": "sweep", "timestamp": time.time(), "rows": rows})
    else:
        text = dump_csv(REPORT_COLUMNS, rows)
    _write(text, manifest.output_path)
    return EXIT_OK


def cmd_cache_size(values: Sequence[int], out=None) -> int:
    out = out or sys.stdout
    size = cache_size(*values)
    out.write(f"{size} bytes ({human_bytes(size)})\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchkv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, default_format: str = "json") -> None:
        p.add_argument("--config", type=Path, help="SimConfig/StoreConfig JSON")
        p.add_argument("--out", type=Path, help="report path (default: stdout)")
        p.add_argument("--seeds", type=parse_seeds, default=[0], help="e.g. 0,1,2 or 0-31")
        p.add_argument("--format", choices=["json", "csv"], default=default_format)
        p.add_argument("--jobs", type=int, default=1)

    common(sub.add_parser("simulate", help="run compressed vs full attention per seed"))
    vb = sub.add_parser("verify-bounds", help="Monte-Carlo validation of every bound")
    common(vb)
    vb.add_argument("--trials", type=int, help="override every validator's trial count")
    sw = sub.add_parser("sweep", help="parameter grid x seeds, one row each")
    common(sw, default_format="csv")
    sw.add_argument("--grid", type=Path, help="grid JSON: vague_ratio|ratios, replace_rate, budget_fraction, n_tokens")
    cs = sub.add_parser("cache-size", help="full KV cache size in bytes")
    for name in ("layers", "kv_heads", "tokens", "head_dim", "bytes_per_element"):
        cs.add_argument(name, type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "cache-size":
            return cmd_cache_size(
                [args.layers, args.kv_heads, args.tokens, args.head_dim, args.bytes_per_element]
            )
        manifest = RunManifest(args.command, args.config, args.out, args.seeds, args.format, args.jobs)
        if args.command == "simulate":
            return cmd_simulate(manifest)
        if args.command == "verify-bounds":
            return cmd_verify_bounds(manifest, args.trials)
        return cmd_sweep(manifest, args.grid)
    except (InvariantError, StoreError) as exc:
        print(f"sketchkv: invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, ValueError, OverflowError, OSError) as exc:
        print(f"sketchkv: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
