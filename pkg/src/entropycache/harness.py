"""Command-line experiment runner.

``entropycache run`` executes one generation per (grid point, seed), writes a
per-step metrics stream and a summary for each, and a comparison table across
all of them. Other subcommands: ``compare`` (speedup table from summary
files), ``init-weights`` (write an ECW1 file) and ``plot`` (whitespace columns
from a JSONL stream, for gnuplot).

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import weightsio
from .decoding import EOS_ID, MASK_ID, MIN_VOCAB, DecodeConfig, encode_text, parse_token_list, run_generation
from .errors import EntropyCacheError, NoBaselineReference
from .metrics import (
    entropy_drift_analysis,
    pca_fit,
    summarize,
    write_jsonl,
    write_records_csv,
)
from .model import ModelConfig, init_weights
from .policy import POLICY_NAMES, make_policy

DEFAULT_PROMPT = "The quick brown fox jumps over the lazy dog."
GRID_KEYS = {"tau": float, "k": int, "w": int, "conf": float, "block": int, "policy": str}
TABLE_COLUMNS = [
    "policy", "tau", "k", "w", "conf", "block", "seed", "steps", "tokens_per_sec",
    "mean_recompute_ratio", "decision_time_fraction", "flops_total", "speedup", "flop_speedup",
]


class UsageError(Exception):
    pass


@dataclass
class RunSpec:
    model: dict = field(default_factory=dict)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    policy: str = "entropy-cache"
    tau: float = 1.5
    k_recent: int = 64
    block_size: int = 32
    prompt: list[int] = field(default_factory=lambda: encode_text(DEFAULT_PROMPT))
    repeats: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    metrics_out: str | None = None
    weights_path: str | None = None
    grid: dict[str, list] = field(default_factory=dict)
    drift: bool = False
    exclude_eos: bool = False
    pca_positions: list[int] = field(default_factory=list)
    fmt: str = "jsonl"
    jobs: int = 1

    def validate(self) -> None:
        if self.repeats < 1:
            raise UsageError("--repeats must be >= 1")
        if self.policy not in POLICY_NAMES:
            raise UsageError(f"unknown policy {self.policy!r}")
        for p in self.grid.get("policy", []):
            if p not in POLICY_NAMES:
                raise UsageError(f"unknown policy {p!r} in --grid")
        if self.drift and (self.policy != "baseline" or set(self.grid.get("policy", ["baseline"])) != {"baseline"}):
            raise UsageError("--drift needs exact states and only runs with the baseline policy")
        if self.pca_positions and not self.drift:
            raise UsageError("--pca-positions requires --drift")
        if self.exclude_eos and not self.drift:
            raise UsageError("--exclude-eos only applies to --drift")
        if any(p < 0 or p >= self.decode.gen_length for p in self.pca_positions):
            raise UsageError("--pca-positions are generation offsets in [0, gen-len)")
        if self.fmt not in ("jsonl", "csv"):
            raise UsageError("--format must be jsonl or csv")
        if self.jobs < 1:
            raise UsageError("--jobs must be >= 1")


def parse_grid(text: str) -> dict[str, list]:
    """``"tau=0.5,1.0 k=16,64"`` -> ``{"tau": [0.5, 1.0], "k": [16, 64]}``."""
    grid: dict[str, list] = {}
    for part in text.split():
        if "=" not in part:
            raise UsageError(f"bad grid term {part!r}; expected key=v1,v2")
        key, vals = part.split("=", 1)
        key = {"k_recent": "k", "window": "w", "block_size": "block"}.get(key, key)
        if key not in GRID_KEYS:
            raise UsageError(f"unknown grid key {key!r}; known: {', '.join(GRID_KEYS)}")
        try:
            grid[key] = [GRID_KEYS[key](v) for v in vals.split(",") if v]
        except ValueError as exc:
            raise UsageError(f"bad value in grid term {part!r}") from exc
        if not grid[key]:
            raise UsageError(f"grid key {key!r} has no values")
    return grid


@dataclass(frozen=True)
class Cell:
    policy: str
    tau: float
    k: int
    w: int
    conf: float
    block: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.policy}_tau{self.tau:g}_k{self.k}_w{self.w}_conf{self.conf:g}_b{self.block}_seed{self.seed}"


def expand_cells(spec: RunSpec) -> list[Cell]:
    base = {
        "policy": [spec.policy], "tau": [spec.tau], "k": [spec.k_recent],
        "w": [spec.decode.window_size], "conf": [spec.decode.confidence_threshold],
        "block": [spec.block_size],
    }
    base.update(spec.grid)
    keys = list(base)
    cells = []
    for combo in itertools.product(*(base[k] for k in keys), spec.seeds):
        vals = dict(zip(keys, combo[:-1]))
        cells.append(Cell(seed=combo[-1], **vals))
    return cells


def model_config_for(spec: RunSpec, seed: int) -> ModelConfig:
    return ModelConfig(**{**spec.model, "rng_seed": seed})


def _load_weights(spec: RunSpec, seed: int):
    if spec.weights_path:
        _, weights = weightsio.load(spec.weights_path, spec.model or None)
        return weights
    return init_weights(model_config_for(spec, seed))


def run_cell(spec: RunSpec, cell: Cell) -> dict:
    """Run one grid cell; write its files; return its summary row."""
    weights = _load_weights(spec, cell.seed)
    dcfg = dataclasses.replace(spec.decode, window_size=cell.w, confidence_threshold=cell.conf)
    out_dir = Path(spec.metrics_out) if spec.metrics_out else None
    analysis = None
    tps = []
    result = None
    for _ in range(spec.repeats):
        if spec.drift:
            gen_positions = [spec_pos + len(spec.prompt) for spec_pos in spec.pca_positions]
            analysis, result = entropy_drift_analysis(weights, spec.prompt, dcfg, spec.exclude_eos, gen_positions)
        else:
            policy = make_policy(cell.policy, cell.tau, cell.k, cell.block)
            result = run_generation(weights, spec.prompt, dcfg, policy)
        tps.append(summarize(result.records, result.generated.size, result.tokens.size).tokens_per_sec)
    rho = analysis.rho if analysis else None
    summary = summarize(result.records, int(result.generated.size), int(result.tokens.size), rho,
                        policy=cell.policy, tau=cell.tau, k=cell.k, w=cell.w, conf=cell.conf,
                        block=cell.block, seed=cell.seed,
                        drift_layer=analysis.layer if analysis else None)
    summary.tokens_per_sec = statistics.median(tps)
    row = summary.to_json()

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = out_dir / cell.name
        if spec.fmt == "csv":
            write_records_csv(result.records, f"{stem}.csv")
        else:
            write_jsonl(result.records, f"{stem}.jsonl")
        Path(f"{stem}.summary.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
        Path(f"{stem}.tokens.txt").write_text(",".join(str(int(t)) for t in result.generated) + "\n")
        if analysis is not None:
            analysis.write_csv(f"{stem}.drift.csv")
            if spec.pca_positions:
                _write_pca(result, len(spec.prompt), f"{stem}.pca.csv")
    return row


def _write_pca(result, prompt_len: int, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["position", "step", "pc1", "pc2"])
        for pos, traj in sorted(result.value_trajectories.items()):
            if len(traj) < 2:
                continue
            proj = pca_fit(np.stack(traj)).projection
            for step, (a, b) in enumerate(proj, start=1):
                w.writerow([pos - prompt_len, step, repr(float(a)), repr(float(b))])


def compare(summaries: list[dict]) -> list[dict]:
    """Add wall-clock and FLOP speedups relative to a baseline row.

    Each row is matched to a baseline with the same seed, window and
    confidence threshold when one exists, else to the first baseline row.
    """
    baselines = [s for s in summaries if s.get("policy") == "baseline"]
    if not baselines:
        raise NoBaselineReference("no baseline row to compare against")
    rows = []
    for s in summaries:
        ref = next((b for b in baselines if all(b.get(k) == s.get(k) for k in ("seed", "w", "conf"))),
                   baselines[0])
        row = dict(s)
        row["speedup"] = s["tokens_per_sec"] / ref["tokens_per_sec"] if ref["tokens_per_sec"] > 0 else float("nan")
        row["flop_speedup"] = ref["flops_total"] / s["flops_total"] if s["flops_total"] > 0 else float("nan")
        rows.append(row)
    return rows


def write_table(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TABLE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in TABLE_COLUMNS})


def run(spec: RunSpec) -> list[dict]:
    spec.validate()
    cells = expand_cells(spec)
    if spec.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            rows = list(pool.map(run_cell, [spec] * len(cells), cells))
    else:
        rows = [run_cell(spec, c) for c in cells]
    if any(r["policy"] == "baseline" for r in rows):
        rows = compare(rows)
    if spec.metrics_out:
        write_table(rows, Path(spec.metrics_out) / "comparison.csv")
    return rows


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--head-dim", type=int)
    g.add_argument("--vocab", type=int)
    g.add_argument("--ffn-mult", type=int)
    g.add_argument("--max-seq-len", type=int)
    g.add_argument("--logit-scale", type=float)
    g.add_argument("--seed", type=str, help="integer or comma list; falls back to $ENTROPYCACHE_SEED")


def _model_overrides(args) -> dict:
    pairs = {
        "num_layers": args.layers, "num_heads": args.heads, "head_dim": args.head_dim,
        "vocab_size": args.vocab, "ffn_mult": args.ffn_mult, "max_seq_len": args.max_seq_len,
        "logit_scale": args.logit_scale,
    }
    return {k: v for k, v in pairs.items() if v is not None}


def _seeds(args) -> list[int]:
    raw = args.seed if args.seed is not None else os.environ.get("ENTROPYCACHE_SEED", "0")
    try:
        return [int(s) for s in str(raw).split(",") if s]
    except ValueError as exc:
        raise UsageError(f"bad seed value {raw!r}") from exc


def _prompt(args, vocab: int) -> list[int]:
    if args.prompt_ids is not None:
        if args.prompt is not None:
            raise UsageError("--prompt and --prompt-ids are exclusive")
        ids = parse_token_list(args.prompt_ids)
    else:
        text = args.prompt if args.prompt is not None else DEFAULT_PROMPT
        if text.startswith("@"):
            text = Path(text[1:]).read_text(encoding="utf-8")
        if vocab < MIN_VOCAB:
            raise UsageError(f"text prompts need --vocab >= {MIN_VOCAB} for the byte tokenizer")
        ids = encode_text(text)
    if not ids:
        raise UsageError("prompt is empty")
    if any(i < 0 or i >= vocab for i in ids):
        raise UsageError("prompt token ids out of vocabulary range")
    return ids


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="entropycache", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="run generations and emit metrics")
    _model_args(r)
    r.add_argument("--weights", help="ECW1 file; model flags then must agree with its header")
    r.add_argument("--prompt", help="inline text, or @path to read a UTF-8 file")
    r.add_argument("--prompt-ids", help="comma-separated token ids instead of text")
    r.add_argument("--gen-len", type=int, default=64)
    r.add_argument("--window", type=int, default=32)
    r.add_argument("--conf", type=float, default=0.9)
    r.add_argument("--policy", choices=POLICY_NAMES)
    r.add_argument("--tau", type=float, default=1.5)
    r.add_argument("--k-recent", type=int, default=64)
    r.add_argument("--block-size", type=int, default=32)
    r.add_argument("--grid", help='e.g. "tau=0.5,1.0,1.5 k=16,64 w=32"')
    r.add_argument("--repeats", type=int, default=1)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--metrics-out", help="output directory")
    r.add_argument("--drift", action="store_true", help="entropy/drift analysis (baseline policy)")
    r.add_argument("--exclude-eos", action="store_true")
    r.add_argument("--pca-positions", help="comma list of generation offsets")
    r.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    r.add_argument("--eos-stop", action="store_true")

    c = sub.add_parser("compare", help="speedup table from summary JSON files")
    c.add_argument("summaries", nargs="+")
    c.add_argument("-o", "--out", help="CSV path (default stdout)")

    i = sub.add_parser("init-weights", help="write seeded weights to an ECW1 file")
    _model_args(i)
    i.add_argument("--out", required=True)

    pl = sub.add_parser("plot", help="print whitespace-separated columns from a JSONL trace")
    pl.add_argument("trace")
    pl.add_argument("--columns", default="step,max_entropy,recompute_ratio")
    return parser


def spec_from_args(args) -> RunSpec:
    model = _model_overrides(args)
    seeds = _seeds(args)
    if args.weights:
        cfg, _ = weightsio.load(args.weights, model or None)
        seeds = [cfg.rng_seed]
        vocab = cfg.vocab_size
    else:
        vocab = model.get("vocab_size", ModelConfig.vocab_size)
        mask_id = MASK_ID if vocab >= MIN_VOCAB else vocab - 1
        model.setdefault("mask_token_id", mask_id)
    if args.drift and args.policy not in (None, "baseline"):
        raise UsageError("--drift only runs with the baseline policy")
    policy = args.policy or ("baseline" if args.drift else "entropy-cache")
    try:
        decode = DecodeConfig(
            window_size=args.window, confidence_threshold=args.conf, gen_length=args.gen_len,
            eos_token_id=EOS_ID if vocab >= MIN_VOCAB else None, eos_stop=args.eos_stop,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    spec = RunSpec(
        model=model, decode=decode, policy=policy, tau=args.tau, k_recent=args.k_recent,
        block_size=args.block_size, prompt=_prompt(args, vocab), repeats=args.repeats, seeds=seeds,
        metrics_out=args.metrics_out, weights_path=args.weights,
        grid=parse_grid(args.grid) if args.grid else {}, drift=args.drift,
        exclude_eos=args.exclude_eos,
        pca_positions=parse_token_list(args.pca_positions) if args.pca_positions else [],
        fmt=args.format, jobs=args.jobs,
    )
    spec.validate()
    return spec


def _cmd_run(args) -> int:
    spec = spec_from_args(args)
    rows = run(spec)
    cols = [c for c in TABLE_COLUMNS if c in rows[0]]
    w = csv.DictWriter(sys.stdout, fieldnames=cols, extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return 0


def _cmd_compare(args) -> int:
    rows = compare([json.loads(Path(p).read_text()) for p in args.summaries])
    if args.out:
        write_table(rows, args.out)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=TABLE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return 0


def _cmd_init(args) -> int:
    model = _model_overrides(args)
    seeds = _seeds(args)
    if len(seeds) != 1:
        raise UsageError("init-weights takes a single seed")
    vocab = model.get("vocab_size", ModelConfig.vocab_size)
    model.setdefault("mask_token_id", MASK_ID if vocab >= MIN_VOCAB else vocab - 1)
    weightsio.save(init_weights(ModelConfig(**model, rng_seed=seeds[0])), args.out)
    return 0


def _cmd_plot(args) -> int:
    cols = [c for c in args.columns.split(",") if c]
    print("# " + " ".join(cols))
    for line in Path(args.trace).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        vals = []
        for c in cols:
            v = rec.get(c, rec.get("phase_times", {}).get(c))
            vals.append("nan" if v is None else str(v))
        print(" ".join(vals))
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0].startswith("-") and argv[0] not in ("-h", "--help"):
        argv.insert(0, "run")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 1 (via _Parser.error) for bad flags
        return int(exc.code or 0)
    handlers = {"run": _cmd_run, "compare": _cmd_compare, "init-weights": _cmd_init, "plot": _cmd_plot}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"entropycache: usage error: {exc}", file=sys.stderr)
        return 1
    except (EntropyCacheError, OSError, ValueError) as exc:
        print(f"entropycache: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
