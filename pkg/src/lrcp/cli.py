"""Command-line front end.

Exit codes: 0 success, 1 usage or input error, 2 oracle mismatch.
Set ``LRCP_NUM_THREADS`` to bound BLAS threads and per-file workers.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import LrcpError
from .pruning import CompressionConfig, Centering, Scoring, SubspaceMethod, compress
from .spectrum import (
    DEFAULT_TRIALS,
    explained_variance_spectrum,
    stability_random_dropout,
    stability_under_pruning,
)
from .staged import PLAN_PRESETS, compress_staged, make_staged_plan, preset_plan
from .synth import brute_force_best_subset, gen_background_outliers, gen_low_rank_noise, relative_sigma
from .tensor_io import list_matrix_files, load_matrix, save_matrix, write_csv, write_report

THREADS_ENV = "LRCP_NUM_THREADS"

# rank presets: LLaVA-style models default to r=4, Qwen2.5-VL to r=8
RANK_PRESETS = {"llava": 4, "qwen": 8}

EXIT_USAGE = 1
EXIT_MISMATCH = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; 2 is reserved for oracle mismatches here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _ratios(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _thread_count() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _map_files(func, items):
    """Apply ``func`` to every item, concurrently if threads allow; results keep input order."""
    workers = _thread_count() or 1
    if workers == 1 or len(items) == 1:
        return [func(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def _config_record(args: argparse.Namespace) -> dict:
    skip = {"func"}
    record = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    record["version"] = __version__
    return record


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_layers(path: Path) -> list[tuple[str, np.ndarray]]:
    loaded = load_matrix(path)
    if isinstance(loaded, list):
        return [(f"{path.name}[{i}]", m) for i, m in enumerate(loaded)]
    return [(path.name, loaded)]


def _single_matrix(path, layer: int | None) -> np.ndarray:
    loaded = load_matrix(path)
    if isinstance(loaded, list):
        if layer is None:
            raise UsageError(f"{path} is a {len(loaded)}-layer stack; pick one with --layer")
        if not 0 <= layer < len(loaded):
            raise UsageError(f"--layer {layer} out of range for {len(loaded)} layers")
        return loaded[layer]
    if layer not in (None, 0):
        raise UsageError(f"{path} holds a single matrix; --layer {layer} is out of range")
    return loaded


def _compression_config(args) -> CompressionConfig:
    rank = args.rank if args.rank is not None else RANK_PRESETS[args.preset]
    return CompressionConfig(
        rank=rank,
        budget=args.budget,
        scoring=args.scoring,
        merge=not args.no_merge,
        centering=args.center,
        subspace_method=args.subspace,
        seed=args.seed,
    )


def cmd_compress(args) -> int:
    x = _single_matrix(args.input, args.layer)
    if args.budget is None:
        args.budget = x.shape[0] if args.stage_ratios else 64
    cfg = _compression_config(args)
    args.rank = cfg.rank
    out = _out_dir(args.out)
    if args.stage_ratios:
        plan = make_staged_plan(x.shape[0], args.stage_ratios, args.llm_layers, args.compress_layer)
        results = compress_staged([x], plan, cfg)
    else:
        plan = None
        results = [compress(x, cfg)]

    stages = []
    for t, res in enumerate(results, start=1):
        suffix = "" if plan is None else f"_stage{t}"
        save_matrix(res.output, out / f"compressed{suffix}.npy", dtype=args.dtype)
        n = len(res.scores)
        kept = set(res.retained_indices.tolist())
        write_csv(
            out / f"tokens{suffix}.csv",
            ["index", "retained", "score", "assigned_to"],
            ([i, int(i in kept), res.scores[i], i if i in kept else res.assignments[i]] for i in range(n)),
        )
        stages.append(res.to_dict())
    report = {"config": _config_record(args), "compression": cfg.to_dict()}
    if plan is None:
        report["result"] = stages[0]
    else:
        report["plan"] = plan.to_dict()
        report["stages"] = stages
    write_report(report, out / "report.json")
    final = results[-1]
    print(f"kept {final.budget} of {len(final.scores)} tokens; surrogate loss {final.surrogate_loss:.6g}")
    return 0


def cmd_spectrum(args) -> int:
    files = list_matrix_files(args.input)
    layers = [item for path in files for item in _load_layers(path)]

    def one(item):
        name, x = item
        rep = explained_variance_spectrum(x, args.components, levels=args.variance, seed=args.seed)
        return {"name": name, "shape": list(x.shape), **rep.to_dict()}

    reports = _map_files(one, layers)
    out = _out_dir(args.out)
    write_report({"config": _config_record(args), "layers": reports}, out / "spectrum.json")
    write_csv(
        out / "rank_at.csv",
        ["layer", "name", "variance", "rank"],
        ([i, r["name"], v, k] for i, r in enumerate(reports) for v, k in r["rank_at"].items()),
    )
    write_csv(
        out / "explained.csv",
        ["layer", "name", "component", "fraction", "cumulative"],
        (
            [i, r["name"], j + 1, f, c]
            for i, r in enumerate(reports)
            for j, (f, c) in enumerate(zip(r["explained"], np.cumsum(r["explained"])))
        ),
    )
    for r in reports:
        ranks = ", ".join(f"Rank@{v}={k}" for v, k in r["rank_at"].items())
        print(f"{r['name']}: {ranks}")
    return 0


def cmd_stability(args) -> int:
    x = _single_matrix(args.input, args.layer)
    n = x.shape[0]
    reports = []
    if args.mode == "random":
        for drop in args.drop:
            rep = stability_random_dropout(x, args.rank, drop, trials=args.trials, seed=args.seed)
            reports.append(rep.to_dict())
    else:
        keeps = args.keeps or [int(np.floor((1.0 - d) * n + 1e-9)) for d in args.drop]
        cfg = CompressionConfig(
            rank=args.rank, budget=max(keeps), merge=False, centering=args.center, seed=args.seed
        )
        reports.append(stability_under_pruning(x, cfg, keeps).to_dict())
    out = _out_dir(args.out)
    write_report({"config": _config_record(args), "experiments": reports}, out / "stability.json")
    write_csv(
        out / "stability.csv",
        ["mode", "drop_ratio", "index", "keep", "similarity"],
        (
            [r["mode"], r["drop_ratio"], i, r["keeps"][i], s]
            for r in reports
            for i, s in enumerate(r["similarities"])
        ),
    )
    for r in reports:
        print(f"{r['mode']} drop={r['drop_ratio']:.3f}: mean similarity {r['mean_similarity']:.6f} (min {r['min_similarity']:.6f})")
    return 0


def cmd_synth(args) -> int:
    if args.kind == "low-rank":
        spectrum = args.spectrum or [float(args.rank - j) for j in range(args.rank)]
        sigma = args.sigma
        if args.relative_noise is not None:
            sigma = relative_sigma(args.n, args.d, spectrum, args.relative_noise)
        inst = gen_low_rank_noise(args.n, args.d, args.rank, spectrum, sigma=sigma, seed=args.seed, noise=args.noise)
    else:
        inst = gen_background_outliers(args.n, args.outliers, args.d, args.rank, seed=args.seed, sigma=args.sigma)
    out = _out_dir(args.out)
    save_matrix(inst.matrix, out / "tokens.npy", dtype=args.dtype)
    write_report({"config": _config_record(args), "instance": inst.to_dict()}, out / "instance.json")
    print(f"wrote {inst.matrix.shape[0]}x{inst.matrix.shape[1]} matrix to {out / 'tokens.npy'}")
    return 0


def cmd_oracle(args) -> int:
    x = _single_matrix(args.input, args.layer)
    cfg = CompressionConfig(rank=args.rank, budget=args.budget, merge=False, centering=args.center, seed=args.seed)
    res = compress(x, cfg)
    best, best_loss = brute_force_best_subset(x, res.subspace, args.budget)
    match = best_loss == res.surrogate_loss
    report = {
        "config": _config_record(args),
        "lrcp_indices": res.retained_indices.tolist(),
        "lrcp_loss": res.surrogate_loss,
        "oracle_indices": list(best),
        "oracle_loss": best_loss,
        "match": match,
    }
    if args.out:
        write_report(report, Path(_out_dir(args.out)) / "oracle.json")
    if not match:
        print(f"MISMATCH: LRCP loss {res.surrogate_loss!r} vs optimum {best_loss!r}", file=sys.stderr)
        return EXIT_MISMATCH
    print(f"optimal: LRCP selection attains the minimum surrogate loss {best_loss:.6g}")
    return 0


def loglog_slope(sizes, times) -> float:
    """Least-squares slope of log(time) against log(size)."""
    return float(np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)[0])


def run_benchmark(sizes, dim: int, rank: int, budget: int, repeat: int, seed: int = 0):
    """Median wall time of ``compress`` per token count, plus per-size results."""
    rows = []
    rng = np.random.default_rng(seed)
    cfg = CompressionConfig(rank=rank, budget=budget, seed=seed)
    for n in sizes:
        x = rng.standard_normal((n, dim))
        compress(x, cfg)  # warm-up
        times = []
        for _ in range(repeat):
            start = time.perf_counter()
            res = compress(x, cfg)
            times.append(time.perf_counter() - start)
        rows.append({"n": n, "d": dim, "r": rank, "k": budget, "seconds": float(np.median(times)), "loss": res.surrogate_loss})
    return rows


def cmd_bench(args) -> int:
    if min(args.sizes) <= args.budget:
        raise UsageError(f"every size must exceed --budget {args.budget}")
    rows = run_benchmark(args.sizes, args.dim, args.rank, args.budget, args.repeat, args.seed)
    slope = loglog_slope([r["n"] for r in rows], [r["seconds"] for r in rows]) if len(rows) > 1 else None
    out = _out_dir(args.out)
    write_csv(out / "bench.csv", ["n", "d", "r", "k", "seconds"], ([r["n"], r["d"], r["r"], r["k"], r["seconds"]] for r in rows))
    # timings are measurements, not functions of the flags; keep them out of the report
    write_report(
        {"config": _config_record(args), "results": [{k: r[k] for k in ("n", "d", "r", "k", "loss")} for r in rows]},
        out / "bench.json",
    )
    for r in rows:
        print(f"N={r['n']:6d} D={r['d']} r={r['r']} K={r['k']}: {r['seconds'] * 1000:.1f} ms")
    if slope is not None:
        print(f"log-log slope in N: {slope:.3f}")
    return 0


def cmd_plan(args) -> int:
    if args.preset:
        plan = preset_plan(args.preset, args.tokens)
    else:
        if args.tokens is None or not args.ratios:
            raise UsageError("give --preset, or both --tokens and --ratios")
        plan = make_staged_plan(args.tokens, args.ratios, args.llm_layers, args.compress_layer)
    write_report({"config": _config_record(args), "plan": plan.to_dict()}, Path(args.out))
    keeps = " -> ".join(str(k) for k in plan.keeps)
    print(
        f"{plan.total_tokens} -> {keeps}; final {plan.final_retain:.1%}, "
        f"average retention {plan.average_retention:.1%}"
    )
    return 0


def _add_compression_flags(p, budget_default=None):
    p.add_argument("--rank", type=int, default=None, help="subspace dimension r (default: preset)")
    p.add_argument("--preset", choices=sorted(RANK_PRESETS), default="llava", help="rank preset when --rank is absent")
    p.add_argument("--budget", type=int, default=budget_default, help="tokens to keep, K")
    p.add_argument("--scoring", choices=[s.value for s in Scoring], default=Scoring.RESIDUAL_DESCENDING.value)
    p.add_argument("--no-merge", action="store_true", help="drop discarded tokens instead of merging them")
    p.add_argument("--center", choices=[c.value for c in Centering], default=Centering.NONE.value)
    p.add_argument("--subspace", choices=[m.value for m in SubspaceMethod], default=SubspaceMethod.PCA.value)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lrcp", description="Low-rank compressibility guided token pruning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("compress", help="prune (and merge) one token matrix")
    p.add_argument("input", type=Path)
    _add_compression_flags(p)
    p.add_argument("--layer", type=int, default=None, help="layer of a 3-D stack")
    p.add_argument("--stage-ratios", type=_ratios, default=None, help="staged plan, e.g. 1/6,1/3")
    p.add_argument("--llm-layers", type=int, default=32)
    p.add_argument("--compress-layer", type=int, default=16)
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("spectrum", help="explained-variance spectrum and Rank@v per layer")
    p.add_argument("input", type=Path, help=".npy file, 3-D stack, or directory of per-layer files")
    p.add_argument("--variance", type=_floats, default=[90.0, 95.0])
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("stability", help="dominant-subspace stability under token reduction")
    p.add_argument("input", type=Path)
    p.add_argument("--mode", choices=["random", "pruned"], default="random")
    p.add_argument("--drop", type=_floats, default=[0.5, 0.8])
    p.add_argument("--keeps", type=_ints, default=None, help="pruned mode: explicit stage keeps")
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--center", choices=[c.value for c in Centering], default=Centering.NONE.value)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("synth", help="write a seeded synthetic token matrix")
    p.add_argument("--kind", choices=["low-rank", "outliers"], default="low-rank")
    p.add_argument("--n", type=int, default=576)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--spectrum", type=_floats, default=None)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--relative-noise", type=float, default=None, help="noise norm as a fraction of signal norm")
    p.add_argument("--noise", choices=["gaussian", "student-t"], default="gaussian")
    p.add_argument("--outliers", type=int, default=4)
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("oracle", help="check LRCP selection against exhaustive enumeration")
    p.add_argument("input", type=Path)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--center", choices=[c.value for c in Centering], default=Centering.NONE.value)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="wall-time scaling of compress in N")
    p.add_argument("--sizes", type=_ints, default=[512, 1024, 2048, 4096])
    p.add_argument("--dim", type=int, default=4096)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plan", help="per-stage keep counts and average retention")
    p.add_argument("--preset", choices=sorted(PLAN_PRESETS), default=None)
    p.add_argument("--tokens", type=int, default=None)
    p.add_argument("--ratios", type=_ratios, default=None)
    p.add_argument("--llm-layers", type=int, default=32)
    p.add_argument("--compress-layer", type=int, default=16)
    p.add_argument("--out", type=Path, required=True, help="output JSON file")
    p.set_defaults(func=cmd_plan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _thread_count()
        if threads is None:
            return args.func(args)
        with threadpool_limits(threads):
            return args.func(args)
    except (LrcpError, UsageError) as exc:
        print(f"lrcp {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
