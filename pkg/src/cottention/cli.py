"""``cott`` command-line entry point.

Exit codes: 0 when every check passes, 1 when a check fails, 2 on usage
errors (bad flags or invalid dimensions).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, gradcheck, plotting
from .causal import DEFAULT_CHUNK, causal_cos_attention
from .config import STAB_MODES, AttentionConfig
from .errors import ConfigError
from .layer import ToyTask, layer_init, train_toy
from .recurrent import softmax_kv_stream, stream_sequence
from .verify import DTYPES, TOLERANCE, Check, random_qkv, run_verify

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULTS = dict(seed=42, batch=1, heads=2, seq=32, dkey=8, dvalue=8)
BENCH_DEFAULTS = dict(heads=8, seq=1024, dkey=64)
BENCH_POINTS = {"seq": "512,1024,2048,4096,8192", "dim": "16,32,64,128,256"}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=DEFAULTS["seed"])
    parser.add_argument("--batch", type=int, default=None, help="N (default 1)")
    parser.add_argument("--heads", type=int, default=None, help="H (default 2; bench 8)")
    parser.add_argument("--seq", type=int, default=None, help="s (default 32; bench dim-axis 1024)")
    parser.add_argument("--dkey", type=int, default=None, help="per-head key dim (default 8; bench 64)")
    parser.add_argument("--dvalue", type=int, default=None, help="per-head value dim (defaults to --dkey)")
    parser.add_argument("--chunk", type=int, default=DEFAULT_CHUNK, help="scan chunk length")
    parser.add_argument("--precision", choices=("high", "single"), default=None)
    parser.add_argument("--stab-mode", choices=STAB_MODES, default="fixed")
    parser.add_argument("--out", default=None, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cott", description="Cosine attention verification and benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="oracle, grouping, stream, causality and bound checks")
    _common(p)
    p.add_argument("--instances", type=int, default=20, help="extra random instances")
    p.add_argument("--corrupt-mask", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("gradcheck", help="manual gradients versus finite differences")
    _common(p)
    p.add_argument("--step", type=float, default=gradcheck.DEFAULT_STEP)
    p.add_argument("--layer-seq", type=int, default=6, help="sequence length for the layer-level check")

    p = sub.add_parser("bench", help="time/memory sweep, CSV and figure")
    _common(p)
    p.add_argument("--impl", default="cosine-causal", help=f"comma list from {','.join(bench.IMPLS)}")
    p.add_argument("--axis", choices=bench.AXES, default="seq")
    p.add_argument("--points", default=None, help="comma list of s (or d) values")
    p.add_argument("--reps", type=int, default=5)

    p = sub.add_parser("stream", help="token-by-token decoding with per-step memory")
    _common(p)
    p.add_argument("--no-kv-baseline", action="store_true", help="skip the softmax KV-cache contrast")

    p = sub.add_parser("train-toy", help="gradient descent on the toy regression task")
    _common(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    return parser


def _dims(args, defaults=DEFAULTS) -> dict:
    def get(key):
        value = getattr(args, key)
        if value is not None:
            return value
        return defaults.get(key, DEFAULTS.get(key))

    dkey = get("dkey")
    return dict(N=get("batch"), H=get("heads"), s=get("seq"), d_key=dkey,
                d_value=args.dvalue if args.dvalue is not None else dkey)


def _config(args) -> AttentionConfig:
    return AttentionConfig(**_dims(args), stab_mode=args.stab_mode)


def _emit(checks: list[Check]) -> int:
    for c in checks:
        print(c.line())
    n_pass = sum(c.passed for c in checks)
    print(f"{n_pass}/{len(checks)} checks passed")
    return EXIT_OK if n_pass == len(checks) else EXIT_FAIL


def cmd_verify(args) -> int:
    cfg = _config(args)
    if args.chunk < 1:
        raise ConfigError("--chunk must be >= 1")
    checks = run_verify(cfg, args.seed, args.chunk, args.instances, args.precision or "high", args.corrupt_mask)
    return _emit(checks)


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    if args.step <= 0:
        raise ConfigError("--step must be positive")
    if args.step >= gradcheck.UNRELIABLE_STEP:
        print(f"warning: step {args.step:g} >= {gradcheck.UNRELIABLE_STEP:g}; truncation error makes "
              "the finite-difference reference unreliable at the 1e-5 threshold", file=sys.stderr)
    if args.precision == "single":
        print("warning: gradcheck always runs in high precision", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    Q, K, V = random_qkv(rng, cfg.N, cfg.H, cfg.s, cfg.d_key, cfg.d_value)
    G = rng.standard_normal(V.shape)
    checks = []
    report = gradcheck.causal_report(Q, K, V, G, args.chunk, args.step)
    for name, err in report.per_tensor.items():
        print(f"  causal {name}: max rel err {err:.3e}")
    checks.append(Check("gradcheck-causal", report.passed, report.max_rel_err))

    layer = layer_init(cfg.H * cfg.d_key, cfg.H * cfg.d_key, cfg.H * cfg.d_value, cfg.H, seed=args.seed)
    layer.m = rng.normal(0.0, 1.0, cfg.H)
    x = rng.standard_normal((cfg.N, args.layer_seq, layer.d_model))
    dY = rng.standard_normal((cfg.N, args.layer_seq, layer.d_value))
    for causal in (True, False):
        report = gradcheck.layer_report(layer, x, dY, causal, args.chunk, args.stab_mode, step=args.step)
        tag = "causal" if causal else "bidir"
        for name, err in report.per_tensor.items():
            print(f"  layer-{tag} {name}: max rel err {err:.3e}")
        checks.append(Check(f"gradcheck-layer-{tag}", report.passed, report.max_rel_err))
    return _emit(checks)


def cmd_bench(args) -> int:
    impls = [s.strip() for s in args.impl.split(",") if s.strip()]
    unknown = [i for i in impls if i not in bench.IMPLS]
    if unknown:
        raise ConfigError(f"unknown --impl {unknown}; choose from {bench.IMPLS}")
    if args.reps < 3:
        raise ConfigError("--reps must be >= 3")
    try:
        points = [int(p) for p in (args.points or BENCH_POINTS[args.axis]).split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --points: {exc}") from exc
    if any(p < 1 for p in points) or any(b <= a for a, b in zip(points, points[1:])):
        raise ConfigError("--points must be positive and strictly increasing")
    dims = _dims(args, BENCH_DEFAULTS)
    fixed = bench.BenchConfig(N=dims["N"], H=dims["H"], s=dims["s"], d=dims["d_key"],
                              chunk_len=args.chunk, seed=args.seed,
                              dtype="float64" if args.precision == "high" else "float32")
    out = Path(args.out or "bench.csv")
    records, fits = [], []
    for impl in impls:
        recs = bench.run_sweep(impl, args.axis, points, fixed, reps=args.reps)
        records += recs
        for metric in ("time", "memory"):
            try:
                fit = bench.fit_exponent(recs, metric)
            except bench.FitError as exc:
                print(f"{impl} {metric}: no fit ({exc})")
                continue
            fits.append(fit)
            print(f"{impl} {metric} exponent vs {args.axis}: {fit.exponent:.3f} (r2={fit.r2:.4f})")
    bench.emit_csv(records, fits, out)
    plotting.plot_sweep(records, out.with_suffix(".png"))
    print(f"wrote {out} and {out.with_suffix('.png')}")
    return EXIT_OK if all(r.ok for r in records) else EXIT_FAIL


def cmd_stream(args) -> int:
    cfg = _config(args)
    precision = args.precision or "high"
    tol = TOLERANCE[precision]
    rng = np.random.default_rng(args.seed)
    Q, K, V = random_qkv(rng, cfg.N, cfg.H, cfg.s, cfg.d_key, cfg.d_value, DTYPES[precision])
    streamed, cos_bytes = stream_sequence(Q, K, V, cfg, return_step_bytes=True)
    batch = causal_cos_attention(Q, K, V, cfg, chunk_len=args.chunk)
    kv_bytes = None if args.no_kv_baseline else softmax_kv_stream(Q, K, V, return_step_bytes=True)[1]

    lo, hi = min(cos_bytes), max(cos_bytes)
    print(f"per-step peak bytes (cosine state): min={lo} max={hi} over {cfg.s} steps")
    if kv_bytes is not None:
        print(f"per-step peak bytes (softmax KV cache): first={kv_bytes[0]} last={kv_bytes[-1]}")
    diff = float(np.max(np.abs(streamed - batch)))
    checks = [
        Check("stream-constant-memory", lo == hi, float(hi - lo)),
        Check("stream-batch-equivalence", diff < tol, diff),
    ]
    if cfg.stab_mode == "growing":
        fixed_cfg = AttentionConfig(**_dims(args), stab_mode="fixed")
        contrast = float(np.max(np.abs(streamed - causal_cos_attention(Q, K, V, fixed_cfg, args.chunk))))
        print(f"growing-t stream vs fixed-length batch: max diff {contrast:.3e} "
              "(differs by design; the two stabilizations are not equivalent)")

    out = Path(args.out or "stream.csv")
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "cosine_state_bytes", "softmax_kv_bytes"])
        for t, b in enumerate(cos_bytes):
            writer.writerow([t + 1, b, "" if kv_bytes is None else kv_bytes[t]])
    plotting.plot_stream(cos_bytes, kv_bytes, out.with_suffix(".png"))
    print(f"wrote {out} and {out.with_suffix('.png')}")
    return _emit(checks)


def cmd_train_toy(args) -> int:
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    if args.lr < 0:
        raise ConfigError("--lr must be >= 0")
    task = ToyTask()
    overrides = {"H": args.heads, "seq_len": args.seq, "d_key": args.dkey, "d_value": args.dvalue}
    for key, value in overrides.items():
        if value is not None:
            setattr(task, key, value)
    result = train_toy(task=task, steps=args.steps, lr=args.lr, seed=args.seed)

    stem = Path(args.out).with_suffix("") if args.out else Path("train")
    loss_path = Path(f"{stem}_loss.csv")
    m_path = Path(f"{stem}_m.csv")
    with open(loss_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(result.loss):
            writer.writerow([step, repr(loss)])
    with open(m_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step"] + [f"m_{h}" for h in range(task.H)])
        for step, m in enumerate(result.m_trace):
            writer.writerow([step] + [repr(float(v)) for v in m])
    plotting.plot_training(result, Path(f"{stem}.png"))

    first, last = result.loss[0], result.loss[-1]
    delta = result.m_trace[-1] - result.m_trace[0]
    print(f"loss {first:.4g} -> {last:.4g} (ratio {last / first:.3f}) over {len(result.loss) - 1} steps")
    print("m direction per head: " + ", ".join(
        f"h{h} {'down' if d < 0 else 'up' if d > 0 else 'flat'} ({d:+.4f})" for h, d in enumerate(delta)))
    if result.diverged:
        print("training diverged (non-finite loss)")
    print(f"wrote {loss_path}, {m_path} and {stem}.png")
    return _emit([Check("toy-loss-halved", last < 0.5 * first, last / first)])


COMMANDS = {
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "stream": cmd_stream,
    "train-toy": cmd_train_toy,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with bench.thread_limit():
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"cott {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
