"""``sparge`` command line: run, tune, permute-eval, bench.

Exit codes: 0 success, 2 invalid input, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from sparge.engine import EngineConfig, _parse_sentinel, dense_reference, sparse_attention
from sparge.errors import InvariantError, TensorIOError, ValidationError
from sparge.experiments import bench_lengths, permute_eval
from sparge.metrics import relative_l1
from sparge.tensor_io import GridDims, tensor_load, tensor_store
from sparge.tuner import DEFAULT_LAMBDA_GRID, DEFAULT_TAU_GRID, DEFAULT_THETA_GRID, TuneSpec, load_calibration, tune_layer

log = logging.getLogger("sparge")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INVARIANT = 3


def _load_config(path: Optional[str], default: Optional[EngineConfig] = None) -> EngineConfig:
    if path is None:
        return default or EngineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    return EngineConfig.from_dict(data)


def _write_json(path: str, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _float_list(text: str, sentinel_words=("-inf", "disabled")) -> list[float]:
    return [_parse_sentinel(t, "grid", sentinel_words) for t in text.split(",") if t.strip()]


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    q, k, v = tensor_load(args.q), tensor_load(args.k), tensor_load(args.v)
    out = sparse_attention(q, k, v, cfg)
    l1 = None
    if args.oracle:
        l1 = relative_l1(out, dense_reference(q, k, v, causal=cfg.causal))
    tensor_store(out.o.reshape(q.shape[:-1] + (v.shape[-1],)), args.out)
    report = {
        "sparsity": out.sparsity,
        "per_head_sparsity": out.per_head_sparsity,
        "relative_l1": l1,
        "predict_ms": out.predict_s * 1e3,
        "attn_ms": out.attn_s * 1e3,
        "config": cfg.to_dict(),
    }
    _write_json(args.report, report)
    log.info("sparsity=%.4f relative_l1=%s", report["sparsity"], l1)
    return EXIT_OK


def cmd_tune(args) -> int:
    base = _load_config(args.config)
    spec = TuneSpec(
        l1=args.l1,
        l2=args.l2,
        calibration=load_calibration(args.calib),
        tau_grid=_float_list(args.tau_grid) if args.tau_grid else DEFAULT_TAU_GRID,
        theta_grid=_float_list(args.theta_grid) if args.theta_grid else DEFAULT_THETA_GRID,
        lambda_grid=_float_list(args.lambda_grid) if args.lambda_grid else DEFAULT_LAMBDA_GRID,
        base=base,
    )
    params = tune_layer(spec)
    _write_json(args.out, params.to_dict())
    log.info("tuned %s", params.to_dict())
    return EXIT_OK


def cmd_permute_eval(args) -> int:
    from sparge.experiments import PERMUTE_EVAL_CONFIG

    cfg = _load_config(args.config, PERMUTE_EVAL_CONFIG)
    rows = permute_eval(GridDims.parse(args.dims), d=args.d, seed=args.seed, heads=args.heads, cfg=cfg)
    _write_json(args.report, {"dims": args.dims, "seed": args.seed, "config": cfg.to_dict(), "rows": rows})
    for r in rows:
        log.info("%-10s sim_q=%.3f sim_k=%.3f L1=%.4f sparsity=%.3f", r["method"], r["sim_q"], r["sim_k"], r["relative_l1"], r["sparsity"])
    return EXIT_OK


def cmd_bench(args) -> int:
    from sparge.experiments import BENCH_CONFIG

    cfg = _load_config(args.config, BENCH_CONFIG)
    try:
        lens = [int(x) for x in args.lens.split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"--lens must be comma-separated integers, got {args.lens!r}") from exc
    if not lens or min(lens) < 1:
        raise ValidationError("--lens needs at least one positive length")
    rows = bench_lengths(lens, d=args.d, heads=args.heads, seed=args.seed, cfg=cfg)
    ratios = [r["overhead"] for r in rows]
    decreasing = all(a > b for a, b in zip(ratios, ratios[1:]))
    _write_json(args.report, {"config": cfg.to_dict(), "rows": rows, "overhead_strictly_decreasing": decreasing})
    for r in rows:
        log.info("n=%-6d predict=%.2fms attn=%.1fms overhead=%.3f%%", r["seq_len"], r["predict_ms"], r["attn_ms"], 100 * r["overhead"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="sparse attention on STZ tensors")
    p.add_argument("--q", required=True)
    p.add_argument("--k", required=True)
    p.add_argument("--v", required=True)
    p.add_argument("--config")
    p.add_argument("--oracle", action="store_true", help="also compute relative L1 against dense attention")
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("tune", help="grid-search tau/theta/lambda under L1 bounds")
    p.add_argument("--calib", required=True, help="directory of <stem>.{q,k,v}.stz triples")
    p.add_argument("--l1", type=float, required=True)
    p.add_argument("--l2", type=float, required=True)
    p.add_argument("--config", help="base engine config (block sizes, quantize, causal)")
    p.add_argument("--tau-grid")
    p.add_argument("--theta-grid")
    p.add_argument("--lambda-grid", help="write as --lambda-grid=-inf,-10,... (values start with a dash)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("permute-eval", help="block similarity, L1 and sparsity per token ordering")
    p.add_argument("--dims", required=True, help="T,H,W")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--config")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_permute_eval)

    p = sub.add_parser("bench", help="mask prediction overhead versus sequence length")
    p.add_argument("--lens", default="8192,16384,32768")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        log.error("internal invariant violated: %s", exc)
        return EXIT_INVARIANT
    except (ValidationError, TensorIOError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
