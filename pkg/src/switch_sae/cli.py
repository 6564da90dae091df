"""Command-line entry point.

Exit codes: 0 success, 2 config/schema error, 3 I/O or format error,
4 numerical failure (non-finite loss, gradient check failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from .config import ConfigError, RunConfig, load_run_config
from .data import FormatError, batch_iterator, generate_synthetic, read_activations, write_activations
from .eval import geometry_report, reconstruction_metrics
from .grad import finite_diff_check
from .model import ArchSpec, SwitchSaeParams, flops_per_activation, matched_dense, matched_switch
from .modelfile import load_model, save_model
from .numerics import NumericalError
from .train import train

log = logging.getLogger("switch_sae")

GRADCHECK_TOL = 1e-5
DEFAULT_GRADCHECK_ARCHS = [
    ArchSpec("topk", 4, 8, 1, 3),
    ArchSpec("relu", 4, 8),
    ArchSpec("switch", 4, 12, 3, 2),
]


def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _write_resolved(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        fh.write(cfg.to_json())


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    spec = cfg.data.synthetic_spec()
    x, truth, _ = generate_synthetic(spec, cfg.data.count)
    write_activations(args.out, x)
    _dump_json(args.out + ".truth.json", {
        "d": spec.d,
        "num_features": spec.num_true_features,
        "dictionary": truth.matrix.T.tolist(),
        "clusters": truth.clusters.tolist(),
    })
    if args.heldout:
        xh, _, _ = generate_synthetic(spec, cfg.data.heldout_count, stream=1)
        write_activations(args.heldout, xh)
    _write_resolved(args.out + ".config.json", cfg)
    return 0


def _write_log(path, rows, N: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "recon", "aux", "total", "dead_frac"] + [f"f_{i}" for i in range(N)])
        for r in rows:
            w.writerow([r.step, repr(r.lr), repr(r.recon), repr(r.aux), repr(r.total), repr(r.dead_frac)]
                       + [repr(v) for v in r.f])


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    reader = read_activations(args.data)
    cfg.data.d = reader.d
    tc = cfg.train_config(d=reader.d)
    batches = batch_iterator(reader, tc.batch_size, cfg.train.shuffle_buffer, tc.seed, epochs=None)
    result = train(tc, batches)
    save_model(args.out, result.params, tc.kind, tc.k)
    _write_resolved(args.out + ".config.json", cfg)
    if args.log:
        _write_log(args.log, result.log, tc.N if tc.kind == "switch" else 1)
    return 0


def cmd_eval(args) -> int:
    params, kind, k = load_model(args.model)
    x = read_activations(args.data).read_all().astype(np.float64)
    report = reconstruction_metrics(params, x, None if kind == "relu" else k)
    _dump_json(args.out, report.as_dict())
    return 0


def cmd_geometry(args) -> int:
    params, _, _ = load_model(args.model)
    baseline = None
    if args.baseline_model:
        base, _, _ = load_model(args.baseline_model)
        baseline = base.decoder_columns()
    report = geometry_report(params, args.threshold, baseline, args.blocks, args.seed)
    _dump_json(args.out, report.as_dict())
    return 0


def _flops_rows(arch: ArchSpec, N: int | None):
    rows = [("configured", arch)]
    if arch.kind == "switch":
        rows += list(matched_dense(arch).items())
    elif arch.kind == "topk" and N and N > 1:
        rows += [(f"{name}_switch", a) for name, a in matched_switch(arch, N).items()]
    return rows


def cmd_flops(args) -> int:
    cfg = load_run_config(args.config)
    m = cfg.model
    try:
        arch = ArchSpec(m.kind, cfg.data.d, m.M, m.N if m.kind == "switch" else 1, m.k)
    except ValueError as e:
        raise ConfigError(f"model: {e}") from e
    rows = _flops_rows(arch, m.N)
    cols = ["setting", "kind", "d", "M", "N", "k", "encoder", "router", "decoder", "bias", "total"]
    out = [cols]
    reports = {}
    for name, a in rows:
        r = flops_per_activation(a)
        reports[name] = r
        out.append([name, a.kind, a.d, a.M, a.N, a.k, r.encoder_flops, r.router_flops, r.decoder_flops,
                    r.bias_flops, r.total_flops])
    widths = [max(len(str(row[i])) for row in out) for i in range(len(cols))]
    for row in out:
        print("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))
    if arch.kind == "switch":
        own = reports["configured"]
        dense = reports["width_matched"]
        ratio = dense.encoder_flops / (own.encoder_flops + own.router_flops)
        print(f"encoder_ratio_vs_width_matched_dense {ratio:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = load_run_config(args.config)
        m = cfg.model
        try:
            archs = [ArchSpec(m.kind, cfg.data.d, m.M, m.N if m.kind == "switch" else 1, m.k)]
        except ValueError as e:
            raise ConfigError(f"model: {e}") from e
        alpha, l1 = cfg.train.alpha, cfg.train.l1_coeff or 0.1
    else:
        archs, alpha, l1 = DEFAULT_GRADCHECK_ARCHS, 3.0, 0.1
    worst = 0.0
    for arch in archs:
        try:
            report = finite_diff_check(arch, args.seed, args.h, alpha=alpha, l1_coeff=l1)
        except RuntimeError as e:
            raise NumericalError(f"{arch.kind}: {e}") from e
        for block, err in report.max_rel_err.items():
            print(f"{arch.kind}\t{block}\t{err:.3e}")
        if report.skipped:
            print(f"{arch.kind}\tskipped {len(report.skipped)} coordinates near selection boundaries")
        worst = max(worst, report.worst)
    print(f"max_rel_err {worst:.3e}")
    if worst > GRADCHECK_TOL:
        print(f"gradient check failed: {worst:.3e} > {GRADCHECK_TOL}", file=sys.stderr)
        return 4
    return 0


def cmd_export_features(args) -> int:
    params, _, _ = load_model(args.model)
    d = params.d
    if isinstance(params, SwitchSaeParams):
        width = params.expert_width
    else:
        width = params.num_features
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "expert", "feature"] + [f"v{i}" for i in range(d)])
        for kind, feats in (("encoder", params.encoder_rows()), ("decoder", params.decoder_columns())):
            for j, vec in enumerate(feats):
                w.writerow([kind, j // width, j % width] + [repr(float(v)) for v in vec])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="switch-sae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate synthetic activations")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--heldout", help="also write held-out samples over the same dictionary")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", help="train an SAE on an activation file")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="reconstruction metrics on held-out data")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("geometry", help="duplicate-feature and expert-similarity diagnostics")
    s.add_argument("--model", required=True)
    s.add_argument("--threshold", type=float, default=0.9)
    s.add_argument("--out", required=True)
    s.add_argument("--blocks", type=int, help="random-block baseline over N blocks (dense models)")
    s.add_argument("--baseline-model", help="dense model whose decoder is split for the baseline")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_geometry)

    s = sub.add_parser("flops", help="per-activation FLOPs and matched counterparts")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-features", help="write encoder/decoder feature vectors as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_features)
    return p


def _thread_limit():
    n = os.environ.get("SAE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
