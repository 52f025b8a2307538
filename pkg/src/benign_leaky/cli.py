"""Command line entry point: ``benign-leaky <verb> --config cfg.json --out dir``."""
import argparse
import csv
import json
import logging
import os
import sys

from .errors import BenignLeakyError
from .harness import (
    ExperimentConfig,
    expand_cells,
    format_value,
    load_config,
    resolve_cell,
    run_sweep,
    train_config_for,
)
from .limit import build_block_gram, min_norm_direction
from .mixture import generate
from .network import init_network, train
from .regime import check_assumptions, format_report
from .risk import error_report
from .rng import derive_seed

log = logging.getLogger("benign_leaky")

VERBS = ("generate", "check", "train", "limit", "error", "sweep", "verify")


def build_parser():
    ap = argparse.ArgumentParser(prog="benign-leaky", description=__doc__)
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
    ap.add_argument("--seed", type=int, help="master seed (unsigned 64-bit), overrides the config")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--override-scale", action="store_true",
                    help="allow n > 512 or p > 65536")
    ap.add_argument("--no-resume", action="store_true", help="ignore an existing sweep journal")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _base_cell(cfg, override):
    """The config without its sweep axes, as cell 0."""
    raw = cfg.to_dict()
    raw["sweep"] = []
    base = ExperimentConfig(raw)
    idx, coords, r = next(expand_cells(base))
    return resolve_cell(idx, coords, r, cfg.seed, override)


def _instance(cell):
    seed = derive_seed(cell.master_seed, cell.index, 0)
    spec = cell.mixture_spec(seed)
    data = generate(spec)
    split = cell.split()
    tc = train_config_for(cell.raw["train"], data, cell.gamma, split.m)
    state0 = init_network(spec.p, split.signs(), cell.gamma, tc, seed=seed)
    return seed, spec, data, split, tc, state0


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, default=str)


def _flat_csv(path, row):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(row))
        w.writerow([format_value(v) for v in row.values()])


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (BenignLeakyError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    os.makedirs(args.out, exist_ok=True)
    out = args.out
    if args.verb == "sweep":
        rows = run_sweep(cfg, out, workers=args.workers, override_scale=args.override_scale,
                         resume=not args.no_resume)
        print(f"{len(rows)} cells written to {os.path.join(out, cfg.outputs.get('csv', 'sweep.csv'))}")
        return 0
    cell = _base_cell(cfg, args.override_scale)
    if args.verb == "verify":
        from .verify import run_verify
        checks, rep = run_verify(cell)
        _dump(os.path.join(out, "verify.json"), {"checks": checks, "regime": json.loads(rep.to_json())})
        width = max(len(c["name"]) for c in checks)
        for c in checks:
            print(f"{c['name']:<{width}}  {'PASS' if c['passed'] else 'FAIL'}  {c['detail'] or ''}")
        return 0 if all(c["passed"] for c in checks) else 2
    seed, spec, data, split, tc, state0 = _instance(cell)
    R = spec.sigma_spec.trace(spec.p)
    if args.verb == "generate":
        data.to_csv(os.path.join(out, "dataset.csv"))
        with open(os.path.join(out, "spec.json"), "w") as fh:
            fh.write(spec.to_json(indent=1))
        print(f"n={spec.n} p={spec.p} seed={seed} -> {out}")
        return 0
    if args.verb == "check":
        rep = check_assumptions(data, tc, state0, R=R)
        with open(os.path.join(out, "regime.json"), "w") as fh:
            fh.write(rep.to_json(indent=1))
        print(format_report(rep))
        return 0
    ld = min_norm_direction(data, build_block_gram(data, cell.gamma, split), R=R)
    if args.verb == "limit":
        with open(os.path.join(out, "limit.json"), "w") as fh:
            fh.write(ld.to_json(indent=1))
        ld.certificate_to_csv(os.path.join(out, "certificate.csv"))
        print(f"certificate min {ld.sv_certificate.min():.6g}; "
              f"all support vectors: {ld.certificate_positive}")
        return 0
    if args.verb == "train":
        trace = train(data, tc, state0, reference=ld)
        trace.to_csv(os.path.join(out, "trace.csv"))
        _dump(os.path.join(out, "train_summary.json"), trace.summary())
        print(json.dumps(trace.summary(), indent=1))
        return 0
    if args.verb == "error":
        er = error_report(ld.w_bar, spec, data.n, R=R, mc_samples=cfg.mc_samples, seed=seed)
        _dump(os.path.join(out, "error.json"), er.to_dict())
        _flat_csv(os.path.join(out, "error.csv"), er.csv_row())
        print(er.to_json(indent=1))
        return 0
    raise AssertionError(args.verb)


if __name__ == "__main__":
    sys.exit(main())
