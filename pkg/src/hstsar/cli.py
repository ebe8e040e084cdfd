"""Command-line entry point: ``hstsar <subcommand> ...``.

Failures print a JSON object ``{"error": kind, "message": ...}`` on stderr
and exit with status 2 (package errors) or 1 (I/O and other errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis
from .errors import HstError
from .harness.config import load_config, output_root
from .harness.data_io import read_dataset, write_dataset
from .harness.tasks import SPLITS, generate
from .harness.train import bottleneck_sweep, encode_dataset, evaluate, train
from .hst import load_checkpoint
from .topology import build_topology, export_topology


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _write_or_print(text, out):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _config(args):
    return load_config(args.config, args.set or ())


def cmd_train(args):
    cfg = _config(args)
    out = Path(args.out) if args.out else output_root() / "train"
    log = (lambda r: print(json.dumps(r.metrics()), file=sys.stderr)) if args.verbose else None
    res = train(cfg.model_config(), cfg.train, cfg.sar, cfg.task, out, log=log)
    _emit({"out_dir": str(out), "final": res.final.metrics(),
           "test_accuracy": res.test.accuracy, "test_divergence": res.test.divergence})


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    ds, _ = read_dataset(args.data)
    batch = encode_dataset(ds, model.config.g, model.config.w)
    res = evaluate(model, batch, roll=args.roll or None)
    _emit({"accuracy": res.accuracy, "divergence": res.divergence, "count": res.count})


def cmd_sweep(args):
    cfg = _config(args)
    # the sweep chooses g, the ST/HST switch and the init seed per cell
    model_kw = {k: v for k, v in cfg.model.items() if k not in ("g", "hierarchical_enabled", "init_seed")}
    rep = bottleneck_sweep(model_kw, cfg.train, cfg.task, cfg.sweep["g_values"], cfg.sweep["repeats"],
                           cfg.sar, workers=args.workers or cfg.sweep["workers"])
    out = args.out or str(output_root() / "sweep.csv")
    _write_or_print(rep.to_csv(), None if out == "-" else out)
    if out != "-":
        _emit({"csv": out, "rows": [list(r) for r in rep.rows]})


def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out) if args.out else output_root() / "data"
    files = {}
    for split in SPLITS:
        path = out / f"{split}.bin"
        write_dataset(path, generate(cfg.task, split), {"task": cfg.task.to_dict(), "split": split})
        files[split] = str(path)
    _emit(files)


def cmd_inspect_topology(args):
    topo = build_topology(args.n_base, args.g, args.w, insert_reps=args.reps, r=args.r, seed=args.seed)
    doc = export_topology(topo)
    if args.out:
        Path(args.out).write_text(json.dumps(doc, sort_keys=True) + "\n")
    summary = {"n": topo.n, "g": topo.g, "w": topo.w, "m": topo.m, "nnz": topo.nnz(),
               "density": topo.nnz() / max(topo.n * topo.n, 1),
               "rep_positions": list(topo.rep_positions), "block_starts": list(topo.block_starts)}
    if args.show:
        summary["mask"] = ["".join("#" if v else "." for v in row) for row in topo.mask]
    _emit(summary)


def cmd_flow(args):
    rep = analysis.flow_report(args.topology, args.layers, args.hierarchical)
    _emit(rep.to_dict())


def cmd_flops(args):
    if args.configs:
        configs = json.loads(Path(args.configs).read_text())
    else:
        configs = [{"n": n, "g": args.g, "w": args.w, "d": args.d} for n in args.n]
    _write_or_print(analysis.flop_table(configs), args.out)


def cmd_plotdata(args):
    _write_or_print(analysis.sweep_plotdata(args.csv), args.out)


def build_parser():
    p = argparse.ArgumentParser(prog="hstsar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON file with model/train/sar/task/sweep sections")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        return sp

    sp = with_config(sub.add_parser("train", help="train one model"))
    sp.add_argument("--out", help="run directory (default $HSTSAR_OUTPUT_ROOT/train)")
    sp.add_argument("--verbose", action="store_true", help="log each eval record to stderr")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a token file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="binary token file written by gen-data")
    sp.add_argument("--roll", type=int, default=0, help="roll amount for the divergence metric")
    sp.set_defaults(fn=cmd_eval)

    sp = with_config(sub.add_parser("sweep", help="ST vs HST accuracy across global-token counts"))
    sp.add_argument("--out", help="CSV path, '-' for stdout (default $HSTSAR_OUTPUT_ROOT/sweep.csv)")
    sp.add_argument("--workers", type=int, help="parallel processes")
    sp.set_defaults(fn=cmd_sweep)

    sp = with_config(sub.add_parser("gen-data", help="write train/dev/test token files"))
    sp.add_argument("--out", help="directory (default $HSTSAR_OUTPUT_ROOT/data)")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("inspect-topology", help="build a layout, print a summary, optionally export it")
    sp.add_argument("--n-base", type=int, required=True)
    sp.add_argument("--g", type=int, required=True)
    sp.add_argument("--w", type=int, required=True)
    sp.add_argument("--reps", action="store_true", help="insert representative tokens")
    sp.add_argument("--r", type=int, help="random columns per row")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--show", action="store_true", help="include an ASCII picture of the mask")
    sp.add_argument("--out", help="write the JSON export here")
    sp.set_defaults(fn=cmd_inspect_topology)

    sp = sub.add_parser("flow", help="information-flow report for an exported topology")
    sp.add_argument("topology", help="topology JSON file")
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--hierarchical", action="store_true")
    sp.set_defaults(fn=cmd_flow)

    sp = sub.add_parser("flops", help="per-layer FLOP table, ST vs HST vs dense")
    sp.add_argument("--configs", help="JSON list of {n, g, w, d}")
    sp.add_argument("--n", type=int, nargs="+", default=[1024, 4096, 16384])
    sp.add_argument("--g", type=int, default=1)
    sp.add_argument("--w", type=int, default=192)
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_flops)

    sp = sub.add_parser("plotdata", help="merge sweep CSVs into plot-ready data")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_plotdata)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except HstError as e:
        print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
        return 2
    except (OSError, KeyError, json.JSONDecodeError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
