"""Command-line entry point.

Subcommands tie the engine into runnable workflows:

* ``explain``      — forward one image, backpropagate the excitation
  chains, and write a heatmap (plus optional raw coefficient pair);
* ``eval-remove``  — salient-pixel removal APD curves;
* ``eval-minor``   — minor-pixel removal APD curves;
* ``eval-logit``   — one-step subtraction logit-delta table;
* ``attack-guide`` — saliency-gated I-FGSM success rates;
* ``selftest``     — quick oracle/identity suite;
* ``info``         — weight-file summary.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
malformed inputs), 3 numeric failure.  Every output file is written
atomically, and a fixed ``--seed`` makes every workflow byte-identical
across runs.
"""

from __future__ import annotations

import argparse
import sys

from . import chain as ch
from . import evaluate as ev
from . import model as md
from . import saliency as sal
from . import selftest as st
from .errors import FormatError, NumericError, ShapeError
from .imageio import GRAY, SIGNED, read_image, write_heatmap
from .tensor import Tensor, atomic_write_bytes

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exception, not sys.exit."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _ratio_list(text: str) -> tuple:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise _UsageError(f"bad ratio list {text!r}; expected comma-separated numbers")
    if not values:
        raise _UsageError("ratio list is empty")
    return values


def _method_list(text: str) -> tuple:
    return tuple(m.strip() for m in text.split(",") if m.strip())


# Default ratio grids: salient removal sweeps 0.1%-1%, minor removal
# 1%-10%, the logit-delta protocol 0.01%-0.1%, attack retention 1%-3%.
GRID_SALIENT = tuple(round(0.001 * i, 6) for i in range(1, 11))
GRID_MINOR = tuple(round(0.01 * i, 6) for i in range(1, 11))
GRID_LOGIT = tuple(round(0.0001 * i, 7) for i in range(1, 11))
GRID_KEEP = (0.01, 0.02, 0.03)


def _build_parser() -> _Parser:
    p = _Parser(prog="pane", description="Per-layer excitation analysis toolkit")
    sub = p.add_subparsers(dest="cmd", metavar="COMMAND")

    def add_eval_common(sp, default_methods, default_ratios):
        sp.add_argument("--model", required=True, help="weight file (.panew)")
        sp.add_argument("--dataset", required=True, help="directory with labels.csv + images")
        sp.add_argument("--methods", type=_method_list, default=default_methods,
                        help="comma-separated saliency methods")
        sp.add_argument("--ratios", type=_ratio_list, default=default_ratios,
                        help="comma-separated pixel ratios")
        sp.add_argument("--fill", type=float, default=0.0, help="replacement pixel value")
        sp.add_argument("--seed", type=int, default=0, help="seed for stochastic baselines")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.add_argument("--limit", type=int, default=0, help="cap on dataset rows (0 = all)")
        sp.add_argument("--out-csv", required=True, help="per-row CSV output path")
        sp.add_argument("--out-json", default="", help="optional JSON summary path")

    e = sub.add_parser("explain", help="write a saliency heatmap for one image")
    e.add_argument("--model", required=True)
    e.add_argument("--input", required=True, help="P5/P6 image or raw tensor file")
    e.add_argument("--class", dest="class_index", type=int, default=-1,
                   help="logit to explain (default: the predicted class)")
    e.add_argument("--variant", choices=("pos", "neg", "sum"), default="sum")
    e.add_argument("--out", required=True, help="heatmap output path")
    e.add_argument("--style", choices=(GRAY, SIGNED), default="",
                   help="rendering style (default: signed for sum, gray otherwise)")
    e.add_argument("--pair-out", default="",
                   help="prefix for raw coefficient output (.pos.ptnsr/.neg.ptnsr/.json)")
    e.add_argument("--guided-product", action="store_true",
                   help="multiply the map elementwise with the guided-backprop map")

    r = sub.add_parser("eval-remove", help="salient-pixel removal APD curves")
    add_eval_common(r, (sal.PANE_POS, sal.RANDOM), GRID_SALIENT)

    m = sub.add_parser("eval-minor", help="minor-pixel removal APD curves")
    add_eval_common(m, (sal.PANE_POS,), GRID_MINOR)

    lg = sub.add_parser("eval-logit", help="one-step subtraction logit-delta table")
    add_eval_common(lg, (sal.PANE_SUM,), GRID_LOGIT)
    lg.add_argument("--variant", choices=(ev.POS_REGION, ev.NEG_REGION),
                    default=ev.POS_REGION)

    a = sub.add_parser("attack-guide", help="saliency-gated I-FGSM success rates")
    add_eval_common(a, (sal.PANE_POS, sal.GRADCAM), GRID_KEEP)
    a.add_argument("--linf", type=float, default=ev.ATTACK_LINF)
    a.add_argument("--step", type=float, default=ev.ATTACK_STEP)
    a.add_argument("--iters", type=int, default=ev.ATTACK_ITERS)

    s = sub.add_parser("selftest", help="run the oracle/identity self-checks")
    s.add_argument("--models", type=int, default=5, help="random models per suite")
    s.add_argument("--seed", type=int, default=20240501)
    s.add_argument("--model", default="", help="also check reconstruction on this weight file")

    i = sub.add_parser("info", help="summarize a weight file")
    i.add_argument("--model", required=True)
    return p


def _eval_config(args) -> ev.EvalConfig:
    try:
        return ev.EvalConfig(
            dataset=args.dataset,
            model=args.model,
            methods=tuple(args.methods),
            ratios=tuple(args.ratios),
            fill=args.fill,
            seed=args.seed,
            jobs=args.jobs,
            limit=args.limit,
        )
    except ValueError as exc:
        raise _UsageError(str(exc))


def _write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _cmd_explain(args) -> int:
    model = md.load_model_file(args.model)
    image = read_image(args.input)
    if image.shape != model.input_shape:
        raise ShapeError(
            f"input shape {image.shape} does not match model input {model.input_shape}"
        )
    trace = md.forward(model, image)
    logits = md.logits(trace)
    k = args.class_index
    if k < 0:
        k = ev.top1(logits)
    elif k >= model.class_count:
        raise _UsageError(f"class {k} out of range for {model.class_count} classes")
    pair = ch.pane_explain(model, trace, k)
    bundle = sal.assemble_pane(pair, args.variant)
    heat = bundle.map
    if args.guided_product:
        guided = sal.baseline_map(model, trace, k, sal.GUIDED_BP)
        heat = Tensor(heat.shape, [a * b for a, b in zip(heat.data, guided.map.data)], heat.dtype)
    style = args.style or (SIGNED if args.variant == "sum" else GRAY)
    write_heatmap(heat, args.out, style)
    if args.pair_out:
        ch.save_pair(pair, args.pair_out)
    print(f"class {k} variant {args.variant} -> {args.out}")
    return EXIT_OK


def _cmd_eval_remove(args, mode: str) -> int:
    cfg = _eval_config(args)
    curves = ev.apd_curve(cfg, mode)
    _write_text(args.out_csv, ev.apd_csv(curves))
    if args.out_json:
        _write_text(args.out_json, ev.summary_json(f"apd_{mode}", cfg, ev.curves_payload(curves)))
    for method in sorted(curves):
        c = curves[method]
        span = f"{c.ratios[0]:g}..{c.ratios[-1]:g}"
        print(f"{method}: apd[{span}] last={c.values[-1]:+.6f} over {c.samples} images")
    return EXIT_OK


def _cmd_eval_logit(args) -> int:
    cfg = _eval_config(args)
    if len(cfg.methods) != 1:
        raise _UsageError("eval-logit takes exactly one --methods entry")
    table = ev.logit_delta(cfg, args.variant, cfg.methods[0])
    _write_text(args.out_csv, ev.logit_csv(table))
    if args.out_json:
        _write_text(args.out_json, ev.summary_json("logit_delta", cfg, ev.logit_payload(table)))
    for r, s, f in zip(table.ratios, table.sum_deltas, table.direction_fractions):
        print(f"ratio {r:g}: sum_delta {s:+.6f} expected-direction {f:.2%}")
    return EXIT_OK


def _cmd_attack(args) -> int:
    cfg = _eval_config(args)
    table = ev.guided_attack_eval(cfg, cfg.ratios, args.linf, args.step, args.iters)
    _write_text(args.out_csv, ev.attack_csv(table))
    if args.out_json:
        _write_text(args.out_json, ev.summary_json("attack_guide", cfg, ev.attack_payload(table)))
    print(f"unrestricted success {table.unrestricted_rate:.2%} over {table.samples} images")
    for method in table.methods:
        rates = " ".join(
            f"{r:g}:{table.success_rates[(method, r)]:.2%}" for r in table.keep_ratios
        )
        print(f"{method}: {rates}")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    ok = st.run_selftest(models=args.models, seed=args.seed)
    if args.model:
        graph = md.load_model_file(args.model)
        ok = st.fixture_reconstruction_check(graph, seed=args.seed) and ok
    print("selftest: all checks passed" if ok else "selftest: FAILURES above")
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_info(args) -> int:
    model = md.load_model_file(args.model)
    print(f"name:    {model.name}")
    print(f"input:   {model.input_shape}")
    print(f"classes: {model.class_count}")
    print(f"sha256:  {model.hash}")
    print(f"layers:  {len(model.layers)}")
    for i, layer in enumerate(model.layers):
        shape = model.boundary_shapes[i + 1]
        desc = layer.kind
        if layer.kind == md.LINEAR:
            desc += f" {layer.weight.shape[1]}->{layer.weight.shape[0]}"
        elif layer.kind == md.CONV2D:
            o, c, kh, kw = layer.kernel.shape
            desc += f" {c}->{o} k{kh}x{kw} s{layer.stride} p{layer.padding}"
        elif layer.kind in (md.MAXPOOL, md.AVGPOOL):
            desc += f" k{layer.window[0]}x{layer.window[1]} s{layer.stride}"
        name = f" ({layer.name})" if layer.name else ""
        print(f"  [{i}] {desc}{name} -> {shape}")
    extras = {k: v for k, v in model.meta.items() if k not in ("input_shape", "class_count")}
    if extras:
        print(f"meta:    {extras}")
    return EXIT_OK


def run_cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.cmd:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.cmd == "explain":
            return _cmd_explain(args)
        if args.cmd == "eval-remove":
            return _cmd_eval_remove(args, ev.SALIENT)
        if args.cmd == "eval-minor":
            return _cmd_eval_remove(args, ev.MINOR)
        if args.cmd == "eval-logit":
            return _cmd_eval_logit(args)
        if args.cmd == "attack-guide":
            return _cmd_attack(args)
        if args.cmd == "selftest":
            return _cmd_selftest(args)
        if args.cmd == "info":
            return _cmd_info(args)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
