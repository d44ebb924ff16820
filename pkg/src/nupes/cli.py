"""Command-line front end.

Every subcommand writes its outputs plus one ``*.manifest.json`` run record
and prints a single summary line. Failures print one JSON line to stderr and
exit nonzero. The default seed comes from ``NUPES_SEED`` when set.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .gptq import BetaScheduler, OptConfig, optimize_model
from .quant import QuantConfig, dequantize, generate_levels, quantize
from .runtime import (
    PASS_THROUGH,
    PolicyError,
    QuantPolicy,
    calibrate,
    evaluate,
    fixture_splits,
    load_bundle,
    load_csv,
    load_model,
    make_dataset,
    quantize_model,
    save_bundle,
    save_csv,
    save_model,
    train_fixture,
)
from .search import SearchConfig, powerquant_datafree
from .tensor import Granularity


class CLIError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class RunManifest:
    command: str
    flags: dict
    seed: int | None
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    outputs: list = field(default_factory=list)

    def write(self, path: Path) -> None:
        self.finished = _now()
        path.write_text(json.dumps(asdict(self), indent=2, default=str))


def _default_seed() -> int:
    raw = os.environ.get("NUPES_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CLIError(f"NUPES_SEED must be an integer, got {raw!r}") from None


def _hidden(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated sizes, got {text!r}") from None
    if not dims or min(dims) <= 0:
        raise argparse.ArgumentTypeError("hidden sizes must be positive")
    return dims


def _scheduler(text: str) -> str:
    try:
        BetaScheduler.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _granularity(text: str) -> Granularity:
    try:
        return Granularity.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_fixture(args, run: RunManifest) -> str:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = make_dataset(num_classes=args.classes, num_samples=args.samples, input_dim=args.dims,
                      seed=args.seed, separation=args.separation)
    train, calib, test = fixture_splits(ds, args.calib_size, args.test_size, seed=args.seed)
    model = train_fixture(args.hidden, train, epochs=args.epochs, seed=args.seed, name="fixture")
    save_model(model, out / "model.json")
    paths = [out / "model.json", out / "model.bin"]
    for name, part in (("train", train), ("calib", calib), ("test", test)):
        save_csv(part, out / f"{name}.csv")
        paths.append(out / f"{name}.csv")
    run.outputs += [str(p) for p in paths]
    run.flags["layer_dims"] = model.dims
    return (f"fixture dims={'-'.join(map(str, model.dims))} train_acc={evaluate(model, train):.4f} "
            f"test_acc={evaluate(model, test):.4f} out={out}")


def _policy_flags(args) -> dict:
    return dict(granularity=args.granularity, first_last_8bit=args.first_last_8bit)


def cmd_search(args, run: RunManifest) -> str:
    out = Path(args.out)
    model = load_model(args.model)
    res = powerquant_datafree(model, args.bits, SearchConfig(bits=args.bits, p=args.p))
    trace = {"exponent": res.exponent, "error": res.error, "iterations": res.search.iterations,
             "bits": args.bits, "p": args.p, "trace": res.search.trace}
    run.outputs.append(str(_write_json(out / "search_trace.json", trace)))
    policy = res.policy(args.bits, args.abits, **_policy_flags(args))
    if args.calib:
        policy = calibrate(model, policy, load_csv(args.calib).features)
        save_bundle(quantize_model(model, policy), out / "bundle")
        run.outputs.append(str(out / "bundle"))
    return f"search a={res.exponent:.6f} error={res.error:.6g} iterations={res.search.iterations} out={out}"


def cmd_optimize(args, run: RunManifest) -> str:
    out = Path(args.out)
    model = load_model(args.model)
    calib = load_csv(args.calib).features
    cfg = OptConfig(steps=args.steps, batch_size=args.batch_size,
                    num_samples=min(args.samples, len(calib)), mode=args.mode, method=args.method,
                    scheduler=args.scheduler, init_exponent=args.init_a, seed=args.seed)
    policy = QuantPolicy(args.wbits, args.abits, args.init_a, **_policy_flags(args))
    bundle, report = optimize_model(model, calib, cfg, policy)
    save_bundle(bundle, out / "bundle")
    run.outputs += [str(out / "bundle"), str(_write_json(out / "report.json", report))]
    a = ",".join(f"{r['learned_a']:.4f}" for r in report)
    loss = sum(r["final_loss"] for r in report)
    return f"optimize mode={args.mode} scheduler={args.scheduler} steps={args.steps} a=[{a}] loss={loss:.6g} out={out}"


def cmd_eval(args, run: RunManifest) -> str:
    data = load_csv(args.data)
    model = load_model(args.model)
    if args.bundle:
        target, policy = load_bundle(args.bundle), {"bundle": str(args.bundle)}
        acc = evaluate(target, data)
    elif args.wbits is None:
        acc, policy = evaluate(model, data), PASS_THROUGH.describe()
    else:
        pol = QuantPolicy(args.wbits, args.abits, args.a, **_policy_flags(args))
        if not args.calib:
            raise PolicyError("quantized evaluation needs frozen activation scales: pass --calib")
        pol = calibrate(model, pol, load_csv(args.calib).features)
        acc, policy = evaluate(model, data, pol), pol.describe()
    result = {"accuracy": acc, "num_samples": len(data), "policy": policy}
    if args.out:
        run.outputs.append(str(_write_json(Path(args.out), result)))
    return f"eval accuracy={acc:.4f} num_samples={len(data)}"


def cmd_levels(args, run: RunManifest) -> str:
    levels = generate_levels(args.format, args.bits, args.a)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["format", "bits", "exponent", "index", "level"])
        for i, v in enumerate(levels):
            w.writerow([args.format, args.bits, args.a if args.format == "power" else "", i, repr(float(v))])
    run.outputs.append(str(out))
    return f"levels format={args.format} bits={args.bits} count={len(levels)} out={out}"


def cmd_error_hist(args, run: RunManifest) -> str:
    model = load_model(args.model)
    cfg = QuantConfig(args.bits, args.a)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "row", "col", "weight", "code", "dequantized", "error", "error_in_steps"])
        for li, layer in enumerate(model.layers):
            q = quantize(layer.weights, cfg)
            deq = dequantize(q, np.float64)
            x = layer.weights.astype(np.float64)
            # error in units of the local grid step, in the transformed domain
            t = np.sign(x) * np.abs(x) ** args.a / q.scales.item()
            steps = t - q.codes
            for (r, c), v in np.ndenumerate(x):
                w.writerow([li, r, c, repr(float(v)), int(q.codes[r, c]), repr(float(deq[r, c])),
                            repr(float(v - deq[r, c])), repr(float(steps[r, c]))])
                rows += 1
    run.outputs.append(str(out))
    return f"error-hist a={args.a} bits={args.bits} rows={rows} out={out}"


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message, code=2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    raise SystemExit(code)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nupes", description="Power-exponent quantization toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=None, help="default: $NUPES_SEED or 0")

    def policy_opts(sp):
        sp.add_argument("--granularity", type=_granularity, default=Granularity(),
                        help="per-tensor, per-channel or per-group:N")
        sp.add_argument("--first-last-8bit", action=argparse.BooleanOptionalAction, default=True,
                        help="keep the first and last layers at 8 bits")

    sp = sub.add_parser("fixture", help="train a synthetic fixture model and its data splits")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--samples", type=int, default=14000)
    sp.add_argument("--dims", type=int, default=8)
    sp.add_argument("--hidden", type=_hidden, default=(64, 32))
    sp.add_argument("--separation", type=float, default=3.0)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--calib-size", type=int, default=1024)
    sp.add_argument("--test-size", type=int, default=8000)
    seeded(sp)
    sp.set_defaults(func=cmd_fixture)

    sp = sub.add_parser("search", help="data-free search of one shared exponent")
    sp.add_argument("--model", required=True)
    sp.add_argument("--bits", type=int, default=4)
    sp.add_argument("--abits", type=int, default=4)
    sp.add_argument("--p", type=int, default=2, choices=(1, 2))
    sp.add_argument("--calib", help="CSV used to freeze activation scales for the bundle")
    sp.add_argument("--out", required=True)
    policy_opts(sp)
    seeded(sp)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("optimize", help="layer-wise calibration of values and exponents")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--wbits", type=int, default=4)
    sp.add_argument("--abits", type=int, default=4)
    sp.add_argument("--mode", choices=("w", "a", "wa"), default="w")
    sp.add_argument("--method", choices=("nupes", "adaround"), default="nupes")
    sp.add_argument("--scheduler", type=_scheduler, default="const:20")
    sp.add_argument("--steps", type=int, default=10_000)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--samples", type=int, default=1024)
    sp.add_argument("--init-a", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    policy_opts(sp)
    seeded(sp)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("eval", help="top-1 accuracy of a model or quantized bundle")
    sp.add_argument("--model", required=True)
    sp.add_argument("--bundle")
    sp.add_argument("--data", required=True)
    sp.add_argument("--wbits", type=int, help="quantize on the fly (needs --calib)")
    sp.add_argument("--abits", type=int, default=None)
    sp.add_argument("--a", type=float, default=1.0)
    sp.add_argument("--calib")
    sp.add_argument("--out")
    policy_opts(sp)
    seeded(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("levels", help="CSV of a quantization level set")
    sp.add_argument("--format", required=True, choices=("uniform", "power", "log2", "fp4-e2m1"))
    sp.add_argument("--bits", type=int, default=4)
    sp.add_argument("--a", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_levels, seed=None)

    sp = sub.add_parser("error-hist", help="CSV of per-weight quantization errors")
    sp.add_argument("--model", required=True)
    sp.add_argument("--a", type=float, default=0.5)
    sp.add_argument("--bits", type=int, default=4)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_error_hist, seed=None)
    return p


def _manifest_path(args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(".")
    if args.command in ("fixture", "search", "optimize"):
        return out / "run.manifest.json"
    if getattr(args, "out", None):
        return out.with_name(out.name + ".manifest.json")
    return Path(f"{args.command}.manifest.json")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if "seed" in vars(args) and args.seed is None and args.command not in ("levels", "error-hist"):
            args.seed = _default_seed()
        if args.command == "eval" and args.wbits is not None and args.abits is None:
            args.abits = args.wbits
        flags = {k: (str(v) if isinstance(v, Granularity) else v)
                 for k, v in vars(args).items() if k not in ("func",)}
        run = RunManifest(args.command, flags, args.seed)
        summary = args.func(args, run)
        path = _manifest_path(args)
        path.parent.mkdir(parents=True, exist_ok=True)
        run.outputs.append(str(path))
        run.write(path)
    except SystemExit:
        raise
    except Exception as exc:  # one parseable line, whatever went wrong
        _fail(type(exc).__name__, str(exc))
    print(summary)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
