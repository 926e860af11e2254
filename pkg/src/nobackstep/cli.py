"""Command-line driver: gen-data, train, simulate, bench, report.

Every subcommand accepts ``--config FILE`` holding a JSON object whose keys
are the flag names (dashes or underscores); explicit flags win over the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ConvergenceError, DivergenceError, FormatError
from .grid import SpatialGrid, TriangleGrid
from .kernels import NEURAL, NUMERICAL
from .loop import (KernelProvider, LyapunovWeights, SimSettings, read_trace_csv, run_closed_loop,
                   time_averaged_error, write_matrix_csv, write_trace_csv)
from .neuralop import (DeepONetModel, TrainConfig, _atomic_write, generate_dataset, load_dataset,
                       load_model, save_dataset, save_model, train, write_loss_csv)
from .plant import REFERENCE_M, PlantConfig

log = logging.getLogger("nobackstep")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _floats(text: str, count: int | None = None) -> tuple:
    try:
        vals = tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if count is not None and len(vals) != count:
        raise argparse.ArgumentTypeError(f"expected {count} numbers, got {len(vals)}")
    return vals


def _vec4(text):
    return _floats(text, 4)


def _pair(text):
    return _floats(text, 2)


def _add_plant_flags(p):
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--q", type=float, default=1.0)
    p.add_argument("--m", type=_vec4, default=REFERENCE_M, help="true coupling coefficients m1..m4")
    p.add_argument("--m-bar", type=_vec4, default=(4.0,) * 4)
    p.add_argument("--rho", type=_vec4, default=(40.0,) * 4)
    p.add_argument("--m-hat0", type=_vec4, default=(0.4,) * 4)
    p.add_argument("--filter0", type=float, default=2.0)
    p.add_argument("--a", type=float, default=2.0)
    p.add_argument("--b", type=float, default=2.0)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="nobackstep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["gen-data"] = sub.add_parser("gen-data", help="sample parameters and solve kernels")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--dx", type=float, default=0.05)
    p.add_argument("--bounds", type=_pair, default=(-4.0, 4.0), help="lo,hi of the parameter box")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--q", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=False)

    p = subs["train"] = sub.add_parser("train", help="fit a DeepONet to one kernel")
    p.add_argument("--data", type=Path, required=False)
    p.add_argument("--kernel", choices=("alpha", "beta"), default="alpha")
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--decay-every", type=int, default=100)
    p.add_argument("--decay-factor", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--p", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=False, help="model JSON; the loss CSV goes next to it")

    p = subs["simulate"] = sub.add_parser("simulate", help="run the adaptive closed loop")
    p.add_argument("--mode", choices=(NUMERICAL, NEURAL), default=NUMERICAL)
    p.add_argument("--model-alpha", type=Path)
    p.add_argument("--model-beta", type=Path)
    p.add_argument("--dx", type=float, default=0.02)
    p.add_argument("--dt", type=float, default=0.005)
    p.add_argument("--t-end", type=float, default=10.0)
    p.add_argument("--fields-out", type=Path, help="directory for dense psi(x,t), phi(x,t) CSVs")
    p.add_argument("--out", type=Path, required=False)
    _add_plant_flags(p)

    p = subs["bench"] = sub.add_parser("bench", help="numerical vs neural kernel timing")
    p.add_argument("--dx-list", type=_floats, default=(0.02, 0.01, 0.005))
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--dt", type=float, default=None, help="default: min(0.005, dx)")
    p.add_argument("--model-alpha", type=Path)
    p.add_argument("--model-beta", type=Path)
    p.add_argument("--out", type=Path, required=False)
    _add_plant_flags(p)

    p = subs["report"] = sub.add_parser("report", help="summarise trace CSVs")
    p.add_argument("--trace", type=Path, nargs="+")
    p.add_argument("--settle-fraction", type=float, default=0.02)
    p.add_argument("--out", type=Path, required=False)

    for p in subs.values():
        p.add_argument("--config", type=Path, help="JSON file of flag values")
    return parser, subs


def _apply_config(argv, parser, subs) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        raw = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.config}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{args.config}: top level must be an object")
    sub = subs[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in raw.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("help", "config"):
            raise ConfigurationError(f"{args.config}: unknown setting {key!r} for {args.command}")
        action = known[dest]
        if action.type is not None and value is not None:
            if action.nargs == "+":
                value = [action.type(str(v)) for v in (value if isinstance(value, list) else [value])]
            elif isinstance(value, list):
                value = action.type(",".join(str(v) for v in value))
            else:
                value = action.type(str(value))
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise ConfigurationError(f"--{name.replace('_', '-')} is required")


def _plant(args) -> PlantConfig:
    return PlantConfig(args.lam, args.mu, args.q, args.m, args.m_bar, args.rho)


def _settings(args, dx, dt, t_end, track=True, keep=False) -> SimSettings:
    return SimSettings(dx=dx, dt=dt, t_end=t_end, m_hat0=args.m_hat0, filter0=args.filter0,
                       weights=LyapunovWeights(args.a, args.b), track_kernel_error=track, keep_fields=keep)


def _load_models(args, cfg):
    _require(args, "model_alpha", "model_beta")
    for path in (args.model_alpha, args.model_beta):
        if not Path(path).is_file():
            raise FormatError(f"model file not found: {path}")
    return load_model(args.model_alpha), load_model(args.model_beta)


def cmd_gen_data(args) -> int:
    _require(args, "out")
    tri = TriangleGrid(SpatialGrid.from_dx(args.dx))
    physics = {"lambda": args.lam, "mu": args.mu, "q": args.q}
    ds = generate_dataset(args.n, args.bounds, tri, physics, args.seed)
    save_dataset(ds, args.out)
    log.info("wrote %d samples (%d train) to %s", ds.n, ds.n_train, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data", "out")
    ds = load_dataset(args.data)
    model = DeepONetModel.create(args.kernel, hidden=args.hidden, p=args.p, seed=args.seed, dx=ds.tri.dx)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, decay_every=args.decay_every,
                      decay_factor=args.decay_factor, batch_size=args.batch_size, seed=args.seed)
    model, hist = train(model, ds, cfg)
    out = Path(args.out)
    save_model(model, out)
    write_loss_csv(hist, out.with_suffix(".loss.csv"))
    log.info("%s: final train %.3e, test %.3e", args.kernel, hist.train[-1], hist.test[-1])
    return EXIT_OK


def cmd_simulate(args) -> int:
    _require(args, "out")
    cfg = _plant(args)
    cfg.check_cfl(args.dt, args.dx)
    if args.mode == NEURAL:
        provider = KernelProvider.neural(cfg, *_load_models(args, cfg))
    else:
        provider = KernelProvider.numerical(cfg)
    settings = _settings(args, args.dx, args.dt, args.t_end, keep=args.fields_out is not None)
    trace = run_closed_loop(cfg, settings, provider)
    write_trace_csv(trace, args.out)
    if args.fields_out is not None:
        Path(args.fields_out).mkdir(parents=True, exist_ok=True)
        header = ",".join(f"x{j}" for j in range(trace.psi_history.shape[1]))
        write_matrix_csv(trace.psi_history, Path(args.fields_out) / "psi.csv", header)
        write_matrix_csv(trace.phi_history, Path(args.fields_out) / "phi.csv", header)
    log.info("%d rows, kernel time %.3f s", len(trace), trace.provider_time)
    if trace.abort_index is not None:
        log.error("closed loop diverged at step %d; partial trace written", trace.abort_index)
        return EXIT_DIVERGED
    return EXIT_OK


def bench_row(cfg: PlantConfig, args, dx: float, models) -> dict:
    dt = args.dt if args.dt is not None else min(0.005, dx)
    cfg.check_cfl(dt, dx)
    settings = _settings(args, dx, dt, args.steps * dt, track=False)
    num = run_closed_loop(cfg, settings, KernelProvider.numerical(cfg))
    settings.track_kernel_error = True
    neu = run_closed_loop(cfg, settings, KernelProvider.neural(cfg, *models))
    for tr in (num, neu):
        if tr.abort_index is not None:
            raise DivergenceError(f"bench run at dx={dx} ({tr.mode}) diverged", index=tr.abort_index)
    return {"dx": dx, "numerical_s": num.provider_time, "neural_s": neu.provider_time,
            "speedup": num.provider_time / neu.provider_time, "error": time_averaged_error(neu)}


def cmd_bench(args) -> int:
    _require(args, "out")
    cfg = _plant(args)
    models = _load_models(args, cfg)
    rows = []
    for dx in args.dx_list:
        rows.append(bench_row(cfg, args, dx, models))
        r = rows[-1]
        log.info("dx=%g numerical %.3f s neural %.3f s speedup %.2fx error %.3e",
                 dx, r["numerical_s"], r["neural_s"], r["speedup"], r["error"])
    lines = ["dx,numerical_s,neural_s,speedup,error"]
    lines += [",".join(repr(float(r[k])) for k in ("dx", "numerical_s", "neural_s", "speedup", "error"))
              for r in rows]
    _atomic_write(Path(args.out), ("\n".join(lines) + "\n").encode())
    return EXIT_OK


def _settle_time(t, values, level) -> float | None:
    """First time after which ``values`` stays at or below ``level``."""
    above = np.nonzero(values > level)[0]
    if len(above) == 0:
        return float(t[0])
    if above[-1] == len(values) - 1:
        return None
    return float(t[above[-1] + 1])


def summarize_trace(tr: dict, settle_fraction: float = 0.02) -> dict:
    t = tr["t"]
    norm = tr["psi_norm"] + tr["phi_norm"]
    m = np.column_stack([tr[f"m{i}_hat"] for i in range(1, 5)])
    dm = np.abs(np.diff(m, axis=0)).max(axis=1) / np.diff(t) if len(t) > 1 else np.zeros(0)
    kerr = tr["kerr_alpha"] + tr["kerr_beta"]
    span = t[-1] - t[0]
    return {
        "rows": int(len(t)),
        "t_end": float(t[-1]),
        "final": {"psi_norm": float(tr["psi_norm"][-1]), "phi_norm": float(tr["phi_norm"][-1]),
                  "U": float(tr["U"][-1]), "m_hat": m[-1].tolist(), "V11": float(tr["V11"][-1])},
        "initial_state_norm": float(norm[0]),
        "decay_ratio": float(norm[-1] / norm[0]) if norm[0] > 0 else 0.0,
        "settling_time": _settle_time(t, norm, settle_fraction * norm[0]),
        "parameter_settling_time": _settle_time(t[1:], dm, 1e-3) if len(dm) else float(t[0]),
        "max_abs_r_left": float(np.max(np.abs(tr["r_left"]))),
        "max_abs_r_right": float(np.max(np.abs(tr["r_right"]))),
        "max_abs_U": float(np.max(np.abs(tr["U"]))),
        "time_averaged_kernel_error": float(np.trapezoid(kerr, t) / span) if span > 0 else float(kerr[0]),
    }


def cmd_report(args) -> int:
    _require(args, "trace", "out")
    runs = {str(p): summarize_trace(read_trace_csv(p), args.settle_fraction) for p in args.trace}
    _atomic_write(Path(args.out), (json.dumps({"runs": runs}, indent=2) + "\n").encode())
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "simulate": cmd_simulate,
            "bench": cmd_bench, "report": cmd_report}


def run_command(argv=None) -> int:
    parser, subs = build_parser()
    try:
        args = _apply_config(argv, parser, subs)
    except SystemExit as exc:   # argparse usage errors
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    except FormatError as exc:
        print(f"nobackstep: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, argparse.ArgumentTypeError) as exc:
        print(f"nobackstep: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (DivergenceError, ConvergenceError) as exc:
        print(f"nobackstep: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigurationError as exc:
        print(f"nobackstep: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:   # FormatError included
        print(f"nobackstep: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run_command())
