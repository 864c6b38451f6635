"""Command-line front end: ``eqrestore <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric divergence
(or a failed oracle check).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io as eio
from .denoiser import CountingDenoiser, load_denoiser
from .errors import (EqRestoreError, FormatError, InvalidArgumentError, NumericDivergenceError,
                     StaleStateError, SingularJacobianError)
from .inversion import InversionConfig, LossSpec, invert_init, loss_eval
from .metrics import evaluate
from .operators import TASKS, build_task_operator
from .sampler import DegradedObservation, SamplerContext, make_state, sequential_sample
from .schedule import build_schedule, select_timesteps
from .solver import SolverConfig, root_solve, write_history_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def default_workers():
    env = os.environ.get("EQRESTORE_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


# --------------------------------------------------------------------------- helpers

def read_tensor(path):
    """``.dqt`` files are read bit-exactly; anything else as PNM."""
    path = Path(path)
    if path.suffix == ".dqt":
        return eio.read_dqt1(path)
    return eio.read_pnm(path)


def write_tensor(path, x):
    path = Path(path)
    if path.suffix == ".dqt":
        eio.write_dqt1(path, x)
    else:
        eio.write_pnm(path, x)


def clean_shape(task, obs_shape):
    """Shape of the clean image given the image rendering of an observation."""
    c, h, w = obs_shape
    if task in ("sr2", "sr4"):
        f = int(task[2:])
        return (c, h * f, w * f)
    if task in ("color", "composite"):
        if c != 1:
            raise InvalidArgumentError(f"task {task!r} expects a single-channel input, got {c} channels")
        return (3, h, w)
    return (c, h, w)


def load_problem(args):
    img = read_tensor(args.input)
    if img.ndim != 3:
        raise FormatError(f"input must be a (C, H, W) image, got shape {img.shape}")
    if args.task in ("inpaint", "composite") and not args.mask:
        raise InvalidArgumentError(f"task {args.task!r} requires --mask")
    mask = eio.read_mask(args.mask) if args.mask else None
    shape = clean_shape(args.task, img.shape)
    op = build_task_operator(args.task, shape, mask=mask)
    obs = DegradedObservation(op.observation_from_image(img), op)
    return obs, shape


def build_context(args, obs, denoiser):
    sched = build_schedule(args.base_len)
    plan = select_timesteps(sched, args.timesteps)
    return SamplerContext.build(sched, plan, obs, denoiser, eta=args.eta, workers=args.workers,
                                variant=args.variant)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def _clean_floats(o):
    if isinstance(o, float) and not math.isfinite(o):
        return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
    if isinstance(o, dict):
        return {k: _clean_floats(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean_floats(v) for v in o]
    return o


def write_report(path, report):
    text = json.dumps(_clean_floats(report), indent=2, sort_keys=True, default=_json_default)
    if path:
        Path(path).write_text(text + "\n")
    return text


def base_config(args, obs, denoiser):
    return {
        "task": args.task, "timesteps": args.timesteps, "eta": args.eta, "seed": args.seed,
        "base_len": args.base_len, "coefficient_variant": args.variant, "noise_ref": "previous",
        "operator": obs.operator.descriptor(), "denoiser": denoiser.descriptor(),
        "input": str(args.input), "mask": args.mask and str(args.mask),
    }


def metrics_for(x0, obs, args, runtime_ms, nfe):
    ref = read_tensor(args.reference) if getattr(args, "reference", None) else None
    return evaluate(x0, obs, reference=ref, runtime_ms=runtime_ms, nfe_count=nfe).to_dict()


def sidecar(path, suffix):
    path = Path(path)
    return path.with_name(path.stem + suffix)


# --------------------------------------------------------------------------- commands

def cmd_restore(args):
    obs, shape = load_problem(args)
    den = CountingDenoiser(load_denoiser(args.denoiser))
    ctx = build_context(args, obs, den)
    cfg = SolverConfig(K=args.iters, m=args.m, tol=args.tol, ridge=args.ridge, mixing=args.mixing,
                       method=args.solver)
    init = read_tensor(args.warm_start) if args.warm_start else None
    t0 = time.perf_counter()
    try:
        res = root_solve(ctx, cfg, seed=args.seed, init=init)
    finally:
        ctx.close()
    wall = 1e3 * (time.perf_counter() - t0)
    write_tensor(args.out, res.x0)
    csv_path = sidecar(args.report or args.out, ".residuals.csv")
    write_history_csv(csv_path, res.history)
    summary = res.summary()
    summary["nfe_counted"] = den.eps_calls
    config = base_config(args, obs, den)
    config.update(solver=args.solver, iters=args.iters, m=args.m, tol=args.tol, ridge=args.ridge,
                  mixing=args.mixing, warm_start=args.warm_start and str(args.warm_start))
    report = {
        "command": ["eqrestore"] + list(args.argv),
        "config": config,
        "metrics": metrics_for(res.x0, obs, args, 0.0, den.eps_calls),
        "convergence": summary,
        "rng": eio.RNG_NAME,
        "outputs": {"image": str(args.out), "residual_csv": str(csv_path)},
        "runtime": {"wall_ms": wall, "workers": args.workers},
    }
    report["metrics"]["runtime_ms"] = wall
    print(write_report(args.report, report))
    return EXIT_OK


def cmd_sample_seq(args):
    obs, shape = load_problem(args)
    den = CountingDenoiser(load_denoiser(args.denoiser))
    ctx = build_context(args, obs, den)
    t0 = time.perf_counter()
    x0, traj = sequential_sample(ctx, make_state(shape, ctx.T, args.seed))
    wall = 1e3 * (time.perf_counter() - t0)
    write_tensor(args.out, x0)
    if args.trajectory:
        eio.write_dqt1(args.trajectory, traj)
    report = {
        "command": ["eqrestore"] + list(args.argv),
        "config": base_config(args, obs, den),
        "metrics": metrics_for(x0, obs, args, wall, den.eps_calls),
        "convergence": {"method": "sequential", "nfe": den.eps_calls, "iterations": ctx.T},
        "rng": eio.RNG_NAME,
        "outputs": {"image": str(args.out), "trajectory": args.trajectory and str(args.trajectory)},
        "runtime": {"wall_ms": wall, "workers": args.workers},
    }
    print(write_report(args.report, report))
    return EXIT_OK


def cmd_invert_init(args):
    obs, shape = load_problem(args)
    den = CountingDenoiser(load_denoiser(args.denoiser))
    ctx = build_context(args, obs, den)
    if args.loss == "reference":
        if not args.ref:
            raise InvalidArgumentError("--loss reference requires --ref")
        spec = LossSpec("reference", ref=read_tensor(args.ref))
    else:
        spec = LossSpec("consistency")
    # the gradients need a solved state; Picard with T + 1 iterations is exact on the chain
    if args.iters is None:
        args.iters = args.timesteps + 1 if args.solver == "picard" else 15
    cfg = SolverConfig(K=args.iters, m=args.m, tol=args.tol, ridge=args.ridge, mixing=args.mixing,
                       method=args.solver)
    inv_cfg = InversionConfig(rate=args.rate, steps=args.steps,
                              gradient_mode="exact_ift" if args.grad == "exact" else "one_step",
                              backtracking=not args.no_backtrack, ascend=args.ascend)
    t0 = time.perf_counter()
    try:
        result = invert_init(ctx, cfg, inv_cfg, spec, seed=args.seed)
    finally:
        ctx.close()
    wall = 1e3 * (time.perf_counter() - t0)
    write_tensor(args.out, result.x0)
    if args.xt_out:
        eio.write_dqt1(args.xt_out, result.x_T)
    csv_path = sidecar(args.report or args.out, ".losses.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "rate", "trials", "accepted"])
        w.writerow([0, repr(result.losses[0]), "", "", ""])
        for entry in result.steps:
            w.writerow([entry["step"], repr(entry["loss"]), repr(entry["rate"]), entry["trials"],
                        int(entry["accepted"])])
    config = base_config(args, obs, den)
    config.update(solver=args.solver, iters=args.iters, m=args.m, tol=args.tol, loss=args.loss,
                  ref=args.ref and str(args.ref), rate=args.rate, steps=args.steps, grad=args.grad,
                  ascend=args.ascend, backtracking=not args.no_backtrack)
    report = {
        "command": ["eqrestore"] + list(args.argv),
        "config": config,
        "metrics": metrics_for(result.x0, obs, args, wall, den.eps_calls),
        "convergence": dict(result.solve.summary(), solves=result.solves, nfe_total=den.eps_calls,
                            vjp_total=den.vjp_calls),
        "losses": result.losses,
        "rng": eio.RNG_NAME,
        "outputs": {"image": str(args.out), "loss_csv": str(csv_path)},
        "runtime": {"wall_ms": wall, "workers": args.workers},
    }
    print(write_report(args.report, report))
    return EXIT_OK


def cmd_oracle(args):
    from . import oracles

    if args.check == "prop1":
        out = oracles.check_prop1(args.T, args.dim, args.seed)
        ok = out["selected_variant"] is not None
        worst = out["deviation"].get(out["selected_variant"] or "alpha")
    elif args.check == "fixed-point":
        out = oracles.check_fixed_point(args.T, args.seed)
        worst = max(out.values())
        ok = worst <= 1e-8
    elif args.check == "mp":
        out = oracles.check_mp(probes=32, seed=args.seed)
        worst = max(max(v.values()) for v in out.values())
        ok = worst <= 1e-10
    else:
        out = oracles.check_gradient(args.T, args.dim, args.seed)
        worst = out["max_relative_error"]
        ok = worst <= 1e-4
    print(json.dumps({"check": args.check, "max_deviation": worst, "ok": ok, "detail": out},
                     indent=2, default=_json_default))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bench(args):
    from .denoiser import GmmDenoiser, random_gmm
    from .operators import stripe_mask

    shape = (3, args.size, args.size)
    gmm = random_gmm(shape, 3, args.seed)
    x = gmm.sample(np.random.default_rng(args.seed))[0]
    sched = build_schedule(args.base_len)
    plan = select_timesteps(sched, args.timesteps)
    rows = []
    for task in args.tasks:
        op = build_task_operator(task, shape, mask=stripe_mask(args.size, args.size))
        obs = DegradedObservation.from_clean(x, op)
        base = None
        for workers in args.workers_list:
            den = CountingDenoiser(GmmDenoiser(gmm))
            ctx = SamplerContext.build(sched, plan, obs, den, eta=args.eta, workers=workers)
            t0 = time.perf_counter()
            sequential_sample(ctx, make_state(shape, ctx.T, args.seed))
            seq_ms = 1e3 * (time.perf_counter() - t0)
            seq_nfe = den.eps_calls
            for method in ("anderson", "picard"):
                den.eps_calls = 0
                cfg = SolverConfig(K=args.iters, m=args.m, tol=args.tol, method=method)
                t0 = time.perf_counter()
                res = root_solve(ctx, cfg, seed=args.seed)
                ms = 1e3 * (time.perf_counter() - t0)
                if base is None:
                    base = {}
                base.setdefault(method, ms)
                rows.append({"task": task, "workers": workers, "method": method,
                             "sequential_ms": seq_ms, "sequential_nfe": seq_nfe,
                             "parallel_ms": ms, "nfe_cached": res.nfe, "nfe_naive": res.naive_nfe,
                             "nfe_counted": den.eps_calls, "iterations": res.solve.iterations,
                             "converged": res.solve.converged, "final_residual": res.solve.residual,
                             "speedup_vs_1_worker": base[method] / ms if ms > 0 else None})
            ctx.close()
    report = {"command": ["eqrestore"] + list(args.argv), "rng": eio.RNG_NAME, "rows": rows,
              "config": {"timesteps": args.timesteps, "iters": args.iters, "m": args.m, "tol": args.tol,
                         "eta": args.eta, "seed": args.seed, "size": args.size}}
    print(write_report(args.report, report))
    return EXIT_OK


def cmd_gen(args):
    from .operators import stripe_mask

    gmm = eio.read_gmm_spec(args.gmm)
    if gmm.shape is None or len(gmm.shape) != 3:
        raise FormatError("GMM spec needs a 3-D 'shape' field to generate images")
    shape = gmm.shape
    mask = eio.read_mask(args.mask) if args.mask else stripe_mask(shape[1], shape[2])
    op = build_task_operator(args.degrade, shape, mask=mask)
    rng = eio.seeded_rng(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.degrade in ("inpaint", "composite"):
        eio.write_mask(out / "mask.pgm", mask)
    entries = []
    clean = gmm.sample(rng, args.count)
    for i in range(args.count):
        obs = DegradedObservation.from_clean(clean[i], op, sigma=args.noise, rng=rng)
        img = op.observation_to_image(obs.y)
        names = {"clean": f"clean_{i:04d}.dqt", "observation": f"obs_{i:04d}.dqt",
                 "clean_pnm": f"clean_{i:04d}.pnm", "observation_pnm": f"obs_{i:04d}.pnm"}
        eio.write_dqt1(out / names["clean"], clean[i])
        eio.write_dqt1(out / names["observation"], img)
        eio.write_pnm(out / names["clean_pnm"], clean[i])
        eio.write_pnm(out / names["observation_pnm"], img)
        entries.append(dict(index=i, **names))
    manifest = {"command": ["eqrestore"] + list(args.argv), "gmm": str(args.gmm), "count": args.count,
                "degrade": args.degrade, "noise": args.noise, "seed": args.seed, "rng": eio.RNG_NAME,
                "operator": op.descriptor(), "mask": "mask.pgm" if args.degrade in ("inpaint", "composite") else None,
                "entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(json.dumps({"out_dir": str(out), "count": args.count}))
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _problem_args(p, solver=True):
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--input", required=True, help="observation image (.pnm/.pgm/.ppm or .dqt)")
    p.add_argument("--mask", help="binary PGM mask (inpaint, composite)")
    p.add_argument("--denoiser", required=True, help="GMM JSON spec, MLP model directory, or 'zero'")
    p.add_argument("--timesteps", type=int, default=20)
    p.add_argument("--eta", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-len", type=int, default=1000)
    p.add_argument("--variant", choices=("alpha", "alpha_bar"), default="alpha")
    p.add_argument("--workers", type=int, default=default_workers())
    p.add_argument("--reference", help="clean image for PSNR/SSIM")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    if solver:
        p.add_argument("--iters", type=int, default=15)
        p.add_argument("--solver", choices=("anderson", "picard"), default="anderson")
        p.add_argument("--m", type=int, default=5)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--ridge", type=float, default=1e-8)
        p.add_argument("--mixing", type=float, default=1.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="eqrestore",
                                     description="Diffusion restoration solved as one fixed-point system.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("restore", help="parallel fixed-point restoration")
    _problem_args(p)
    p.add_argument("--warm-start", help="image or stacked state to initialise every row")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("sample-seq", help="sequential baseline sampler")
    _problem_args(p, solver=False)
    p.add_argument("--trajectory", help="write the full trajectory as DQT1")
    p.set_defaults(func=cmd_sample_seq)

    p = sub.add_parser("invert-init", help="optimise the initial noise")
    _problem_args(p)
    p.add_argument("--loss", choices=("consistency", "reference"), default="consistency")
    p.add_argument("--ref", help="reference image for --loss reference")
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--grad", choices=("one-step", "exact"), default="one-step")
    p.add_argument("--ascend", action="store_true", help="add the gradient instead of subtracting it")
    p.add_argument("--no-backtrack", action="store_true")
    p.add_argument("--xt-out", help="write the optimised x_T as DQT1")
    p.set_defaults(solver="picard", iters=None)
    p.set_defaults(func=cmd_invert_init)

    p = sub.add_parser("oracle", help="run an independent numerical check")
    p.add_argument("--check", required=True, choices=("prop1", "fixed-point", "mp", "gradient"))
    p.add_argument("--T", type=int, default=6)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="sequential vs parallel timing and NFE accounting")
    p.add_argument("--tasks", nargs="+", default=["sr4", "deblur-gauss", "color", "inpaint"], choices=TASKS)
    p.add_argument("--timesteps", type=int, default=20)
    p.add_argument("--iters", type=int, default=15)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--eta", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--base-len", type=int, default=1000)
    p.add_argument("--workers-list", type=int, nargs="+", default=[1, 4])
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen", help="generate a seeded test corpus from a GMM spec")
    p.add_argument("--gmm", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--degrade", required=True, choices=TASKS)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"eqrestore: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericDivergenceError, SingularJacobianError, StaleStateError) as exc:
        print(f"eqrestore: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgumentError, EqRestoreError) as exc:
        print(f"eqrestore: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
