"""Command-line interface: simulate, smooth, compare, infer, plot.

Exit codes: 0 success, 2 configuration or usage error, 3 solver
non-convergence (partial outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .csvio import format_value, read_csv, write_csv
from .em import EmContext, ParametricFamily, inference_domain, run_em
from .exceptions import ConfigError, DiffusmoothError
from .models import MeasurementSet, euler_maruyama, generate_measurements
from .pde import (Grid1D, grid_moments, smoothing_solution, solve_backward,
                  solve_forward)
from .pipeline import kl_curves, pde_smooth, variational_smooth

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOCONV = 3


def _worker_count() -> int:
    raw = os.environ.get("DIFFUSMOOTH_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _truth_path(cfg: ExperimentConfig):
    model = cfg.model()
    law = cfg.initial_law()
    T = cfg.horizon
    return euler_maruyama(model, law, T / 2000, T, cfg.seed)


def _measurements(cfg: ExperimentConfig, out_dir: Path | None) -> MeasurementSet:
    """Fixed config values, else a previously simulated file, else an error."""
    times = cfg.measurement_times()
    fixed = cfg.fixed_values()
    if fixed is not None:
        return MeasurementSet(tuple(times), tuple(fixed), cfg.noise_std())
    if out_dir is not None:
        f = out_dir / "measurements.csv"
        if f.exists():
            _, rows = read_csv(f)
            return MeasurementSet(tuple(r[0] for r in rows),
                                  tuple(r[1] for r in rows), cfg.noise_std())
    raise ConfigError(
        "no measurements available: provide measurements.values in the config "
        "or run the 'simulate' command first")


def cmd_simulate(cfg: ExperimentConfig, out: Path, make_svg: bool) -> int:
    path = _truth_path(cfg)
    write_csv(out / "path.csv", ["t", "x"], zip(path.times, path.values))
    fixed = cfg.fixed_values()
    times = cfg.measurement_times()
    if fixed is not None:
        meas = MeasurementSet(tuple(times), tuple(fixed), cfg.noise_std())
    else:
        meas = generate_measurements(path, times, cfg.noise_std(), cfg.seed + 1)
    write_csv(out / "measurements.csv", ["t", "y"], zip(meas.times, meas.values))
    if make_svg:
        from .svgplot import line_plot
        line_plot(out / "path.svg",
                  [(path.times, path.values, "state"),
                   (meas.times, meas.values, "data")],
                  "Hidden path and observations", "t", "x",
                  markers_for=("data",))
    return EXIT_OK


def _write_density_csvs(out: Path, pde, times) -> None:
    ddir = out / "densities"
    ddir.mkdir(parents=True, exist_ok=True)
    x = pde.forward.grid.nodes
    index_rows = []
    for i, t in enumerate(times):
        p = pde.forward.at(float(t)).values
        w = pde.backward.at(float(t)).values
        ps = pde.smoothing.at(float(t)).values
        write_csv(ddir / f"density_{i:03d}.csv", ["x", "p", "w", "ps"],
                  zip(x, p, w, ps))
        index_rows.append((i, t))
    write_csv(ddir / "index.csv", ["idx", "t"], index_rows)


def cmd_smooth(cfg: ExperimentConfig, out: Path, method: str,
               make_svg: bool) -> int:
    meas = _measurements(cfg, out)
    model, law, T = cfg.model(), cfg.initial_law(), cfg.horizon
    grid = cfg.grid(meas)
    out_times = cfg.output_times()
    code = EXIT_OK
    if method == "pde":
        pde = pde_smooth(model, law, meas, grid, T, output_times=out_times)
        mom = [(t, *grid_moments(pde.smoothing.at(float(t)))) for t in out_times]
        write_csv(out / "moments_pde.csv", ["t", "m", "S"], mom)
        _write_density_csvs(out, pde, out_times)
        runtimes = {"forward_pde_s": pde.forward.runtime_s,
                    "backward_pde_s": pde.backward.runtime_s}
    else:
        var = variational_smooth(model, law, meas, grid, T, cfg.shoot_options())
        traj = var.trajectory
        write_csv(out / "trajectory.csv",
                  ["t", "m", "S", "C", "D", "A", "B",
                   "rho_m", "rho_S", "rho_C", "rho_D"],
                  ((traj.times[i], *traj.z[i], *traj.v[i], *traj.rho[i])
                   for i in range(len(traj.times))))
        write_csv(out / "moments_var.csv", ["t", "m", "S"],
                  ((t, *traj.moments_at(float(t))) for t in out_times))
        diag = {"converged": bool(traj.converged),
                "iterations": int(traj.iterations),
                "residual_norm": traj.residual_norm,
                "newton_residuals": list(traj.newton_residuals),
                "cost": traj.cost}
        (out / "solver_diagnostics.json").write_text(
            json.dumps(diag, indent=2) + "\n", encoding="utf-8")
        runtimes = {"backward_pde_s": var.backward_runtime_s,
                    "bvp_s": var.bvp_runtime_s}
        if not traj.converged:
            code = EXIT_NOCONV
    (out / "runtime.json").write_text(
        json.dumps(runtimes, indent=2) + "\n", encoding="utf-8")
    if make_svg:
        from .svgplot import line_plot
        hdr, rows = read_csv(out / ("moments_pde.csv" if method == "pde"
                                    else "moments_var.csv"))
        arr = np.asarray(rows)
        line_plot(out / f"moments_{method}.svg",
                  [(arr[:, 0], arr[:, 1], "mean"),
                   (arr[:, 0], np.sqrt(arr[:, 2]), "std")],
                  f"Smoothing moments ({method})", "t", "value")
    return code


def cmd_compare(cfg: ExperimentConfig, out: Path, make_svg: bool) -> int:
    meas = _measurements(cfg, out)
    model, law, T = cfg.model(), cfg.initial_law(), cfg.horizon
    grid = cfg.grid(meas)
    out_times = cfg.output_times()

    t0 = time.perf_counter()
    fwd = None
    bwd = None
    if _worker_count() > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            f_fwd = pool.submit(solve_forward, model, law, meas, grid, T,
                                out_times)
            f_bwd = pool.submit(solve_backward, model, meas, grid, T, out_times)
            fwd, bwd = f_fwd.result(), f_bwd.result()
    else:
        fwd = solve_forward(model, law, meas, grid, T, output_times=out_times)
        bwd = solve_backward(model, meas, grid, T, output_times=out_times)
    sm = smoothing_solution(fwd, bwd)

    var = variational_smooth(model, law, meas, grid, T, cfg.shoot_options(),
                             backward=bwd)
    traj = var.trajectory

    write_csv(out / "moments_pde.csv", ["t", "m", "S"],
              ((t, *grid_moments(sm.at(float(t)))) for t in out_times))
    write_csv(out / "moments_var.csv", ["t", "m", "S"],
              ((t, *traj.moments_at(float(t))) for t in out_times))

    from .pipeline import PdeSmoothing
    ts, kl_pg, kl_gp = kl_curves(PdeSmoothing(fwd, bwd, sm), traj, out_times)
    write_csv(out / "kl.csv", ["t", "kl_pde_gauss", "kl_gauss_pde"],
              zip(ts, kl_pg, kl_gp))

    runtimes = {
        "forward_pde_s": fwd.runtime_s,
        "backward_pde_s": bwd.runtime_s,
        "bvp_s": var.bvp_runtime_s,
        "pde_approach_s": fwd.runtime_s + bwd.runtime_s,
        "variational_approach_s": bwd.runtime_s + var.bvp_runtime_s,
        "wall_s": time.perf_counter() - t0,
    }
    (out / "runtime.json").write_text(json.dumps(runtimes, indent=2) + "\n",
                                      encoding="utf-8")
    if make_svg:
        from .svgplot import line_plot
        line_plot(out / "kl.svg", [(ts, kl_pg, "KL(pde||gauss)"),
                                   (ts, kl_gp, "KL(gauss||pde)")],
                  "Relative entropy between smoothers", "t", "KL")
    return EXIT_OK if traj.converged else EXIT_NOCONV


def cmd_infer(cfg: ExperimentConfig, out: Path, make_svg: bool) -> int:
    meas = _measurements(cfg, out)
    law, T = cfg.initial_law(), cfg.horizon
    m = cfg.raw["model"]
    if m["kind"] == "gbm":
        family = ParametricFamily.gbm(m["lam"])
    elif m["kind"] == "cir":
        family = ParametricFamily.cir(m["b"], m["lam"])
    elif m["kind"] == "ou":
        family = ParametricFamily.ou(m["sigma_c"])
    else:
        raise ConfigError("parameter inference supports gbm, cir, and ou only")
    kappa0, max_iters, tol = cfg.em_settings()
    g = cfg.raw.get("grid", {})
    lo, hi = inference_domain(family, max(kappa0, 1.0), law, meas, T)
    if g.get("x_min") is not None:
        lo = float(g["x_min"])
    if g.get("x_max") is not None:
        hi = float(g["x_max"])
    grid = Grid1D(lo, hi, int(g.get("nx", 2000)),
                  T / 2000 if g.get("dt") is None else float(g["dt"]))
    ctx = EmContext(family, law, meas, T, grid, cfg.shoot_options())
    run = run_em(ctx, kappa0, max_iters=max_iters, tol=tol)
    write_csv(out / "em.csv", ["iter", "kappa", "F", "converged"],
              ((i, it.kappa, it.apparent_information, int(it.converged))
               for i, it in enumerate(run.iterates)))
    write_csv(out / "em_breakdown.csv", ["iter", "kappa", "F", "kl_part"],
              ((i, it.kappa, it.apparent_information, it.kl_part)
               for i, it in enumerate(run.iterates)))
    print(f"kappa_hat = {format_value(run.kappa_hat)}")
    if make_svg:
        from .svgplot import line_plot
        ks = run.kappas
        line_plot(out / "em.svg",
                  [(np.arange(ks.size), ks, "kappa")],
                  "Parameter iterates", "iteration", "kappa",
                  markers_for=("kappa",))
    return EXIT_OK if not run.partial else EXIT_NOCONV


def cmd_plot(out: Path) -> int:
    from .svgplot import heatmap, line_plot
    made = 0
    mp, mv = out / "moments_pde.csv", out / "moments_var.csv"
    if mp.exists() and mv.exists():
        _, rp = read_csv(mp)
        _, rv = read_csv(mv)
        ap, av = np.asarray(rp), np.asarray(rv)
        line_plot(out / "moments.svg",
                  [(ap[:, 0], ap[:, 1], "mean (grid)"),
                   (av[:, 0], av[:, 1], "mean (variational)")],
                  "Smoothing mean", "t", "m")
        line_plot(out / "variance.svg",
                  [(ap[:, 0], ap[:, 2], "S (grid)"),
                   (av[:, 0], av[:, 2], "S (variational)")],
                  "Smoothing variance", "t", "S")
        made += 2
    kl = out / "kl.csv"
    if kl.exists():
        _, rows = read_csv(kl)
        a = np.asarray(rows)
        line_plot(out / "kl.svg", [(a[:, 0], a[:, 1], "KL(pde||gauss)"),
                                   (a[:, 0], a[:, 2], "KL(gauss||pde)")],
                  "Relative entropy between smoothers", "t", "KL")
        made += 1
    em = out / "em.csv"
    if em.exists():
        _, rows = read_csv(em)
        a = np.asarray(rows)
        line_plot(out / "em.svg", [(a[:, 0], a[:, 1], "kappa")],
                  "Parameter iterates", "iteration", "kappa",
                  markers_for=("kappa",))
        made += 1
    ddir = out / "densities"
    if (ddir / "index.csv").exists():
        _, idx = read_csv(ddir / "index.csv")
        times = [r[1] for r in idx]
        first = read_csv(ddir / "density_000.csv")
        x = np.asarray([r[0] for r in first[1]])
        mat = np.empty((len(times), x.size))
        for i in range(len(times)):
            _, rows = read_csv(ddir / f"density_{i:03d}.csv")
            mat[i] = [r[3] for r in rows]
        heatmap(out / "smoothing_density.svg", x, np.asarray(times), mat,
                "Smoothing density")
        made += 1
    if made == 0:
        raise ConfigError(f"no plottable CSV files found in {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffusmooth",
        description="Variational and grid-based smoothing of hidden diffusions")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config path")
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--svg", action="store_true", help="emit SVG figures")

    common(sub.add_parser("simulate", help="generate a truth path and data"))
    p_smooth = sub.add_parser("smooth", help="run one smoother")
    p_smooth.add_argument("--method", choices=["pde", "variational"],
                          required=True)
    common(p_smooth)
    common(sub.add_parser("compare", help="run both smoothers and compare"))
    common(sub.add_parser("infer", help="EM parameter inference"))
    common(sub.add_parser("plot", help="render SVGs from emitted CSVs"),
           needs_config=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        if args.command == "plot":
            return cmd_plot(out)
        cfg = ExperimentConfig.from_file(args.config)
        if args.seed is not None:
            raw = dict(cfg.raw)
            raw["seed"] = args.seed
            cfg = ExperimentConfig.from_dict(raw)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.svg)
        if args.command == "smooth":
            return cmd_smooth(cfg, out, args.method, args.svg)
        if args.command == "compare":
            return cmd_compare(cfg, out, args.svg)
        if args.command == "infer":
            return cmd_infer(cfg, out, args.svg)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DiffusmoothError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
