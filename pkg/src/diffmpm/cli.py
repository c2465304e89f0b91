"""Command line interface: ``diffmpm <command> ...``.

Exit codes: 0 success, 1 usage error, 2 invalid input (schema, CFL, file
format), 3 numerical failure (NaN, particle escape, divergence, failed
gradient check).
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .errors import MPMError, NumericalError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--precision", choices=["f32", "f64"], default=None,
                   help="floating point precision (overrides the file)")
    p.add_argument("--segments", type=int, default=None, help="number of checkpoint segments")
    p.add_argument("--seed", type=int, default=None, help="seed for sampling and MLP initialisation")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="diffmpm", description="Differentiable material point method solver.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sim", parents=[common], help="run a scene and write snapshots")
    p.add_argument("scene")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--stride", type=int, default=None, help="steps between snapshots")
    p.add_argument("--force", action="store_true", help="run even if the Courant number exceeds one")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    p.add_argument("scene")
    p.add_argument("--dirs", type=int, default=20, help="random directions per parameter class")
    p.add_argument("--fd-step", type=float, default=1e-6, help="relative finite-difference step")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--steps", type=int, default=None, help="truncate the trajectory")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("invert", parents=[common], help="run a twin-experiment inversion")
    p.add_argument("problem")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--log", default=None, help="per-epoch CSV log (default: <out>/inversion.csv)")
    p.add_argument("--out", default="out")
    p.add_argument("--observations", default=None,
                   help="read observations from this file instead of generating them")
    p.add_argument("--force", action="store_true")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("front", parents=[common], help="front position of a snapshot")
    p.add_argument("snapshot")
    p.add_argument("--y-max", type=float, required=True)

    p = sub.add_parser("runout", parents=[common], help="runout metrics of a snapshot")
    p.add_argument("snapshot")
    p.add_argument("--l0", type=float, required=True)
    return parser


# ---------------------------------------------------------------------------
# commands

def cmd_sim(args) -> int:
    from .plotting import plot_particles, plot_series
    from .scene_io import front_position, load_scene, write_snapshot
    from .stepper import kinetic_energy, momentum, run

    scene = load_scene(args.scene, force=args.force, precision=args.precision, seed=args.seed)
    cfg = scene.config
    os.makedirs(args.out, exist_ok=True)
    res = run(scene, stride=args.stride)
    rows = []
    for snap in res.snapshots:
        ps = snap.particles
        path = os.path.join(args.out, f"snap_{snap.step:07d}.txt")
        write_snapshot(path, ps, snap.step, snap.t, cfg.dx, cfg.scheme)
        p = momentum(ps)
        rows.append([snap.step, snap.t, kinetic_energy(ps), *p,
                     float(np.max(np.linalg.norm(ps.v, axis=1))),
                     front_position(ps, np.inf), float(np.max(ps.x[:, -1])), float(np.max(ps.eps))])
    ax = "xyz"[: cfg.dim]
    summary = os.path.join(args.out, "summary.csv")
    with open(summary, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "t", "kinetic_energy", *[f"p_{a}" for a in ax], "max_speed",
                    "max_x", "max_height", "max_eps"])
        for r in rows:
            w.writerow([r[0]] + [f"{v:.10g}" for v in r[1:]])
    if not args.no_plots:
        final = res.snapshots[-1]
        plot_particles(os.path.join(args.out, "final_speed.png"), final.particles, "speed",
                       cfg.extents, f"t = {final.t:.4f} s")
        if np.any(final.particles.eps > 0):
            plot_particles(os.path.join(args.out, "final_eps.png"), final.particles, "eps",
                           cfg.extents, f"t = {final.t:.4f} s")
        a = np.array([r[:3] for r in rows], dtype=float)
        plot_series(os.path.join(args.out, "energy.png"), a[:, 1], {"kinetic energy": a[:, 2]},
                    ylabel="E_k [J]")
    print(f"{scene.name}: {scene.n_particles} particles, {cfg.n_steps} steps in "
          f"{res.wall_total:.2f} s; {len(res.snapshots)} snapshots in {args.out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import check_gradients, format_table
    from .scene_io import load_scene

    if args.precision == "f32":
        raise ValidationError("gradient checks require f64 precision")
    scene = load_scene(args.scene, force=args.force, precision="f64", seed=args.seed)
    reports = check_gradients(scene, n_dirs=args.dirs, fd_step=args.fd_step, tol=args.tol,
                              seed=args.seed or 0, segments=args.segments or 4, n_steps=args.steps)
    print(format_table(reports))
    ok = all(r.passed for r in reports)
    print("gradient check", "PASSED" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_invert(args) -> int:
    from .fields import VelocityField
    from .inverse import invert, profile_error
    from .plotting import plot_inversion, plot_profile
    from .scene_io import load_problem, read_observations, write_observations

    setup = load_problem(args.problem, segments=args.segments, seed=args.seed, epochs=args.epochs,
                         force=args.force)
    prob = setup.problem
    if args.precision == "f32":
        raise ValidationError("inversion requires f64 precision")
    os.makedirs(args.out, exist_ok=True)
    if args.observations:
        obs = read_observations(args.observations)
    else:
        obs = setup.make_observations()
        write_observations(os.path.join(args.out, "observations.txt"), obs)
    prob.observations = obs
    prob.log_path = args.log or os.path.join(args.out, "inversion.csv")

    def report(epoch, loss, values):
        shown = np.array2string(values, precision=5) if values.size <= 10 else \
            f"|p| = {np.linalg.norm(values):.5g}"
        print(f"epoch {epoch:4d}  loss {loss:.6e}  {shown}", flush=True)

    res = invert(prob, callback=report)
    truth = setup.truth
    lines = [f"stop_reason {res.stop_reason}", f"epochs {res.epochs}",
             f"final_loss {res.loss_history[-1]:.17g}", f"wall_time {res.wall_time:.2f}"]
    if isinstance(truth, VelocityField):
        field = prob.scene.velocity_fields()[0]
        H0 = getattr(truth, "H0")
        err = profile_error(field, truth, H0, getattr(truth, "y0", 0.0))
        lines.append(f"profile_rel_l2 {err:.6g}")
        truth_vals = None
    else:
        truth_vals = np.ravel(truth)
        for lab, v, t in zip(res.labels, res.values, truth_vals):
            lines.append(f"{lab} {v:.10g} truth {t:.10g} abs_err {abs(v - t):.3g}")
    if res.values.size <= 10:
        lines.append("values " + " ".join(f"{v:.10g}" for v in res.values))
    with open(os.path.join(args.out, "result.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    if not args.no_plots:
        plot_inversion(os.path.join(args.out, "inversion.png"), res.loss_history, res.param_history,
                       res.labels, truth_vals)
        if isinstance(truth, VelocityField):
            y = np.linspace(truth.y0, truth.y0 + truth.H0, 200)
            plot_profile(os.path.join(args.out, "profile.png"), y,
                         {"truth": truth.profile(y), "recovered": field.profile(y)})
    return EXIT_OK


def cmd_front(args) -> int:
    from .scene_io import front_position, read_snapshot

    snap = read_snapshot(args.snapshot)
    x = front_position(snap.particles, args.y_max)
    print(f"step {snap.step} t {snap.t:.10g} front {x:.10g}")
    return EXIT_OK


def cmd_runout(args) -> int:
    from .scene_io import free_surface_height, read_snapshot, runout_metrics

    snap = read_snapshot(args.snapshot)
    L_f, d_n = runout_metrics(snap.particles, args.l0)
    h = free_surface_height(snap.particles)
    print(f"step {snap.step} t {snap.t:.10g} L_f {L_f:.10g} d_n {d_n:.10g} height {h:.10g}")
    return EXIT_OK


_COMMANDS = {"sim": cmd_sim, "grad-check": cmd_grad_check, "invert": cmd_invert,
             "front": cmd_front, "runout": cmd_runout}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.segments is not None and args.segments < 1:
        parser.error("--segments must be at least 1")
    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, MPMError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
