"""Command-line experiment driver.

Subcommands read one TOML config (see :mod:`fpsolve.config`) and write CSV
artifacts into ``--out``. Later stages pick up earlier artifacts from the same
directory when present and regenerate them from the seed otherwise.
"""
import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .config import ConfigError, ExperimentConfig, load_config, slice_label
from .grid import DensityField, Domain, GridSpec
from .gridsolver import (
    EIG_LIMIT, SolverError, assemble_operator, compute_q, discrete_l2_error,
    solve_baseline, solve_constrained, solve_unconstrained, theorem1_ratio,
)
from .models import ModelError, exact_solution, make_builtin, zero_drift_model
from .neural import (
    AdamHyper, TrainConfig, evaluate_on_grid, evaluate_slice, init_params,
    train_double_shuffle,
)
from .sampler import (
    ReferenceSet, SimulationError, TrajectoryConfig, estimate_density_full_grid,
    estimate_density_split, inject_multiplicative_noise, sample_collocation, snap_to_grid,
    substream,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_NOT_CONVERGED = 0, 1, 2, 3

TRAIN_POINTS = "train_points.csv"
REFERENCE_POINTS = "reference_points.csv"
REFERENCE_DENSITIES = "reference_densities.csv"
CHECKPOINT = "checkpoint.csv"


class Context:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        model = make_builtin(cfg.model)
        if cfg.domain.lower is not None:
            if len(cfg.domain.lower) != model.dim:
                raise ConfigError(f"domain has {len(cfg.domain.lower)} axes but {cfg.model} is {model.dim}D")
            model = dataclasses.replace(model, domain=Domain(tuple(cfg.domain.lower), tuple(cfg.domain.upper)))
        self.model = model
        self._exact = None

    @property
    def exact(self):
        if self._exact is None and self.model.has_exact_solution:
            self._exact = exact_solution(self.model)
        return self._exact

    def seed_for(self, name):
        """Derived 63-bit seed for a component that takes an integer seed."""
        return int(substream(self.cfg.seed, name).integers(0, 2**63))

    def trajectory(self, name):
        t = self.cfg.trajectory
        return TrajectoryConfig(t.dt, t.burn_in_time, t.internal_gap, self.seed_for(name))

    def meta(self, **extra):
        return {"model": self.model.name, "seed": self.cfg.seed, **extra}

    def path(self, name):
        return self.out / name


# ------------------------------------------------------------- sample


def _collocation(ctx, count, name):
    return sample_collocation(ctx.model, ctx.model.domain, count, ctx.cfg.sample.alpha, ctx.trajectory(name))


def cmd_sample(ctx):
    s = ctx.cfg.sample
    xs = _collocation(ctx, s.train_count, "train-points")
    ys = _collocation(ctx, s.reference_count, "reference-points")
    fio.write_points(ctx.path(TRAIN_POINTS), xs, meta=ctx.meta(alpha=s.alpha, role="training"))
    fio.write_points(ctx.path(REFERENCE_POINTS), ys, meta=ctx.meta(alpha=s.alpha, role="reference"))
    print(f"training points: {len(xs)}  reference points: {len(ys)}  alpha: {s.alpha}")
    return EXIT_OK


def _load_or_sample(ctx, name, count, stream):
    path = ctx.path(name)
    if path.exists():
        pts, _, _ = fio.read_points(path)
        return pts
    return _collocation(ctx, count, stream)


# ------------------------------------------------------------ density


def _reference_densities(ctx):
    d = ctx.cfg.density
    model = ctx.model
    ys = _load_or_sample(ctx, REFERENCE_POINTS, ctx.cfg.sample.reference_count, "reference-points")
    meta = ctx.meta(sampler=d.sampler)
    if d.sampler in ("exact", "exact+noise"):
        if ctx.exact is None:
            raise ConfigError(f"sampler {d.sampler!r} needs a closed-form density; {model.name} has none")
        vals = ctx.exact.density(ys)
        if d.sampler == "exact+noise":
            vals = inject_multiplicative_noise(vals, d.noise_alpha, substream(ctx.cfg.seed, "noise"))
            meta["noise_alpha"] = d.noise_alpha
        return ys, vals, meta
    grid = GridSpec(model.domain, d.points_per_axis)
    meta.update(points_per_axis=d.points_per_axis)
    if d.sampler == "mc":
        if model.dim > 3:
            raise ConfigError("sampler 'mc' counts on the full grid; use 'mc-split' above 3 dimensions")
        field = estimate_density_full_grid(model, grid, d.steps, ctx.trajectory("density"))
        vals = np.full(len(ys), np.nan)
        inside = model.domain.contains(ys)
        idx = np.clip(grid.node_index(ys[inside]), 0, grid.points_per_axis - 1)
        vals[inside] = field.values[grid.flat_index(idx)]
        meta["steps"] = d.steps
        return ys, vals, meta
    if d.sampler == "mc-split":
        nodes, _ = snap_to_grid(ys[model.domain.contains(ys)], grid)
        vals = estimate_density_split(model, grid, ReferenceSet(nodes), d.steps, ctx.trajectory("density"))
        meta["steps"] = d.steps
        return nodes, vals, meta
    # cg
    from .cgfilter import decompose, cg_reference_densities

    try:
        cond = decompose(model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    half = d.half_width if d.half_width is not None else float(grid.spacing[0])
    est = cg_reference_densities(cond, ReferenceSet(ys), d.horizon, half, ctx.trajectory("density"),
                                 record_every=d.record_every)
    meta.update(horizon=d.horizon, half_width=half, records=est.n_records)
    return ys, est.densities, meta


def cmd_density(ctx):
    ys, vals, meta = _reference_densities(ctx)
    fio.write_points(ctx.path(REFERENCE_DENSITIES), ys, vals, meta=meta, value_name="density")
    missing = int(np.isnan(vals).sum())
    print(f"sampler: {meta['sampler']}  points: {len(ys)}  missing: {missing}")
    if ctx.exact is not None and ctx.cfg.density.sampler != "exact":
        exact = ctx.exact.density(ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(exact > 0, (vals - exact) / exact, np.nan)
        ok = np.isfinite(rel)
        summary = {
            "mean_abs_rel_error": float(np.mean(np.abs(rel[ok]))) if ok.any() else float("nan"),
            "mean_signed_rel_error": float(np.mean(rel[ok])) if ok.any() else float("nan"),
        }
        table = np.column_stack([vals, exact, rel])
        header = [f"x{i + 1}" for i in range(ys.shape[1])] + ["density", "exact", "signed_rel_error"]
        fio.write_curve(ctx.path("density_errors.csv"), np.column_stack([ys, table]), header,
                        meta={**meta, **summary})
        print("mean |rel error|: {mean_abs_rel_error:.4g}  mean signed rel error: {mean_signed_rel_error:+.4g}"
              .format(**summary))
    return EXIT_OK


# --------------------------------------------------------- grid-solve


def cmd_grid_solve(ctx):
    g = ctx.cfg.grid_solve
    model = ctx.model
    if model.dim > 3:
        raise ConfigError("grid-solve builds the full N**n grid; use a model of dimension <= 3")
    grid = GridSpec(model.domain, g.points_per_axis)
    oracle = DensityField(grid, ctx.exact.density(grid.nodes())) if ctx.exact is not None else None
    mc = estimate_density_full_grid(model, grid, g.steps, ctx.trajectory("grid-solve"))
    op = assemble_operator(model, grid)
    proj = solve_constrained(op, mc, oracle)
    pen = solve_unconstrained(op, mc, oracle)
    meta = ctx.meta(steps=g.steps)
    fio.write_field(ctx.path("mc_density.csv"), mc, meta)
    fio.write_field(ctx.path("solution_projection.csv"), proj.solution, meta)
    fio.write_field(ctx.path("solution_penalized.csv"), pen.solution, meta)
    lines = [f"model: {model.name}", f"points_per_axis: {g.points_per_axis}", f"mc_steps: {g.steps}",
             f"residual_norm_projection: {proj.residual_norm!r}",
             f"residual_norm_penalized: {pen.residual_norm!r}"]
    if oracle is not None:
        fields = {"mc": mc, "projection": proj.solution, "penalized": pen.solution}
        if g.baseline:
            fields["baseline"] = solve_baseline(op, oracle)
            fio.write_field(ctx.path("solution_baseline.csv"), fields["baseline"], meta)
        errors = {}
        for name, f in fields.items():
            errors[name] = discrete_l2_error(f, oracle)
            fio.write_field(ctx.path(f"error_{name}.csv"), DensityField(grid, f.values - oracle.values),
                            meta, value_name="error")
            lines.append(f"l2_error_{name}: {errors[name]!r}")
        ordered = errors["mc"] > errors["projection"] and errors["mc"] > errors["penalized"]
        lines.append(f"mc_error_exceeds_both_solvers: {str(ordered).lower()}")
    report = "\n".join(lines) + "\n"
    ctx.path("grid_solve_report.txt").write_text(report)
    print(report, end="")
    return EXIT_OK


# -------------------------------------------------------- train / eval


def _train_config(ctx, n_ref):
    t = ctx.cfg.train
    hyper = AdamHyper(lr=t.lr)
    return TrainConfig(
        batch_train=t.batch_train, batch_ref=min(t.batch_ref or 128, n_ref), max_iters=t.iterations,
        ema_decay=t.ema_decay, threshold_l1=t.threshold_l1, threshold_l2=t.threshold_l2,
        seed=ctx.seed_for("shuffling"), rescale=t.rescale, use_residual=t.use_residual,
        hyper_l1=hyper, hyper_l2=hyper,
    )


def cmd_train(ctx):
    t = ctx.cfg.train
    xs = _load_or_sample(ctx, TRAIN_POINTS, ctx.cfg.sample.train_count, "train-points")
    path = ctx.path(REFERENCE_DENSITIES)
    if path.exists():
        ys, vals, _ = fio.read_points(path)
    else:
        ys, vals, _ = _reference_densities(ctx)
    ref = ReferenceSet(ys, vals).present()
    if len(ref) == 0:
        raise ConfigError("no reference point carries a density")
    sizes = (ctx.model.dim, *t.hidden, 1)
    params = init_params(sizes, ctx.seed_for("init"), gain=t.init_gain)
    result = train_double_shuffle(ctx.model, params, xs, ref, _train_config(ctx, len(ref)))
    meta = ctx.meta(scale=result.scale, converged=str(result.converged).lower(),
                    best_iteration=result.best_iteration)
    fio.write_checkpoint(ctx.path(CHECKPOINT), result.params, meta)
    fio.write_history(ctx.path("loss_history.csv"), result.history, ctx.meta())
    print(f"iterations: {len(result.history)}  converged: {result.converged}  "
          f"best iteration: {result.best_iteration}")
    if not result.converged:
        print("training stopped at the iteration budget before both losses met their thresholds",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _load_checkpoint(ctx):
    path = ctx.cfg.eval.checkpoint or ctx.path(CHECKPOINT)
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found; run 'train' first or set eval.checkpoint")
    params, meta = fio.read_checkpoint(path)
    if params.input_dim != ctx.model.dim:
        raise ConfigError(f"checkpoint takes {params.input_dim} inputs, model {ctx.model.name} has {ctx.model.dim}")
    return params, float(meta.get("scale", 1.0))


def cmd_eval(ctx):
    params, scale = _load_checkpoint(ctx)
    model = ctx.model
    e = ctx.cfg.eval
    lines = [f"model: {model.name}", f"points_per_axis: {e.points_per_axis}"]
    if model.dim <= 2:
        grid = GridSpec(model.domain, e.points_per_axis)
        field = evaluate_on_grid(params, grid, scale)
        fio.write_field(ctx.path("eval_grid.csv"), field, ctx.meta(scale=scale), value_name="density")
        if ctx.exact is not None:
            oracle = DensityField(grid, ctx.exact.density(grid.nodes()))
            fio.write_field(ctx.path("eval_error.csv"), DensityField(grid, field.values - oracle.values),
                            ctx.meta(), value_name="error")
            lines.append(f"l2_error: {discrete_l2_error(field, oracle)!r}")
    else:
        lo, hi = model.domain.lower, model.domain.upper
        plane = GridSpec(Domain(lo[:2], hi[:2]), e.points_per_axis)
        for fixed in e.slices:
            if len(fixed) != model.dim - 2:
                raise ConfigError(f"eval.slices entries need {model.dim - 2} fixed values, got {len(fixed)}")
            held = {axis: float(v) for axis, v in zip(range(2, model.dim), fixed)}
            field = evaluate_slice(params, plane, held, (0, 1), scale)
            label = slice_label(fixed)
            fio.write_field(ctx.path(f"eval_slice_{label}.csv"), field,
                            ctx.meta(scale=scale, fixed=list(fixed)), value_name="density")
            if ctx.exact is not None:
                pts = np.empty((plane.size, model.dim))
                pts[:, :2] = plane.nodes()
                for axis, v in held.items():
                    pts[:, axis] = v
                oracle = DensityField(plane, ctx.exact.density(pts))
                lines.append(f"l2_error_slice_{label}: {discrete_l2_error(field, oracle)!r}")
    report = "\n".join(lines) + "\n"
    ctx.path("eval_report.txt").write_text(report)
    print(report, end="")
    return EXIT_OK


# ------------------------------------------------------------ qh / thm1


def _diagnostic_grids(section, guard):
    grids = []
    for npts in sorted(set(section.points)):
        if guard and npts**section.dim > EIG_LIMIT:
            raise ConfigError(f"{npts}**{section.dim} nodes exceeds the eigen-decomposition limit {EIG_LIMIT}")
        grids.append(GridSpec(Domain.cube(0.0, 1.0, section.dim), npts))
    return grids  # increasing N, i.e. decreasing h


def cmd_qh(ctx):
    q = ctx.cfg.qh
    model = zero_drift_model(q.dim, q.sigma)
    rows = [(float(g.spacing[0]), compute_q(model, g)) for g in _diagnostic_grids(q, guard=True)]
    fio.write_curve(ctx.path("qh.csv"), rows, ["h", "Q"], meta={"dim": q.dim, "sigma": q.sigma})
    for h, val in rows:
        print(f"h={h:.6g}  Q={val:.6g}")
    return EXIT_OK


def cmd_thm1(ctx):
    t = ctx.cfg.thm1
    model = zero_drift_model(t.dim, t.sigma)

    def boundary(grid):
        # affine data is harmonic, so the baseline is well defined for pure diffusion
        return 1.0 + grid.nodes().sum(axis=1)

    rows = theorem1_ratio(model, _diagnostic_grids(t, guard=False), t.noise_std, t.trials,
                          substream(ctx.cfg.seed, "thm1-noise"), boundary)
    fio.write_curve(ctx.path("thm1.csv"), rows, ["h", "ratio"],
                    meta={"dim": t.dim, "sigma": t.sigma, "noise_std": t.noise_std, "trials": t.trials,
                          "seed": ctx.cfg.seed})
    for h, val in rows:
        print(f"h={h:.6g}  E|z|^2/E|e|^2={val:.6g}")
    return EXIT_OK


COMMANDS = {
    "sample": cmd_sample,
    "density": cmd_density,
    "grid-solve": cmd_grid_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "qh": cmd_qh,
    "thm1": cmd_thm1,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fpsolve", description="Stationary Fokker-Planck solvers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="root seed override (0 <= seed < 2**64)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        ctx = Context(cfg, args.out)
        (ctx.out / "config.resolved.toml").write_text(cfg.to_toml())
        return COMMANDS[args.command](ctx)
    except (SimulationError, SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ModelError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RuntimeError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
