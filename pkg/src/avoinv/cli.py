"""``avoinv`` command line.

Exit codes: 0 success, 2 configuration, 3 surrogate fitting, 4 sampling, 5 I/O.

Seeds all derive from ``run.seed`` (overridable with ``--seed``):
problem draw ``seed``, training set ``seed + 1``, test set ``seed + 2``;
chain ``seed + chain_index`` with tuning on ``chain seed + 10007``;
compare-proposals gives kernel ``k`` the seed ``seed + k``.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .diagnostics import (
    acf,
    mean_ess,
    mse,
    posterior_maps,
    sample_correlation,
    ternary_extract,
    write_map_csv,
    write_pgm,
    write_ternary_csv,
)
from .fieldio import read_fields, write_field_csv, write_fields
from .grf_fft import GridSpec
from .mars import GradientSurrogate, MARSRegressor, MarsModel, fit_gradient_models
from .mcmc import (
    ChainConfig,
    FiniteDifferenceJacobian,
    Posterior,
    ProposalKind,
    ProposalSpec,
    SurrogateJacobian,
    compare_proposals,
    load_chain,
    run_chain,
    save_chain,
    tune_step_size,
)
from .model import (
    FIELD_NAMES,
    QUANTITIES,
    AVOObservation,
    DepthField,
    LatentState,
    SurrogateForward,
    SyntheticForward,
    adjusted_noise,
    make_synthetic_problem,
    sample_training_set,
)
from .npkr import NadarayaWatsonRegressor, load_npkr, save_npkr

log = logging.getLogger("avoinv")

EXIT_OK, EXIT_CONFIG, EXIT_FIT, EXIT_SAMPLING, EXIT_IO = 0, 2, 3, 4, 5
TUNING_SEED_OFFSET = 10007
TRAIN_COLUMNS = ("x_g", "x_o", "x_clay", "depth_norm", "r0", "g")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def _stage(code: int, module: str):
    """Turn numerical failures inside a block into a ``CliError`` naming the module."""
    try:
        yield
    except (ConfigError, CliError, OSError):
        raise
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, KeyError, IndexError) as exc:
        raise CliError(code, f"[{module}] {exc}") from exc


class Outputs:
    """Output directory bookkeeping: resolved config plus a hashed manifest."""

    def __init__(self, out_dir, cfg: ExperimentConfig, command: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files: dict[str, bool] = {}
        cfg.write(self.path("config.ini"))

    def path(self, name: str, volatile: bool = False) -> Path:
        self.files[name] = volatile
        return self.dir / name

    def finish(self) -> None:
        entries = []
        for name in sorted(self.files):
            entry = {"file": name, "volatile": self.files[name]}
            if not self.files[name]:
                entry["sha256"] = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
            entries.append(entry)
        doc = {"command": self.command, "version": __version__, "files": entries,
               "note": "volatile files carry wall-clock timings and are excluded from hashing"}
        (self.dir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _read_table(path) -> tuple[np.ndarray, np.ndarray]:
    with _stage(EXIT_IO, "io"):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(c.strip() for c in rows[0]) != TRAIN_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(TRAIN_COLUMNS)}")
        arr = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError(f"{path}: need at least two data rows")
    return arr[:, :4], arr[:, 4:]


def _config(args, base_dirs=()) -> ExperimentConfig:
    paths = [Path(d) / "config.ini" for d in base_dirs if d is not None]
    for p in paths:
        if not p.exists():
            raise CliError(EXIT_IO, f"[io] {p} not found")
    if args.config:
        paths.append(args.config)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return load_config(paths, overrides)


# --------------------------------------------------------------------------
# problem and surrogate loading


class Problem:
    def __init__(self, cfg: ExperimentConfig, problem_dir):
        d = Path(problem_dir)
        grid = cfg.grid()
        with _stage(EXIT_IO, "io"):
            g1, depth = read_fields(d / "depth.fldv")
            g2, data = read_fields(d / "data.fldv")
            g3, truth = read_fields(d / "truth.fldv")
            for g in (g1, g2, g3):
                if g != grid:
                    raise ValueError(f"problem files are {g.nx}x{g.ny}, config says {grid.nx}x{grid.ny}")
        dcfg = cfg.depth()
        with _stage(EXIT_CONFIG, "model"):
            self.depth = DepthField(depth[0], dcfg.d_min, dcfg.d_max)
            self.prior = cfg.prior().build(grid, self.depth)
        self.grid = grid
        self.data = AVOObservation(data[0], data[1])
        self.truth = LatentState.from_array(truth)


class Surrogate:
    def __init__(self, surrogate_dir):
        d = Path(surrogate_dir)
        with _stage(EXIT_IO, "io"):
            if (d / "model_R0.json").exists():
                self.kind = "mars"
                r0 = MARSRegressor.from_model(MarsModel.load(d / "model_R0.json"))
                g = MARSRegressor.from_model(MarsModel.load(d / "model_G.json"))
            elif (d / "model_R0.npkr").exists():
                self.kind = "npkr"
                r0 = NadarayaWatsonRegressor.from_model(load_npkr(d / "model_R0.npkr"))
                g = NadarayaWatsonRegressor.from_model(load_npkr(d / "model_G.npkr"))
            else:
                raise ValueError(f"no surrogate model files in {d}")
            self.forward = SurrogateForward(r0, g)
            res = np.loadtxt(d / "residuals.csv", delimiter=",", skiprows=1, ndmin=2)
            self.residuals = res[:, 1:3]
            gpath = d / "gradient_models.json"
            self.gradient = GradientSurrogate.from_dict(json.loads(gpath.read_text())) if gpath.exists() else None


def _surrogate_dir(args, cfg: ExperimentConfig):
    d = getattr(args, "surrogate", None) or cfg.get("chain", "surrogate_dir")
    return d or None


def build_posterior(cfg: ExperimentConfig, problem: Problem, surrogate_dir=None) -> Posterior:
    forward_kind = cfg.get("chain", "forward").lower()
    noise_kind = cfg.get("chain", "noise").lower()
    lik = cfg.get("chain", "likelihood").lower()
    grad_kind = cfg.get("chain", "gradient").lower()
    if forward_kind not in ("synthetic", "surrogate"):
        raise ConfigError(f"chain.forward must be synthetic or surrogate, got {forward_kind!r}")
    if noise_kind not in ("base", "adjusted"):
        raise ConfigError(f"chain.noise must be base or adjusted, got {noise_kind!r}")
    if lik not in ("data", "flat"):
        raise ConfigError(f"chain.likelihood must be data or flat, got {lik!r}")
    if grad_kind not in ("auto", "mars_grad", "analytic", "finite_difference"):
        raise ConfigError(f"chain.gradient: unknown provider {grad_kind!r}")
    sur = None
    if forward_kind == "surrogate" or noise_kind == "adjusted" or grad_kind == "mars_grad":
        if surrogate_dir is None:
            raise ConfigError("this chain needs a surrogate: pass --surrogate or set chain.surrogate_dir")
        sur = Surrogate(surrogate_dir)
    synth = SyntheticForward(cfg.coefficients())
    forward = sur.forward if forward_kind == "surrogate" else synth
    noise = cfg.noise()
    if noise_kind == "adjusted":
        with _stage(EXIT_SAMPLING, "model"):
            noise = adjusted_noise(noise, sur.residuals[:, 0], sur.residuals[:, 1])
    if grad_kind == "auto":
        if sur is not None and sur.gradient is not None:
            grad_kind = "mars_grad"
        elif forward_kind == "surrogate" and sur.kind == "mars":
            grad_kind = "analytic"
        else:
            grad_kind = "finite_difference"
    if grad_kind == "mars_grad":
        if sur.gradient is None:
            raise ConfigError("chain.gradient=mars_grad but the surrogate has no gradient models")
        jac = sur.gradient
    elif grad_kind == "analytic":
        if sur is None or sur.kind != "mars" or forward_kind != "surrogate":
            raise ConfigError("chain.gradient=analytic needs a MARS surrogate forward")
        jac = SurrogateJacobian(sur.forward)
    else:
        jac = FiniteDifferenceJacobian(forward)
    with _stage(EXIT_SAMPLING, "mcmc"):
        bases = problem.prior.build_bases()
        if lik == "flat":
            return Posterior(problem.prior, bases, problem.depth.normalized(), jacobian=jac)
        return Posterior(problem.prior, bases, problem.depth.normalized(), problem.data, noise, forward, jac)


def _tune_kwargs(cfg: ExperimentConfig) -> dict:
    return {
        "bracket_batch": cfg.getint("tuning", "bracket_batch", 1),
        "batch_size": cfg.getint("tuning", "batch_size", 1),
        "n_batches": cfg.getint("tuning", "n_batches", 1),
        "gain": cfg.getfloat("tuning", "gain"),
        "eval_iterations": cfg.getint("tuning", "eval_iterations", 1),
        "tolerance": cfg.getfloat("tuning", "tolerance"),
    }


def _burn_in(cfg: ExperimentConfig, section: str) -> int | None:
    return cfg.get_optional_int(section, "burn_in")


# --------------------------------------------------------------------------
# commands


def cmd_make_synthetic(args) -> int:
    cfg = _config(args)
    out = Outputs(args.out, cfg, "make-synthetic")
    seed = cfg.seed
    grid = cfg.grid()
    with _stage(EXIT_CONFIG, "model"):
        depth_cfg, prior_cfg, noise = cfg.depth(), cfg.prior(), cfg.noise()
        forward = SyntheticForward(cfg.coefficients())
        n_train = cfg.getint("data", "n_train", 0)
        n_test = cfg.getint("data", "n_test", 0)
    log.info("drawing %dx%d synthetic problem (seed %d)", grid.nx, grid.ny, seed)
    with _stage(EXIT_CONFIG, "model"):
        prob = make_synthetic_problem(grid, depth_cfg, prior_cfg, noise, np.random.default_rng(seed), forward)
    write_fields(out.path("truth.fldv"), grid, prob.truth.to_array())
    write_fields(out.path("depth.fldv"), grid, prob.depth.depth[None])
    write_fields(out.path("data.fldv"), grid, np.stack([prob.data.R0, prob.data.G]))
    write_fields(out.path("prior_mean.fldv"), grid, prob.prior.means)
    write_field_csv(out.path("depth.csv"), grid, prob.depth.depth)
    for name, v in zip(FIELD_NAMES, prob.truth.to_array()):
        write_field_csv(out.path(f"truth_{name}.csv"), grid, v)
    for name, v in zip(FIELD_NAMES, prob.prior.means):
        write_field_csv(out.path(f"prior_mean_{name}.csv"), grid, v)
    write_field_csv(out.path("data_R0.csv"), grid, prob.data.R0)
    write_field_csv(out.path("data_G.csv"), grid, prob.data.G)
    for fname, n, offset in (("train.csv", n_train, 1), ("test.csv", n_test, 2)):
        X, Y = sample_training_set(n, prior_cfg, forward, np.random.default_rng(seed + offset))
        _write_rows(out.path(fname), TRAIN_COLUMNS, np.column_stack([X, Y]).tolist() if n else [])
    out.finish()
    log.info("wrote %s", out.dir)
    return EXIT_OK


def _make_regressor(cfg: ExperimentConfig, kind: str):
    if kind == "mars":
        return MARSRegressor(max_terms=cfg.getint("surrogate", "max_terms", 1),
                             max_degree=cfg.getint("surrogate", "max_degree", 1),
                             penalty=cfg.getfloat("surrogate", "penalty"),
                             max_knots=cfg.get_optional_int("surrogate", "max_knots"))
    if kind == "npkr":
        return NadarayaWatsonRegressor(n_subset=cfg.get_optional_int("surrogate", "n_subset"),
                                       n_starts=cfg.getint("surrogate", "lscv_starts", 1),
                                       max_evals=cfg.getint("surrogate", "lscv_evals", 1),
                                       random_state=cfg.seed)
    raise ConfigError(f"surrogate.kind must be mars or npkr, got {kind!r}")


def _train_test_paths(args):
    train = args.train or (Path(args.problem) / "train.csv" if args.problem else None)
    test = args.test or (Path(args.problem) / "test.csv" if args.problem else None)
    if train is None or test is None:
        raise ConfigError("need --problem or both --train and --test")
    return train, test


def cmd_fit_surrogate(args) -> int:
    cfg = _config(args, [args.problem] if args.problem else [])
    if args.kind:
        cfg.parser.set("surrogate", "kind", args.kind)
    kind = cfg.get("surrogate", "kind").lower()
    train, test = _train_test_paths(args)
    X, Y = _read_table(train)
    Xt, Yt = _read_table(test)
    out = Outputs(args.out, cfg, "fit-surrogate")
    models, rows = [], []
    resid = np.empty_like(Yt)
    for a, resp in enumerate(("R0", "G")):
        est = _make_regressor(cfg, kind)
        log.info("fitting %s for %s on %d rows", kind, resp, X.shape[0])
        t0 = time.perf_counter()
        with _stage(EXIT_FIT, f"surrogate_{kind}"):
            est.fit(X, Y[:, a])
        t_fit = time.perf_counter() - t0
        t0 = time.perf_counter()
        pred = est.predict(Xt)
        t_pred = time.perf_counter() - t0
        resid[:, a] = Yt[:, a] - pred
        with _stage(EXIT_FIT, "diagnostics"):
            corr = sample_correlation(Yt[:, a], pred)
        err = mse(Yt[:, a], pred)
        rows.append([resp, corr, err, float(np.var(Yt[:, a])), t_fit, t_pred])
        if kind == "mars":
            out.path(f"model_{resp}.json").write_text(est.model_.to_json())
        else:
            save_npkr(est.model_, out.path(f"model_{resp}.npkr"))
        models.append(est)
        log.info("%s: correlation %.5f, mse %.3e", resp, corr, err)
    _write_rows(out.path("residuals.csv"), ["index", "r0", "g"],
                [[i, float(r[0]), float(r[1])] for i, r in enumerate(resid)])
    if kind == "mars" and cfg.getbool("surrogate", "gradient_models"):
        log.info("fitting the six derivative models")
        with _stage(EXIT_FIT, "surrogate_mars"):
            bundle = fit_gradient_models(SyntheticForward(cfg.coefficients()), X,
                                         cfg.getfloat("surrogate", "gradient_eps"), models[0])
        out.path("gradient_models.json").write_text(json.dumps(bundle.to_dict(), indent=1))
    _write_rows(out.path("metrics.csv", volatile=True),
                ["response", "correlation", "mse", "response_variance", "fit_seconds", "predict_seconds"], rows)
    out.finish()
    return EXIT_OK


def cmd_eval_surrogate(args) -> int:
    cfg = _config(args, [args.problem] if args.problem else [])
    if not args.surrogate:
        raise ConfigError("eval-surrogate needs --surrogate")
    test = args.test or (Path(args.problem) / "test.csv" if args.problem else None)
    if test is None:
        raise ConfigError("need --problem or --test")
    Xt, Yt = _read_table(test)
    sur = Surrogate(args.surrogate)
    out = Outputs(args.out, cfg, "eval-surrogate")
    pred = sur.forward(Xt)
    rows = []
    for a, resp in enumerate(("R0", "G")):
        with _stage(EXIT_FIT, "diagnostics"):
            corr = sample_correlation(Yt[:, a], pred[:, a])
        err = mse(Yt[:, a], pred[:, a])
        var = float(np.var(Yt[:, a]))
        rows.append([resp, corr, err, var, err / var if var > 0 else float("nan")])
    _write_rows(out.path("eval.csv"), ["response", "correlation", "mse", "response_variance", "mse_ratio"], rows)

    if sur.gradient is not None:
        synth = SyntheticForward(cfg.coefficients())
        eps = cfg.getfloat("surrogate", "gradient_eps")
        base = synth(Xt)
        J = sur.gradient.predict(Xt)
        grows = []
        for k, lat in enumerate(FIELD_NAMES):
            Xp = Xt.copy()
            Xp[:, k] += eps
            fd = (synth(Xp) - base) / eps
            for a, resp in enumerate(("R0", "G")):
                grows.append([resp, lat, sample_correlation(fd[:, a], J[:, a, k]), mse(fd[:, a], J[:, a, k])])
        _write_rows(out.path("gradient_eval.csv"), ["response", "latent", "correlation", "mse"], grows)

    # speed contract: batch surrogate prediction vs cell-by-cell synthetic forward
    n_bench = cfg.getint("surrogate", "benchmark_points", 1)
    rng = np.random.default_rng(cfg.seed + 3)
    Xb = Xt[rng.integers(0, Xt.shape[0], size=n_bench)]
    synth = SyntheticForward(cfg.coefficients())
    t0 = time.perf_counter()
    sur.forward(Xb)
    t_sur = time.perf_counter() - t0
    t0 = time.perf_counter()
    synth.evaluate_pointwise(Xb)
    t_point = time.perf_counter() - t0
    t0 = time.perf_counter()
    synth(Xb)
    t_vec = time.perf_counter() - t0
    _write_rows(out.path("speed.csv", volatile=True),
                ["points", "surrogate_seconds", "forward_pointwise_seconds", "forward_vectorised_seconds",
                 "speedup_vs_pointwise"],
                [[n_bench, t_sur, t_point, t_vec, t_point / t_sur if t_sur > 0 else float("inf")]])
    out.finish()
    return EXIT_OK


def _emit_maps(out: Outputs, grid: GridSpec, samples: np.ndarray, cfg: ExperimentConfig) -> None:
    quantities = cfg.getlist("diagnostics", "quantities")
    for q in quantities:
        if q not in QUANTITIES:
            raise ConfigError(f"diagnostics.quantities: unknown quantity {q!r}")
    cells = [int(c) for c in cfg.getlist("diagnostics", "ternary_cells")]
    for c in cells:
        if not 0 <= c < grid.size:
            raise ConfigError(f"diagnostics.ternary_cells: cell {c} outside the grid")
    for q in quantities:
        mean, unc = posterior_maps(samples, q)
        write_map_csv(out.path(f"mean_{q}.csv"), grid, mean)
        write_map_csv(out.path(f"uncertainty_{q}.csv"), grid, unc)
        write_pgm(out.path(f"mean_{q}.pgm"), grid, mean)
        write_pgm(out.path(f"uncertainty_{q}.pgm"), grid, unc)
    for c in cells:
        write_ternary_csv(out.path(f"ternary_cell{c}.csv"), ternary_extract(samples, c))


def cmd_run_chain(args) -> int:
    cfg = _config(args, [args.problem])
    problem = Problem(cfg, args.problem)
    post = build_posterior(cfg, problem, _surrogate_dir(args, cfg))
    with _stage(EXIT_CONFIG, "mcmc"):
        kind = ProposalKind.parse(cfg.get("chain", "proposal"))
        iterations = cfg.getint("chain", "iterations", 1)
        thin = cfg.getint("chain", "thin", 1)
        burn_in = _burn_in(cfg, "chain")
        start = cfg.get("chain", "start").lower()
        if start not in ("prior_mean", "prior_draw"):
            raise ConfigError(f"chain.start must be prior_mean or prior_draw, got {start!r}")
        s_cfg = cfg.get_optional_float("chain", "s")
        target = cfg.get_optional_float("chain", "target")
        ChainConfig(iterations, ProposalSpec(kind, s_cfg or 0.5), thin, burn_in)
    out = Outputs(args.out, cfg, "run-chain")
    chain_seed = cfg.seed
    tuned = None
    t0 = time.perf_counter()
    with _stage(EXIT_SAMPLING, "mcmc"):
        if s_cfg is None:
            log.info("tuning %s step size", kind.value)
            tuned = tune_step_size(kind, post, target, seed=chain_seed + TUNING_SEED_OFFSET,
                                   start=start, **_tune_kwargs(cfg))
            spec = tuned.spec
        else:
            spec = ProposalSpec(kind, s_cfg)
        t_tune = time.perf_counter() - t0
        log.info("running %d iterations of %s (s=%.4g)", iterations, kind.value, spec.s)
        chain = run_chain(ChainConfig(iterations, spec, thin, burn_in, chain_seed, start), post, tuned)
    save_chain(chain, out.path("chain.chns"), out.path("chain_trace.csv"))
    with _stage(EXIT_SAMPLING, "diagnostics"):
        me = mean_ess(chain) if chain.n_samples >= 10 else None
        _emit_maps(out, problem.grid, chain.samples, cfg)
    truth_s = np.asarray(problem.truth.to_array())
    post_mean = chain.samples.mean(axis=0) if chain.n_samples else np.full_like(truth_s, np.nan)
    summary = {
        "proposal": kind.value,
        "s": spec.s,
        "tuned": tuned is not None,
        "tuning_target": tuned.target if tuned else None,
        "tuning_rate": tuned.rate if tuned else None,
        "tuning_warning": tuned.warning if tuned else False,
        "iterations": iterations,
        "burn_in": chain.burn_in,
        "thin": thin,
        "n_samples": chain.n_samples,
        "seed": chain_seed,
        "acceptance_rate": chain.acceptance_rate,
        "acceptance_burn_in": chain.acceptance_burn_in,
        "acceptance_sampling": chain.acceptance_sampling,
        "mean_ess": me.value if me else None,
        "constant_series": me.n_constant if me else None,
        "noise": [post.noise.var_r0, post.noise.var_g, post.noise.corr] if post.noise else None,
        "latent_rmse_vs_truth": float(np.sqrt(np.mean((post_mean - truth_s) ** 2))),
    }
    _write_json(out.path("summary.json"), summary)
    _write_rows(out.path("timing.csv", volatile=True), ["phase", "seconds"],
                [["tuning", t_tune], ["sampling", chain.wall_time]])
    out.finish()
    log.info("acceptance %.3f, %d samples", chain.acceptance_sampling, chain.n_samples)
    return EXIT_OK


TABLE_COLUMNS = ("proposal", "s", "acceptance_rate", "time", "ess", "ess_per_time")


def cmd_compare_proposals(args) -> int:
    cfg = _config(args, [args.problem])
    problem = Problem(cfg, args.problem)
    post = build_posterior(cfg, problem, _surrogate_dir(args, cfg))
    kinds = cfg.proposal_kinds()
    iterations = cfg.getint("compare", "iterations", 1)
    thin = cfg.getint("compare", "thin", 1)
    burn_in = _burn_in(cfg, "compare")
    with _stage(EXIT_CONFIG, "mcmc"):
        ChainConfig(iterations, ProposalSpec(ProposalKind.RW_IDENTITY, 1.0), thin, burn_in)
    out = Outputs(args.out, cfg, "compare-proposals")
    with _stage(EXIT_SAMPLING, "mcmc"):
        rows = compare_proposals(post, kinds, iterations, thin, burn_in, cfg.seed, _tune_kwargs(cfg))
    _write_rows(out.path("comparison.csv", volatile=True), TABLE_COLUMNS,
                [[r[c] for c in TABLE_COLUMNS] for r in rows])
    _write_rows(out.path("comparison_ess.csv"), ["proposal", "s", "acceptance_rate", "ess", "tuning_rate",
                                                 "tuning_warning"],
                [[r["proposal"], r["s"], r["acceptance_rate"], r["ess"], r["chain"].tuning.rate,
                  int(r["chain"].tuning.warning)] for r in rows])
    out.finish()
    for r in rows:
        log.info("%-12s s=%.4g acc=%.3f ess=%.1f ess/s=%.2f", r["proposal"], r["s"], r["acceptance_rate"],
                 r["ess"], r["ess_per_time"])
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = load_config([args.config] if args.config else [], list(args.set or []), require=False)
    with _stage(EXIT_IO, "io"):
        grid, samples, thin, burn = load_chain(args.chain)
    if samples.shape[0] < 1:
        raise CliError(EXIT_SAMPLING, "[diagnostics] chain holds no samples")
    out = Outputs(args.out, cfg, "diagnose")
    with _stage(EXIT_SAMPLING, "diagnostics"):
        _emit_maps(out, grid, samples, cfg)
        summary = {"n_samples": int(samples.shape[0]), "thin": thin, "burn_in": burn,
                   "grid": [grid.nx, grid.ny]}
        if samples.shape[0] >= 10:
            me = mean_ess(samples)
            summary.update(mean_ess=me.value, constant_series=me.n_constant)
            rows = []
            for f, name in enumerate(FIELD_NAMES):
                for c in range(grid.size):
                    v = me.per_coordinate[f * grid.size + c]
                    rows.append([name, c, "" if np.isnan(v) else float(v)])
            _write_rows(out.path("ess.csv"), ["field", "cell", "ess"], rows)
            max_lag = min(cfg.getint("diagnostics", "acf_max_lag", 0), samples.shape[0] - 1)
            curves = []
            for f in range(3):
                acfs = [acf(samples[:, f, c], max_lag) for c in range(grid.size) if np.ptp(samples[:, f, c]) > 0]
                curves.append(np.mean(acfs, axis=0) if acfs else np.full(max_lag + 1, np.nan))
            _write_rows(out.path("acf.csv"), ["lag", *FIELD_NAMES],
                        [[k, *(float(c[k]) for c in curves)] for k in range(max_lag + 1)])
    _write_json(out.path("summary.json"), summary)
    out.finish()
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
    common.add_argument("--quiet", action="store_true", help="only report errors")

    p = argparse.ArgumentParser(prog="avoinv", description="Surrogate-accelerated MCMC for AVO inversion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", parents=[common], help="draw a synthetic problem and training data")
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("fit-surrogate", parents=[common], help="fit MARS or NPKR to training data")
    s.add_argument("--problem", help="problem directory holding train.csv and test.csv")
    s.add_argument("--train")
    s.add_argument("--test")
    s.add_argument("--kind", choices=("mars", "npkr"))
    s.set_defaults(func=cmd_fit_surrogate)

    s = sub.add_parser("eval-surrogate", parents=[common], help="held-out accuracy and speed of a surrogate")
    s.add_argument("--surrogate", required=True, help="fit-surrogate output directory")
    s.add_argument("--problem")
    s.add_argument("--test")
    s.set_defaults(func=cmd_eval_surrogate)

    for name, fn, text in (("run-chain", cmd_run_chain, "run one MCMC chain"),
                           ("compare-proposals", cmd_compare_proposals, "tabulate proposal efficiency")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--problem", required=True, help="make-synthetic output directory")
        s.add_argument("--surrogate", help="fit-surrogate output directory")
        s.set_defaults(func=fn)

    s = sub.add_parser("diagnose", parents=[common], help="maps, ESS and ACF from a saved chain")
    s.add_argument("--chain", required=True, help="chain.chns file")
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("avoinv: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    log.propagate = False
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"avoinv: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"avoinv: error {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"avoinv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
