"""Command-line driver: load CSV data, fit a model, write embeddings and traces."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .cavi import PpcaModel, cavi_fit, svi_fit
from .deepmodels import BAYES, POINT, fit_nonlinear_pca, fit_vae, sample_ppca_dataset, save_model
from .estimators import PATHWISE, SCORE, pathwise_grad, quadratic_objective, score_grad
from .expfam import RngState
from .gradcheck import run_suite
from .schedules import RmSchedule

COMMANDS = ("fit-ppca", "fit-ppca-svi", "fit-nlpca", "fit-vae", "gradcheck", "estimator-bench")
FIT_COMMANDS = COMMANDS[:4]


class CsvError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CSV input and output
# ---------------------------------------------------------------------------


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path) -> np.ndarray:
    """Read a rectangular numeric CSV; a non-numeric first row is taken as a header."""
    path = Path(path)
    if not path.is_file():
        raise CsvError(f"{path}: no such file")
    rows: List[List[float]] = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            cells = [c.strip() for c in line.split(",")]
            if not rows and width is None and not all(_is_number(c) for c in cells):
                width = len(cells)
                continue
            if width is None:
                width = len(cells)
            if len(cells) != width:
                raise CsvError(f"{path}: line {lineno} has {len(cells)} fields, expected {width}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                col = next(j for j, c in enumerate(cells) if not _is_number(c))
                raise CsvError(f"{path}: non-numeric cell at line {lineno}, column {col + 1}: {cells[col]!r}") from None
    if not rows:
        raise CsvError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_summary(path, items: Dict[str, object]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in items.items():
            if isinstance(value, float):
                value = fmt(value)
            elif isinstance(value, (list, tuple, np.ndarray)):
                value = " ".join(fmt(v) for v in value)
            fh.write(f"{key}: {value}\n")


def read_summary(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition(": ")
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    command: str
    data: Optional[str] = None
    synthetic: Optional[str] = None  # "d,k,N"
    latent_dim: int = 2
    hidden: int = 100
    sigma_x2: float = 0.1
    minibatch: int = 50
    steps: int = 2000
    tau: float = 1.0
    kappa: float = 0.75
    mc_samples: Optional[int] = None  # 1 for the deep models, 10^4 for estimator-bench
    seed: int = 0
    out: str = "out"
    max_sweeps: int = 500
    rel_tol: float = 1e-9
    rate: float = 1e-3
    weights: str = BAYES
    trace_every: int = 10
    mu: float = 3.0
    replications: int = 50

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.command in FIT_COMMANDS:
            if (self.data is None) == (self.synthetic is None):
                raise ConfigError("give exactly one of --data or --synthetic")
            if self.latent_dim < 1:
                raise ConfigError("--latent-dim must be at least 1")
            if not self.sigma_x2 > 0:
                raise ConfigError("--sigma-x2 must be positive")
        if self.steps < 1 or self.max_sweeps < 1 or self.trace_every < 1:
            raise ConfigError("--steps, --max-sweeps and --trace-every must be at least 1")
        counts = (self.hidden, self.minibatch, self.replications, 1 if self.mc_samples is None else self.mc_samples)
        if min(counts) < 1:
            raise ConfigError("--hidden, --minibatch, --mc-samples and --replications must be at least 1")
        if self.weights not in (BAYES, POINT):
            raise ConfigError(f"--weights must be {BAYES} or {POINT}")
        if not self.rate > 0:
            raise ConfigError("--rate must be positive")
        if self.command == "fit-ppca-svi":
            try:
                schedule = RmSchedule(self.tau, self.kappa)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if schedule(0) > 1.0:
                raise ConfigError("--tau below 1 gives a first step size above 1")


@dataclass
class RunSummary:
    command: str
    final_elbo: Optional[float]
    wall_time: float
    iterations: int
    config: Dict[str, object]
    centering: Optional[List[float]] = None
    version: str = __version__
    extra: Dict[str, object] = field(default_factory=dict)

    def items(self) -> Dict[str, object]:
        out: Dict[str, object] = {"command": self.command, "version": self.version}
        if self.final_elbo is not None:
            out["final_elbo"] = self.final_elbo
        out["iterations"] = self.iterations
        if self.centering is not None:
            out["centering"] = self.centering
        out.update(self.extra)
        for key, value in self.config.items():
            if key == "out":
                continue
            out[f"config.{key}"] = "" if value is None else value
        return out


def _dataset(config: RunConfig) -> np.ndarray:
    if config.data is not None:
        return load_csv(config.data)
    try:
        d, k, n = (int(v) for v in config.synthetic.split(","))
    except ValueError:
        raise ConfigError("--synthetic expects d,k,N") from None
    x, _, _ = sample_ppca_dataset(d, k, n, config.sigma_x2, RngState(config.seed))
    return x


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _write_fit(out: Path, embedding: np.ndarray, trace_rows, with_se: bool) -> None:
    k = embedding.shape[1]
    write_csv(out / "embedding.csv", [f"z{j + 1}" for j in range(k)], embedding)
    header = ["step", "value", "std_error"] if with_se else ["step", "value"]
    write_csv(out / "elbo_trace.csv", header, trace_rows)


def _check_dims(config: RunConfig, x: np.ndarray) -> None:
    n, d = x.shape
    if config.latent_dim > d:
        raise ConfigError(f"--latent-dim {config.latent_dim} exceeds data dimension {d}")
    if config.command in ("fit-ppca-svi", "fit-vae") and config.minibatch > n:
        raise ConfigError(f"--minibatch {config.minibatch} exceeds the {n} data rows")


def _fit_ppca(config: RunConfig, out: Path) -> RunSummary:
    x = _dataset(config)
    _check_dims(config, x)
    start = time.perf_counter()
    model = PpcaModel(x, config.latent_dim, config.sigma_x2)
    rng = RngState(config.seed)
    if config.command == "fit-ppca":
        state, trace = cavi_fit(model, None, config.max_sweeps, config.rel_tol, rng)
        rows = [(i + 1, v) for i, v in enumerate(trace)]
    else:
        schedule = RmSchedule(config.tau, config.kappa)
        state, rows = svi_fit(model, None, schedule, config.minibatch, config.steps, rng, config.trace_every)
    wall = time.perf_counter() - start
    _write_fit(out, state.mu_z, rows, with_se=False)
    write_csv(out / "loadings.csv", [f"b{j + 1}" for j in range(model.k)], state.mu_beta)
    return RunSummary(config.command, rows[-1][1], wall, rows[-1][0], asdict(config), list(model.mean),
                      extra={"n_rows": model.n, "n_cols": model.d})


def _fit_deep(config: RunConfig, out: Path) -> RunSummary:
    x = _dataset(config)
    _check_dims(config, x)
    start = time.perf_counter()
    common = dict(k=config.latent_dim, hidden=config.hidden, sigma_x2=config.sigma_x2, steps=config.steps,
                  rate=config.rate, seed=config.seed, weights=config.weights, trace_every=config.trace_every,
                  mc_samples=config.mc_samples or 1)
    if config.command == "fit-nlpca":
        model, trace = fit_nonlinear_pca(x, **common)
        embedding = model.embedding()
    else:
        model, trace = fit_vae(x, minibatch=config.minibatch, **common)
        embedding = model.embedding(x)
    wall = time.perf_counter() - start
    with_se = all(se is not None for _, _, se in trace)
    rows = [(step, value, se) if with_se else (step, value) for step, value, se in trace]
    _write_fit(out, embedding, rows, with_se)
    save_model(model, out / "model.txt")
    return RunSummary(config.command, trace[-1][1], wall, trace[-1][0], asdict(config),
                      extra={"n_rows": x.shape[0], "n_cols": x.shape[1]})


def _gradcheck(config: RunConfig, out: Path) -> RunSummary:
    start = time.perf_counter()
    results = run_suite(config.seed)
    wall = time.perf_counter() - start
    with open(out / "gradcheck.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("case,max_rel_error,passed,checked,skipped\n")
        for r in results:
            fh.write(f"{r.name},{fmt(r.max_rel_error)},{int(r.passed)},{r.n_checked},{r.n_skipped}\n")
    worst = max(r.max_rel_error for r in results)
    return RunSummary(config.command, None, wall, len(results), asdict(config),
                      extra={"max_rel_error": worst, "all_passed": all(r.passed for r in results)})


def estimator_bench(mu: float, K: int, replications: int, seed: int):
    """Both estimators at one mean, plus a paired variance comparison over replications."""
    rng = RngState(seed)
    main = {}
    for mode, fn in ((PATHWISE, pathwise_grad), (SCORE, score_grad)):
        est = fn(quadratic_objective(mu, K, mode=mode), rng, K)
        main[mode] = est
    wins = 0
    children = rng.spawn(replications)
    for child in children:
        var = {}
        for mode, fn in ((PATHWISE, pathwise_grad), (SCORE, score_grad)):
            est = fn(quadratic_objective(mu, K, mode=mode), child, K)
            var[mode] = float(est.per_sample["z.mean"].var(ddof=1))
        wins += var[SCORE] > var[PATHWISE]
    return main, wins


def _bench(config: RunConfig, out: Path) -> RunSummary:
    start = time.perf_counter()
    main, wins = estimator_bench(config.mu, config.mc_samples or 10_000, config.replications, config.seed)
    wall = time.perf_counter() - start
    with open(out / "bench.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("estimator,mean,std_error,variance,K\n")
        for mode, est in main.items():
            per = est.per_sample["z.mean"]
            fh.write(f"{mode},{fmt(est.mean['z.mean'].item())},{fmt(est.std_error['z.mean'].item())},"
                     f"{fmt(per.var(ddof=1))},{est.n_samples}\n")
    return RunSummary(config.command, None, wall, config.replications, asdict(config),
                      extra={"analytic_gradient": 2.0 * (config.mu - 5.0),
                             "score_variance_larger": f"{wins}/{config.replications}"})


HANDLERS = {
    "fit-ppca": _fit_ppca,
    "fit-ppca-svi": _fit_ppca,
    "fit-nlpca": _fit_deep,
    "fit-vae": _fit_deep,
    "gradcheck": _gradcheck,
    "estimator-bench": _bench,
}


def run(config: RunConfig) -> RunSummary:
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = HANDLERS[config.command](config, out)
    write_summary(out / "summary.txt", summary.items())
    return summary


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    defaults = RunConfig("fit-ppca")
    parser = argparse.ArgumentParser(prog="varinf", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fit-ppca": "probabilistic PCA by coordinate ascent",
        "fit-ppca-svi": "probabilistic PCA by stochastic VI",
        "fit-nlpca": "non-linear PCA (decoder-only VAE) by black-box VI",
        "fit-vae": "variational autoencoder with amortised inference",
        "gradcheck": "finite-difference check of every graph operation",
        "estimator-bench": "pathwise vs score-function gradient on E[(Z-5)^2]",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--seed", type=int, default=defaults.seed, help="random seed")
        p.add_argument("--out", default=defaults.out, help="output directory")
        if name in FIT_COMMANDS:
            src = p.add_mutually_exclusive_group(required=True)
            src.add_argument("--data", help="CSV file, one row per data point")
            src.add_argument("--synthetic", metavar="D,K,N", help="sample a PPCA dataset instead")
            p.add_argument("--latent-dim", type=int, default=defaults.latent_dim, help="latent dimension k")
            p.add_argument("--sigma-x2", type=float, default=defaults.sigma_x2, help="observation noise variance")
        if name == "fit-ppca":
            p.add_argument("--max-sweeps", type=int, default=defaults.max_sweeps, help="coordinate-ascent sweep budget")
            p.add_argument("--rel-tol", type=float, default=defaults.rel_tol, help="stop when the relative ELBO change falls below this")
        if name in ("fit-ppca-svi", "fit-nlpca", "fit-vae"):
            p.add_argument("--steps", type=int, default=defaults.steps, help="optimisation steps")
            p.add_argument("--trace-every", type=int, default=defaults.trace_every, help="record the ELBO every this many steps")
        if name in ("fit-ppca-svi", "fit-vae"):
            p.add_argument("--minibatch", type=int, default=100 if name == "fit-vae" else defaults.minibatch,
                           help="minibatch size M")
        if name == "fit-ppca-svi":
            p.add_argument("--tau", type=float, default=defaults.tau, help="Robbins-Monro delay")
            p.add_argument("--kappa", type=float, default=defaults.kappa, help="Robbins-Monro forgetting rate")
        if name in ("fit-nlpca", "fit-vae"):
            p.add_argument("--hidden", type=int, default=defaults.hidden, help="hidden layer width H")
            p.add_argument("--rate", type=float, default=1e-2 if name == "fit-nlpca" else defaults.rate,
                           help="Adam learning rate")
            p.add_argument("--weights", choices=(BAYES, POINT), default=defaults.weights,
                           help="Normal posteriors over network weights, or point estimates")
            p.add_argument("--mc-samples", type=int, default=1, help="noise draws per gradient estimate")
        if name == "estimator-bench":
            p.add_argument("--mu", type=float, default=defaults.mu, help="variational mean at which to estimate the gradient")
            p.add_argument("--mc-samples", type=int, default=10_000, help="Monte Carlo samples K per estimate")
            p.add_argument("--replications", type=int, default=defaults.replications,
                           help="seeded replications for the variance comparison")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    fields = RunConfig.__dataclass_fields__
    return RunConfig(**{k: v for k, v in vars(args).items() if k in fields})


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = run(config_from_args(args))
    except (ConfigError, CsvError, ValueError, ArithmeticError) as exc:
        print(f"varinf: error: {exc}", file=sys.stderr)
        return 1
    if summary.final_elbo is not None:
        print(f"{summary.command}: final ELBO {fmt(summary.final_elbo)} after {summary.iterations} iterations"
              f" ({summary.wall_time:.2f} s)")
    else:
        print(f"{summary.command}: done, see {Path(args.out) / 'summary.txt'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
