"""Command-line interface.

Subcommands: fit | predict | waic | evaluate | simulate, each driven by a
flat key-value config file with dotted sections.  All outputs are CSV (or
the versioned draws archive) with deterministic content: identical seeds
reproduce byte-identical artifacts.

Exit codes: 0 success, 2 malformed inputs (data/schema/hash), 3 MCMC abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference import compute_waic, check_loss, predict_batch, summarize_curves
from .kernels import build_correlation_cache, phi_grid_from_effective_range
from .likelihood import Dataset
from .mcmc import McmcAbort, McmcConfig, PosteriorDraws, PriorSpec, run_mcmc
from .simgen import DEFAULT_SUMMARY_TAUS, ScenarioSpec, generate, truth_marginal

__all__ = ["RunConfig", "main"]


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _parse_kv(path: Path) -> dict:
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _as_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _as_floats(s: str) -> tuple:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _maybe_random(s: str):
    return None if s.lower() in ("random", "none") else float(s)


@dataclass
class RunConfig:
    """Parsed configuration; defaults follow the reference protocols."""

    data_path: str | None = None
    output_dir: str = "."
    copula_family: str = "gaussian"
    base_family: str = "logistic"
    nu: float = 2.0
    G: int = 10
    fix_alpha_zero: bool = False
    alpha_prior: str = "uniform"
    alpha_beta: tuple = (1.0, 1.0)
    alpha_bounds: tuple = (0.0, 1.0)
    psi_bounds: tuple = (2.0, 20.0)
    n_iter: int = 20000
    burn_in: int = 10000
    thin_to: int = 500
    target_accept: float = 0.234
    adapt_decay: float = 0.7
    rng_seed: int = 0
    parametrization: str = "sigma_s_sigma_e"
    summary_taus: tuple = tuple(DEFAULT_SUMMARY_TAUS)
    predict_request_path: str | None = None
    predict_draws_path: str | None = None
    waic_draws_path: str | None = None
    evaluate_draws_path: str | None = None
    evaluate_test_data: str | None = None
    evaluate_train_sidecar: str | None = None
    evaluate_test_sidecar: str | None = None
    scenario: dict = field(default_factory=dict)
    config_hash: str = ""
    base_dir: Path = field(default_factory=Path)

    _KEYMAP = {
        "data_path": ("data_path", str),
        "output_dir": ("output_dir", str),
        "model.copula_family": ("copula_family", str),
        "model.base_family": ("base_family", str),
        "model.nu": ("nu", float),
        "model.G": ("G", int),
        "model.fix_alpha_zero": ("fix_alpha_zero", _as_bool),
        "model.alpha_prior": ("alpha_prior", str),
        "model.alpha_beta": ("alpha_beta", _as_floats),
        "model.alpha_bounds": ("alpha_bounds", _as_floats),
        "model.psi_bounds": ("psi_bounds", _as_floats),
        "mcmc.n_iter": ("n_iter", int),
        "mcmc.burn_in": ("burn_in", int),
        "mcmc.thin_to": ("thin_to", int),
        "mcmc.target_accept": ("target_accept", float),
        "mcmc.adapt_decay": ("adapt_decay", float),
        "mcmc.rng_seed": ("rng_seed", int),
        "mcmc.parametrization": ("parametrization", str),
        "summary_taus": ("summary_taus", _as_floats),
        "predict.request_path": ("predict_request_path", str),
        "predict.draws_path": ("predict_draws_path", str),
        "waic.draws_path": ("waic_draws_path", str),
        "evaluate.draws_path": ("evaluate_draws_path", str),
        "evaluate.test_data": ("evaluate_test_data", str),
        "evaluate.train_sidecar": ("evaluate_train_sidecar", str),
        "evaluate.test_sidecar": ("evaluate_test_sidecar", str),
    }
    _SCENARIO_KEYS = {
        "marginal": str, "copula": str, "n": int, "n_test": int,
        "alpha": _maybe_random, "nu": float, "phi": _maybe_random,
        "psi": float, "al_tau": float, "seed": int,
    }

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        kv = _parse_kv(path)
        cfg = cls()
        cfg.base_dir = path.parent
        for key, value in kv.items():
            if key in cls._KEYMAP:
                attr, conv = cls._KEYMAP[key]
                setattr(cfg, attr, conv(value))
            elif key.startswith("scenario."):
                name = key.split(".", 1)[1]
                if name not in cls._SCENARIO_KEYS:
                    raise ConfigError(f"unknown scenario key {key!r}")
                cfg.scenario[name] = cls._SCENARIO_KEYS[name](value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        canon = "\n".join(f"{k}={v}" for k, v in sorted(kv.items()))
        cfg.config_hash = hashlib.sha256(canon.encode()).hexdigest()
        return cfg

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def mcmc_config(self, seed: int | None = None) -> McmcConfig:
        return McmcConfig(
            n_iter=self.n_iter,
            burn_in=self.burn_in,
            thin_to=self.thin_to,
            target_accept=self.target_accept,
            adapt_decay=self.adapt_decay,
            rng_seed=self.rng_seed if seed is None else seed,
            copula_family=self.copula_family,
            base_family=self.base_family,
            fix_alpha_zero=self.fix_alpha_zero,
            parametrization=self.parametrization,
        )

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(
            alpha_prior=self.alpha_prior,
            alpha_beta=tuple(self.alpha_beta),
            alpha_bounds=tuple(self.alpha_bounds),
            psi_bounds=tuple(self.psi_bounds),
        )


# ---------------------------------------------------------------------------
# data files
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_data_csv(path, dataset: Dataset):
    p = dataset.p
    header = ["y"] + [f"x{j + 1}" for j in range(p)] + ["s1", "s2"]
    rows = np.column_stack([dataset.y, dataset.x_raw, dataset.s])
    write_csv(path, header, rows)


def read_data_csv(path, rescale=None) -> Dataset:
    """Parse the `y, x1..xp, s1, s2` schema; diagnostics name the line."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    if not lines:
        raise DataError(f"{path}:1: empty data file (header row required)")
    header = [h.strip() for h in lines[0].split(",")]
    p = len(header) - 3
    expected = ["y"] + [f"x{j + 1}" for j in range(p)] + ["s1", "s2"]
    if p < 1 or header != expected:
        raise DataError(
            f"{path}:1: header must be y,x1..xp,s1,s2 (got {','.join(header)!r})"
        )
    rows = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != len(header):
            raise DataError(
                f"{path}:{lineno}: expected {len(header)} columns, got {len(parts)}"
            )
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise DataError(f"{path}:2: no data rows")
    arr = np.asarray(rows)
    return Dataset.from_raw(arr[:, 0], arr[:, 1 : 1 + p], arr[:, 1 + p :], rescale=rescale)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _check_hash(draws: PosteriorDraws, data_path, force: bool):
    want = draws.meta.get("data_hash")
    have = _file_hash(data_path)
    if want and want != have and not force:
        raise DataError(
            f"data file {data_path} does not match the draws' recorded data "
            "hash; rerun with --force to override"
        )


def _build_cache(dataset: Dataset, nu: float, G: int, phi_grid=None):
    if phi_grid is None:
        phi_grid = phi_grid_from_effective_range(dataset.s, nu, G)
    return build_correlation_cache(dataset.s, nu, np.asarray(phi_grid, dtype=float))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _run_chain(payload):
    dataset, cfg, prior, cache, seed = payload
    return run_mcmc(dataset, cfg, prior, cache)


def cmd_fit(cfg: RunConfig, seed: int | None, chains: int) -> int:
    if not cfg.data_path:
        raise ConfigError("fit requires data_path")
    data_file = cfg.resolve(cfg.data_path)
    dataset = read_data_csv(data_file)
    if dataset.n < dataset.p + 2:
        raise DataError(f"need at least p + 2 = {dataset.p + 2} observations")
    cache = _build_cache(dataset, cfg.nu, cfg.G)
    base_seed = cfg.rng_seed if seed is None else seed
    prior = cfg.prior_spec()
    jobs = [
        (dataset, cfg.mcmc_config(base_seed + c), prior, cache, base_seed + c)
        for c in range(chains)
    ]
    if chains == 1:
        parts = [_run_chain(jobs[0])]
    else:
        workers = min(chains, int(os.environ.get("JSQR_THREADS", os.cpu_count() or 1)))
        if workers <= 1:
            parts = [_run_chain(j) for j in jobs]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(_run_chain, jobs))
    draws = parts[0] if chains == 1 else PosteriorDraws.concat(parts)
    draws.meta = {
        "config_hash": cfg.config_hash,
        "data_hash": _file_hash(data_file),
        "seed": base_seed,
        "chains": chains,
    }
    out = Path(cfg.resolve(cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    draws_path = out / "draws.npz"
    draws.save(draws_path)
    _write_fit_report(out / "fit_report.txt", cfg, draws, chains)
    print(f"wrote {draws_path} ({draws.n_draws} retained draws)")
    return 0


def _write_fit_report(path, cfg: RunConfig, draws: PosteriorDraws, chains: int):
    lines = [
        "jsqr fit report",
        f"config_hash: {cfg.config_hash}",
        f"seed: {draws.meta.get('seed')}",
        f"chains: {chains}",
        f"retained_draws: {draws.n_draws}",
        f"copula_family: {draws.copula_family}",
        f"base_family: {draws.base_family}",
        f"posterior_mean_alpha: {_fmt(np.mean(draws.alpha))}",
        f"posterior_mean_sigma2: {_fmt(np.mean(draws.sigma2))}",
        f"posterior_mean_phi: {_fmt(np.mean(draws.phi_grid[draws.phi_index.astype(int)]))}",
    ]
    if draws.copula_family == "student_t":
        lines.append(f"posterior_mean_psi: {_fmt(np.nanmean(draws.psi))}")
    if draws.base_family == "student_t":
        lines.append(f"posterior_mean_base_dof: {_fmt(np.nanmean(draws.base_dof))}")
    diag = draws.diagnostics if "accept_rate" in draws.diagnostics else \
        draws.diagnostics.get("chain0", {})
    for section in ("accept_rate", "ess", "proposal_scale"):
        if section in diag:
            lines.append(f"[{section}]")
            for k, v in diag[section].items():
                lines.append(f"{k}: {_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _load_draws_and_data(cfg: RunConfig, draws_key: str, force: bool):
    draws_path = getattr(cfg, draws_key)
    if not draws_path or not cfg.data_path:
        raise ConfigError("command requires a draws path and data_path")
    draws = PosteriorDraws.load(cfg.resolve(draws_path))
    data_file = cfg.resolve(cfg.data_path)
    dataset = read_data_csv(data_file)
    _check_hash(draws, data_file, force)
    if draws.u.shape[1] != dataset.n:
        raise DataError(
            f"draws were fitted on n={draws.u.shape[1]} observations but "
            f"{data_file} has n={dataset.n}"
        )
    cache = build_correlation_cache(dataset.s, draws.nu, draws.phi_grid)
    return draws, dataset, cache


def cmd_predict(cfg: RunConfig, seed: int | None, force: bool) -> int:
    draws, dataset, cache = _load_draws_and_data(cfg, "predict_draws_path", force)
    if not cfg.predict_request_path:
        raise ConfigError("predict requires predict.request_path")
    req_path = cfg.resolve(cfg.predict_request_path)
    lines = Path(req_path).read_text().splitlines()
    if not lines:
        raise DataError(f"{req_path}:1: empty request file")
    header = [h.strip() for h in lines[0].split(",")]
    p = dataset.p
    expected = [f"x{j + 1}" for j in range(p)] + ["s1", "s2"]
    if header != expected:
        raise DataError(f"{req_path}:1: header must be {','.join(expected)}")
    body = [r for r in lines[1:] if r.strip()]
    try:
        arr = np.asarray([[float(v) for v in r.split(",")] for r in body])
    except ValueError:
        raise DataError(f"{req_path}: non-numeric field") from None
    if arr.ndim != 2 or arr.shape[1] != p + 2:
        raise DataError(f"{req_path}: expected {p + 2} columns")
    taus = np.asarray(cfg.summary_taus)
    summaries = predict_batch(arr[:, :p], arr[:, p:], taus, draws, dataset, cache)
    out = Path(cfg.resolve(cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, sm in enumerate(summaries):
        for k, tau in enumerate(taus):
            rows.append([i, tau, sm.mean[k], sm.median[k], sm.lower[k], sm.upper[k],
                         sm.clamped])
    write_csv(out / "predictions.csv",
              ["request", "tau", "mean", "median", "lower", "upper", "clamped"], rows)
    print(f"wrote {out / 'predictions.csv'}")
    return 0


def cmd_waic(cfg: RunConfig, seed: int | None, force: bool) -> int:
    draws, dataset, cache = _load_draws_and_data(cfg, "waic_draws_path", force)
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    report = compute_waic(draws, dataset, cache, rng)
    out = Path(cfg.resolve(cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        [i, report.per_observation[i, 0], report.per_observation[i, 1],
         report.per_observation[i, 2]]
        for i in range(dataset.n)
    ]
    write_csv(out / "waic.csv", ["obs", "lppd", "p_waic2", "waic"], rows)
    write_csv(out / "waic_summary.csv", ["waic", "lppd", "p_waic2"],
              [[report.waic, report.lppd, report.p_waic2]])
    print(f"wrote {out / 'waic_summary.csv'} (waic={report.waic:.3f})")
    return 0


def _point_predictions(draws, dataset, cache, xs_raw, ss, taus):
    summaries = predict_batch(xs_raw, ss, taus, draws, dataset, cache)
    return np.stack([sm.mean for sm in summaries])  # (q, k)


def cmd_evaluate(cfg: RunConfig, seed: int | None, force: bool) -> int:
    draws, train, cache = _load_draws_and_data(cfg, "evaluate_draws_path", force)
    taus = np.asarray(cfg.summary_taus)
    out = Path(cfg.resolve(cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)

    pred_train = _point_predictions(draws, train, cache, train.x_raw, train.s, taus)
    train_loss = [
        float(np.mean(check_loss(t, train.y - pred_train[:, k])))
        for k, t in enumerate(taus)
    ]
    test = None
    test_loss = [np.nan] * len(taus)
    if cfg.evaluate_test_data:
        test = read_data_csv(cfg.resolve(cfg.evaluate_test_data), rescale=train.rescale)
        pred_test = _point_predictions(draws, test, cache, test.x_raw, test.s, taus)
        test_loss = [
            float(np.mean(check_loss(t, test.y - pred_test[:, k])))
            for k, t in enumerate(taus)
        ]
    write_csv(out / "checkloss.csv", ["tau", "train_loss", "test_loss"],
              [[t, a, b] for t, a, b in zip(taus, train_loss, test_loss)])

    if cfg.evaluate_train_sidecar:
        truth = json.loads(Path(cfg.resolve(cfg.evaluate_train_sidecar)).read_text())
        tm = truth_marginal(truth["marginal"])
        summ = summarize_curves(
            draws, taus, rescale=train.rescale, locations=train.s,
            pairs=[(int(i), int(j)) for i, j, _ in truth["r_pairs"]],
        )
        rows = []
        b0_true = tm.beta0(taus)
        b_true = tm.beta(taus)
        for k, t in enumerate(taus):
            rows.append([t, 0, abs(summ.beta0_mean[k] - b0_true[k]),
                         int(summ.beta0_lower[k] <= b0_true[k] <= summ.beta0_upper[k])])
            for j in range(train.p):
                rows.append([t, j + 1, abs(summ.beta_mean[k, j] - b_true[k, j]),
                             int(summ.beta_lower[k, j] <= b_true[k, j] <= summ.beta_upper[k, j])])
        write_csv(out / "coef_eval.csv", ["tau", "coef", "abs_error", "covered"], rows)
        rrows = []
        for (i, j, r_true) in truth["r_pairs"]:
            sm = summ.r_pairs[(int(i), int(j))]
            rrows.append([int(i), int(j), r_true, sm["mean"], sm["lower"], sm["upper"],
                          int(sm["lower"] <= r_true <= sm["upper"])])
        write_csv(out / "r_eval.csv",
                  ["i", "j", "true", "post_mean", "lower", "upper", "covered"], rrows)

    if cfg.evaluate_test_sidecar and test is not None:
        truth_t = json.loads(Path(cfg.resolve(cfg.evaluate_test_sidecar)).read_text())
        levels = truth_t.get("cond_levels_test")
        if levels is not None:
            tm = truth_marginal(truth_t["marginal"])
            cond_taus = np.asarray(truth_t["cond_taus"])
            lv = np.asarray(levels)
            pred = _point_predictions(draws, test, cache, test.x_raw, test.s, cond_taus)
            true_q = np.empty_like(pred)
            for i in range(test.n):
                true_q[i] = tm.quantile_rows(
                    lv[i], np.tile(test.x_raw[i], (lv.shape[1], 1))
                )
            mae = np.mean(np.abs(pred - true_q), axis=0)
            write_csv(out / "predq_mae.csv", ["tau", "mae"],
                      [[t, m] for t, m in zip(cond_taus, mae)])
    print(f"wrote {out / 'checkloss.csv'}")
    return 0


def cmd_simulate(cfg: RunConfig, seed: int | None) -> int:
    sc = dict(cfg.scenario)
    if seed is not None:
        sc["seed"] = seed
    spec = ScenarioSpec(**sc)
    sim = generate(spec, summary_taus=np.asarray(cfg.summary_taus))
    out = Path(cfg.resolve(cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    write_data_csv(out / "data.csv", sim.train)
    if sim.test is not None:
        write_data_csv(out / "test_data.csv", sim.test)
    (out / "truth.json").write_text(json.dumps(sim.truth, sort_keys=True))
    print(f"wrote {out / 'data.csv'} (n={sim.train.n})")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="jsqr",
        description="Joint spatial quantile regression: fit, predict, compare, simulate.",
    )
    parser.add_argument("command",
                        choices=["fit", "predict", "waic", "evaluate", "simulate"])
    parser.add_argument("--config", required=True, help="path to the key-value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the RNG seed")
    parser.add_argument("--chains", type=int, default=1,
                        help="number of concurrent chains (fit only)")
    parser.add_argument("--force", action="store_true",
                        help="skip draws/data hash consistency checks")
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config)
        if args.command == "fit":
            return cmd_fit(cfg, args.seed, max(1, args.chains))
        if args.command == "predict":
            return cmd_predict(cfg, args.seed, args.force)
        if args.command == "waic":
            return cmd_waic(cfg, args.seed, args.force)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.seed, args.force)
        return cmd_simulate(cfg, args.seed)
    except (ConfigError, DataError, OSError, json.JSONDecodeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except McmcAbort as err:
        print(f"mcmc abort: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
