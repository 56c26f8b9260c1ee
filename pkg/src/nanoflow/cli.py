"""Command-line surface: configuration loading, experiment orchestration,
and all file emission.

Subcommands: ``solve`` (reference finite-difference run), ``synth`` (noisy
dataset), ``train-forward`` / ``invert`` (variational training), ``predict``
(posterior ensembles from a checkpoint), ``check`` (self-tests). Every
subcommand takes ``--config``, ``--seed``, ``--out-dir`` and finishes by
writing ``manifest.json`` with SHA-256 hashes of every emitted file.

Exit codes: 0 success, 1 usage, 2 invalid configuration, 3 numerical
failure (a failing ``check`` self-test also exits 3).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass, fields as dc_fields, replace as dc_replace
from pathlib import Path
from typing import Optional

import numpy as np

from nanoflow.collocation import build_collocation_set, stratification_holds
from nanoflow.domain import ColumnConfig, ConfigError
from nanoflow.losses import PRESETS, PhysicsLoss
from nanoflow.network import DEFAULT_SPEC, gradient_check, init_params
from nanoflow.oracle import (
    ObservationSet,
    SolverError,
    solve_forward,
    synthesize_dataset,
)
from nanoflow.vi import (
    TRACE_HEADER,
    TrainingError,
    inverse_posterior_summary,
    kl_gaussian_diag,
    load_state,
    posterior_predict,
    save_state,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


@dataclass
class TrainOptions:
    """Training-run options (config key "train"); defaults give the
    full-scale forward run."""

    preset: str = "balanced"
    sigma_u: Optional[float] = None  # override the preset's data-noise scale
    iters: int = 20000
    lr: float = 3e-3
    n_interior: int = 15000
    boundary_split: tuple = (1000, 1000, 1000)
    n_samples: int = 50
    init_std: float = 0.5
    init_posterior_std: float = 1e-2
    beta_kl: float = 1.0
    log_every: int = 0


@dataclass
class SynthOptions:
    """Dataset-synthesis options (config key "synth")."""

    noise_std: float = 0.001
    n_btc: int = 60
    n_ret: int = 40


def _options_from(doc: dict, cls, section: str):
    known = {f.name for f in dc_fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in {section!r} section")
    opts = cls(**doc)
    if isinstance(opts, TrainOptions):
        if opts.preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {opts.preset!r}; choose from {sorted(PRESETS)}"
            )
        opts.boundary_split = tuple(int(v) for v in opts.boundary_split)
        if opts.sigma_u is not None and not opts.sigma_u > 0:
            raise ConfigError(f"sigma_u must be positive, got {opts.sigma_u}")
    return opts


def _noise_scales(topts: TrainOptions):
    """Preset noise scales, with the data-noise entry overridden when the
    config names the dataset's actual noise level."""
    noise = PRESETS[topts.preset]
    if topts.sigma_u is not None:
        noise = dc_replace(noise, sigma_u=topts.sigma_u)
    return noise


def load_config(path):
    """Parse a JSON config file into (ColumnConfig, TrainOptions,
    SynthOptions); absent keys take documented defaults, unknown keys are
    rejected by name."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    doc = dict(doc)
    train_opts = _options_from(doc.pop("train", {}), TrainOptions, "train")
    synth_opts = _options_from(doc.pop("synth", {}), SynthOptions, "synth")
    cfg = ColumnConfig.from_dict(doc)
    return cfg, train_opts, synth_opts


def _fmt(value) -> str:
    return "%.17g" % float(value)


class RunWriter:
    """Collects emitted files and finishes with the hash manifest."""

    def __init__(self, out_dir, command: str, seed: int, cfg: ColumnConfig):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.seed = seed
        self.cfg = cfg
        self.files = {}
        self.metrics = {}
        self.preset = None
        self._t0 = time.monotonic()

    def _register(self, path: Path):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.files[path.name] = digest

    def write_csv(self, name: str, header: str, rows):
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(c if isinstance(c, str) else _fmt(c) for c in row))
                fh.write("\n")
        self._register(path)
        return path

    def write_json(self, name: str, payload: dict):
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self._register(path)
        return path

    def write_state(self, name: str, state):
        path = self.out_dir / name
        save_state(path, state)
        self._register(path)
        return path

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "seed": self.seed,
            "preset": self.preset,
            "config": self.cfg.to_dict(),
            "metrics": self.metrics,
            "files": self.files,
            "wall_clock_s": time.monotonic() - self._t0,
        }
        path = self.out_dir / "manifest.json"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _cmd_solve(args, cfg, topts, sopts) -> int:
    writer = RunWriter(args.out_dir, "solve", args.seed, cfg)
    out = solve_forward(cfg, hold_inlet=args.hold_inlet)
    writer.write_csv("breakthrough.csv", "t_s,c_kg_m3", out.breakthrough)
    writer.write_csv("retention.csv", "x_m,s_kg_m3", out.retention_final)
    audit = out.mass_audit
    writer.metrics = {
        "injected_kg_m2": audit.injected,
        "stored_aqueous_kg_m2": audit.stored_aqueous,
        "stored_retained_kg_m2": audit.stored_retained,
        "outflow_kg_m2": audit.outflow,
        "mass_closure_error": audit.relative_closure_error,
    }
    writer.finish()
    return EXIT_OK


def _cmd_synth(args, cfg, topts, sopts) -> int:
    writer = RunWriter(args.out_dir, "synth", args.seed, cfg)
    dataset = synthesize_dataset(
        cfg,
        noise_std=sopts.noise_std,
        n_btc=sopts.n_btc,
        n_ret=sopts.n_ret,
        seed=args.seed,
    )
    writer.write_csv("dataset.csv", "kind,coord,value,truth", dataset.to_rows())
    writer.metrics = {
        "noise_std": sopts.noise_std,
        "n_btc": sopts.n_btc,
        "n_ret": sopts.n_ret,
    }
    writer.finish()
    return EXIT_OK


def _write_training_outputs(writer: RunWriter, report):
    writer.write_state("checkpoint.bin", report.state)
    rows = []
    for row in report.trace:
        rows.append(["%d" % int(row[0])] + [_fmt(v) for v in row[1:]])
    writer.write_csv("trace.csv", TRACE_HEADER, rows)
    writer.metrics["elbo_final"] = float(report.elbo_trace[-1])
    writer.metrics["train_wall_clock_s"] = report.wall_clock


def _forward_fit_metrics(state, cfg, n_samples: int, seed: int):
    """Posterior-mean breakthrough RMSE against the reference solver and
    min–max envelope coverage of the reference curve."""
    oracle = solve_forward(cfg)
    times = oracle.breakthrough[:, 0]
    truth = oracle.breakthrough[:, 1]
    ens = posterior_predict(state, cfg, n_samples=n_samples, times=times, seed=seed)
    rmse = float(np.sqrt(np.mean((ens.btc_mean - truth) ** 2)))
    inside = (truth >= ens.btc_min) & (truth <= ens.btc_max)
    return rmse, float(100.0 * np.mean(inside)), ens


def _cmd_train_forward(args, cfg, topts, sopts) -> int:
    writer = RunWriter(args.out_dir, "train-forward", args.seed, cfg)
    writer.preset = topts.preset
    colloc = build_collocation_set(
        seed=args.seed,
        n_interior=topts.n_interior,
        boundary_split=topts.boundary_split,
    )
    report = train(
        cfg,
        colloc,
        _noise_scales(topts),
        mode="forward",
        iters=topts.iters,
        lr=topts.lr,
        seed=args.seed,
        init_std=topts.init_std,
        init_posterior_std=topts.init_posterior_std,
        beta_kl=topts.beta_kl,
        preset_name=topts.preset,
        log_every=topts.log_every,
    )
    _write_training_outputs(writer, report)
    rmse, coverage, _ = _forward_fit_metrics(
        report.state, cfg, topts.n_samples, args.seed
    )
    writer.metrics["btc_rmse_vs_reference"] = rmse
    writer.metrics["envelope_coverage_pct"] = coverage
    writer.finish()
    print(f"rmse {rmse:.6g}  envelope {coverage:.1f}%  elbo {report.elbo_trace[-1]:.6g}")
    return EXIT_OK


def _load_dataset(path) -> ObservationSet:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["kind", "coord", "value", "truth"]:
                raise ConfigError(f"{path}: expected header kind,coord,value,truth")
            rows = [(r[0], float(r[1]), float(r[2]), float(r[3])) for r in reader if r]
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed dataset row: {exc}") from exc
    dataset = ObservationSet.from_rows(rows)
    if dataset.btc_t.size + dataset.ret_x.size == 0:
        raise ConfigError(f"{path}: dataset holds no observations")
    return dataset


def _posterior_payload(summary):
    return {
        "ka_mean": summary.ka_mean,
        "ka_std": summary.ka_std,
        "kd_mean": summary.kd_mean,
        "kd_std": summary.kd_std,
    }


def _cmd_invert(args, cfg, topts, sopts) -> int:
    writer = RunWriter(args.out_dir, "invert", args.seed, cfg)
    writer.preset = topts.preset
    dataset = _load_dataset(args.dataset)
    colloc = build_collocation_set(
        seed=args.seed,
        n_interior=topts.n_interior,
        boundary_split=topts.boundary_split,
    )
    report = train(
        cfg,
        colloc,
        _noise_scales(topts),
        mode="inverse",
        dataset=dataset,
        iters=topts.iters,
        lr=topts.lr,
        seed=args.seed,
        init_std=topts.init_std,
        init_posterior_std=topts.init_posterior_std,
        beta_kl=topts.beta_kl,
        preset_name=topts.preset,
        log_every=topts.log_every,
    )
    _write_training_outputs(writer, report)
    summary = inverse_posterior_summary(report.state, n_samples=topts.n_samples, seed=args.seed)
    payload = _posterior_payload(summary)
    writer.write_json("posterior.json", payload)
    writer.metrics.update(payload)
    writer.finish()
    print(
        f"ka {summary.ka_mean:.6g} ± {summary.ka_std:.3g}  "
        f"kd {summary.kd_mean:.6g} ± {summary.kd_std:.3g}"
    )
    return EXIT_OK


def _ensemble_rows(coords, samples, mean, std, lo, hi):
    rows = []
    for j, c in enumerate(coords):
        rows.append([c, mean[j], std[j], lo[j], hi[j]] + list(samples[:, j]))
    return rows


def _cmd_predict(args, cfg, topts, sopts) -> int:
    writer = RunWriter(args.out_dir, "predict", args.seed, cfg)
    try:
        state = load_state(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ens = posterior_predict(state, cfg, n_samples=topts.n_samples, seed=args.seed)
    sample_cols = ",".join("s%03d" % k for k in range(topts.n_samples))
    writer.write_csv(
        "ensemble_btc.csv",
        "t_s,mean,std,min,max," + sample_cols,
        _ensemble_rows(ens.times, ens.btc_samples, ens.btc_mean, ens.btc_std,
                       ens.btc_min, ens.btc_max),
    )
    writer.write_csv(
        "ensemble_ret.csv",
        "x_m,mean,std,min,max," + sample_cols,
        _ensemble_rows(ens.x, ens.ret_samples, ens.ret_mean, ens.ret_std,
                       ens.ret_min, ens.ret_max),
    )
    if state.latent:
        summary = inverse_posterior_summary(state, n_samples=topts.n_samples, seed=args.seed)
        payload = _posterior_payload(summary)
        writer.write_json("posterior.json", payload)
        writer.metrics.update(payload)
    rmse, coverage, _ = _forward_fit_metrics(state, cfg, topts.n_samples, args.seed)
    writer.metrics["btc_rmse_vs_reference"] = rmse
    writer.metrics["envelope_coverage_pct"] = coverage
    writer.finish()
    return EXIT_OK


def _run_self_tests(cfg: ColumnConfig, seed: int):
    """The cheap verification oracles behind the ``check`` subcommand."""
    results = []

    def record(name, passed, detail):
        results.append({"name": name, "passed": bool(passed), "detail": detail})

    # exact parameter gradients of the full six-term objective
    colloc = build_collocation_set(seed=seed, n_interior=150, boundary_split=(40, 40, 40))
    loss = PhysicsLoss(cfg, colloc, PRESETS["balanced"])
    params_c = init_params(DEFAULT_SPEC, 0.3, seed=seed + 1)
    params_s = init_params(DEFAULT_SPEC, 0.3, seed=seed + 2)
    n = DEFAULT_SPEC.param_count
    stacked = np.concatenate([params_c, params_s])

    def objective(vec):
        total, _, _ = loss.value_and_grad(
            vec[:n], vec[n:], cfg.attach, cfg.detach, want_grad=False
        )
        return total

    _, _, grads = loss.value_and_grad(params_c, params_s, cfg.attach, cfg.detach)
    stacked_grad = np.concatenate([grads["g_params_c"], grads["g_params_s"]])
    report = gradient_check(objective, stacked_grad, stacked, n_probes=24, seed=seed)
    record(
        "gradient_check",
        report.max_rel_error < 1e-5,
        f"max relative error {report.max_rel_error:.3g} over {report.n_probes} coordinates",
    )

    # closed-form KL identities
    mu = np.array([0.0, 0.3, -1.2])
    std = np.array([1.0, 0.5, 2.0])
    self_kl = kl_gaussian_diag(mu, std, mu, std)
    expected = np.sum(np.log(1.0 / std) + (std**2 + mu**2) / 2.0 - 0.5)
    against_unit = kl_gaussian_diag(mu, std, 0.0, 1.0)
    split = kl_gaussian_diag(mu[:2], std[:2], 0.0, 1.0) + kl_gaussian_diag(
        mu[2:], std[2:], 0.0, 1.0
    )
    kl_err = max(
        abs(self_kl), abs(against_unit - expected), abs(against_unit - split)
    )
    record("kl_identities", kl_err < 1e-12, f"worst deviation {kl_err:.3g}")

    # Latin hypercube stratification at full scale
    big = build_collocation_set(seed=seed, n_interior=15000)
    strat = stratification_holds(big.interior)
    record("lhs_stratification", strat, f"n={big.interior.shape[0]} one point per stratum")

    # zero-network residual identities
    zero = np.zeros(n)
    _, comps, _ = loss.value_and_grad(zero, zero, cfg.attach, cfg.detach, want_grad=False)
    exact_zero = all(
        comps[k] == 0.0 for k in ("r_pde_c", "r_pde_s", "r_outlet", "r_init_c", "r_init_s")
    )
    record(
        "zero_network_residuals",
        exact_zero and comps["r_inlet"] > 0.0,
        f"PDE/boundary/initial terms {'all zero' if exact_zero else 'nonzero'}, "
        f"inlet misfit {comps['r_inlet']:.3g}",
    )

    # conservation on a short coarse solve
    coarse = cfg.replace(grid_nodes=101, time_step=50.0)
    closure = solve_forward(coarse).mass_audit.relative_closure_error
    record("mass_balance", closure < 1e-3, f"relative closure error {closure:.3g}")
    return results


def _cmd_check(args, cfg, topts, sopts) -> int:
    writer = RunWriter(args.out_dir, "check", args.seed, cfg)
    results = _run_self_tests(cfg, args.seed)
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}: {r['detail']}")
    all_passed = all(r["passed"] for r in results)
    writer.write_json("check_report.json", {"results": results, "passed": all_passed})
    writer.metrics["checks_passed"] = sum(r["passed"] for r in results)
    writer.metrics["checks_total"] = len(results)
    writer.finish()
    return EXIT_OK if all_passed else EXIT_NUMERIC


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; remap to the documented code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nanoflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file (default: built-in defaults)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default=".", help="output directory (created if absent)")

    p = sub.add_parser("solve", help="reference finite-difference solve")
    common(p)
    p.add_argument("--hold-inlet", action="store_true",
                   help="hold the inlet at its peak instead of the pulse schedule")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("synth", help="synthesize a noisy observation dataset")
    common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-forward", help="variational forward training")
    common(p)
    p.set_defaults(func=_cmd_train_forward)

    p = sub.add_parser("invert", help="recover kinetic coefficients from a dataset")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset CSV from `synth`")
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("predict", help="posterior predictive ensembles from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint from training")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("check", help="run the bundled self-tests")
    common(p)
    p.set_defaults(func=_cmd_check)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config is None:
            cfg, topts, sopts = ColumnConfig(), TrainOptions(), SynthOptions()
        else:
            cfg, topts, sopts = load_config(args.config)
        return args.func(args, cfg, topts, sopts)
    except ConfigError as exc:
        print(f"nanoflow: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, TrainingError, FloatingPointError) as exc:
        print(f"nanoflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"nanoflow: io failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
