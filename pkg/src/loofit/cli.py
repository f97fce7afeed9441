"""Command-line client for the loofit service.

The CLI never computes anything itself: it builds a request, sends it to
the FastAPI app (in process by default, or to a running server given
--server), and writes the response to files. Exit codes: 0 success,
2 usage or configuration error, 3 numerical failure, 4 I/O failure.

Stochastic subcommands require an explicit --seed (or a 'seed' key in the
--config file); flag values override config-file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import httpx

from .experiments import render_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def make_client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # starlette's test client is the supported sync ASGI bridge; its
        # deprecation chatter is irrelevant to CLI users
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def call(client, method: str, path: str, payload=None) -> dict:
    try:
        if method == "get":
            resp = client.get(path)
        else:
            resp = client.post(path, json=payload)
    except httpx.HTTPError as e:
        raise CliError(EXIT_IO, f"cannot reach service: {e}")
    if resp.status_code == 200:
        return resp.json()
    try:
        detail = resp.json().get("detail")
    except Exception:
        detail = resp.text
    kind = detail.get("kind") if isinstance(detail, dict) else None
    message = detail.get("message") if isinstance(detail, dict) else str(detail)
    if resp.status_code == 422 or kind == "config":
        raise CliError(EXIT_USAGE, f"invalid request: {message}")
    if kind == "numerical":
        raise CliError(EXIT_NUMERICAL, f"numerical failure: {message}")
    raise CliError(EXIT_NUMERICAL, f"service error {resp.status_code}: {message}")


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read config file: {e}")
    except json.JSONDecodeError as e:
        raise CliError(EXIT_USAGE, f"config file is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise CliError(EXIT_USAGE, "config file must hold a JSON object")
    return cfg


class Options:
    """Flag values merged over config-file values; flags win."""

    def __init__(self, args, config: dict):
        self.args = args
        self.config = config

    def get(self, key: str, default=None):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        return self.config.get(key, default)

    def require_seed(self) -> int:
        seed = self.get("seed")
        if seed is None:
            raise CliError(EXIT_USAGE, "missing required --seed (or 'seed' in --config)")
        return int(seed)


def write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {path}: {e}")


def out_dir(opts: Options) -> Path:
    return Path(opts.get("out", "."))


def parse_range(text) -> tuple[float, float]:
    if isinstance(text, (list, tuple)):
        a, b = text
        return float(a), float(b)
    parts = text.split(",")
    if len(parts) != 2:
        raise CliError(EXIT_USAGE, f"expected 'lo,hi' range, got {text!r}")
    return float(parts[0]), float(parts[1])


def parse_outliers(text) -> tuple[int, float]:
    """Parse 'k=10,K=5' into (count, magnitude)."""
    count, magnitude = None, None
    for part in str(text).split(","):
        key, _, value = part.partition("=")
        if key.strip() == "k":
            count = int(value)
        elif key.strip() == "K":
            magnitude = float(value)
        else:
            raise CliError(EXIT_USAGE, f"bad --outliers component {part!r}, expected k=..,K=..")
    if count is None or magnitude is None:
        raise CliError(EXIT_USAGE, "--outliers needs both k= and K=, e.g. k=10,K=5")
    return count, magnitude


def theta_payload(opts: Options, need_sigma_eps: bool) -> dict:
    tau = opts.get("tau")
    kappa = opts.get("kappa")
    if tau is None or kappa is None:
        raise CliError(EXIT_USAGE, "missing required --tau / --kappa")
    payload = {"tau": float(tau), "kappa": float(kappa)}
    sigma_eps = opts.get("sigma_eps")
    if sigma_eps is not None:
        payload["sigma_eps"] = float(sigma_eps)
    elif need_sigma_eps:
        raise CliError(EXIT_USAGE, "latent models need --sigma-eps")
    beta = opts.get("beta")
    if beta is not None:
        payload["beta"] = [float(b) for b in str(beta).split(",")]
    return payload


def lattice_payload(opts: Options) -> dict:
    return {
        "nx": int(opts.get("nx", 20)),
        "ny": int(opts.get("ny", 22)),
        "x_range": parse_range(opts.get("x_range", "0,10")),
        "y_range": parse_range(opts.get("y_range", "0,10")),
    }


def read_dataset_file(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read dataset: {e}")
    except json.JSONDecodeError as e:
        raise CliError(EXIT_USAGE, f"dataset file is not valid JSON: {e}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_version(client, opts: Options) -> int:
    info = call(client, "get", "/version")
    print(f"{info['name']} {info['version']}")
    return EXIT_OK


def cmd_score(client, opts: Options) -> int:
    rule_text = opts.get("rule", "crps")
    parts = str(rule_text).split(":")
    rule = {"kind": parts[0]}
    if len(parts) == 2:
        rule["cutoff"] = float(parts[1])
    payload = {
        "rule": rule,
        "items": [{"mu": float(opts.get("mu", 0.0)),
                   "sigma": float(opts.get("sigma", 1.0)),
                   "y": float(opts.get("y", 0.0))}],
        "negate": bool(opts.get("negate", False)),
    }
    resp = call(client, "post", "/scores/evaluate", payload)
    print(repr(resp["values"][0]))
    return EXIT_OK


def cmd_simulate(client, opts: Options) -> int:
    seed = opts.require_seed()
    kind = str(opts.get("model", "direct"))
    need_sigma = kind != "direct"
    payload = {
        "model": {
            "kind": kind,
            "lattice": lattice_payload(opts),
            "obs_count": int(opts.get("obs_count", 300)),
            "test_count": int(opts.get("test_count", 60)),
            "with_covariates": bool(opts.get("with_covariates", False)),
        },
        "theta": theta_payload(opts, need_sigma),
        "n_replicates": int(opts.get("reps", 10)),
        "seed": seed,
    }
    outliers = opts.get("outliers")
    if outliers is not None:
        count, magnitude = parse_outliers(outliers)
        payload["outliers"] = {"count": count, "magnitude": magnitude}
    resp = call(client, "post", "/datasets/simulate", payload)
    out = out_dir(opts)
    write_text(out / "dataset.json", json.dumps(resp["dataset"], indent=1) + "\n")

    from .gmrf import dataset_from_dict, write_dataset_csv

    ds = dataset_from_dict(resp["dataset"])
    try:
        write_dataset_csv(out / "dataset.csv", ds)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write dataset.csv: {e}")
    print(f"marginal_sd: {resp['marginal_sd']:.6g}")
    print(f"practical_range: {resp['practical_range']:.6g}")
    print(f"wrote {out / 'dataset.json'} ({ds.n_replicates} replicates, "
          f"{len(ds.outlier_log)} outliers)")
    return EXIT_OK


def cmd_fit(client, opts: Options) -> int:
    data_path = opts.get("data")
    if not data_path:
        raise CliError(EXIT_USAGE, "missing required --data")
    method = opts.get("method")
    if not method:
        raise CliError(EXIT_USAGE, "missing required --method")
    payload = {"dataset": read_dataset_file(data_path), "method": str(method)}
    if opts.get("tau") is not None and opts.get("kappa") is not None:
        payload["init"] = theta_payload(opts, need_sigma_eps=False)
    options = {}
    for key in ("xtol", "ftol", "max_evals"):
        if opts.get(key) is not None:
            options[key] = opts.get(key)
    if options:
        payload["options"] = options
    resp = call(client, "post", "/fits", payload)
    out = out_dir(opts)
    kind, _, rule = resp["method"].partition(":")
    rows = [
        (kind, rule, name, value, "estimate", resp["wall_time_s"],
         resp["n_evaluations"], int(resp["converged"]))
        for name, value in resp["estimates"].items()
    ]
    header = ("method", "rule", "parameter", "value", "kind", "wall_time_s",
              "n_evaluations", "converged")
    write_text(out / "fit.csv", render_csv(header, rows))
    report = [
        "loofit fit report",
        f"method: {resp['method']}",
        f"converged: {resp['converged']}",
        f"objective_value: {resp['objective_value']!r}",
        f"n_evaluations: {resp['n_evaluations']}",
        f"wall_time_s: {resp['wall_time_s']:.3f}",
    ]
    report.extend(f"{k}: {v!r}" for k, v in resp["estimates"].items())
    report.extend(f"{k}: {v!r}" for k, v in resp["natural"].items())
    write_text(out / "fit_report.txt", "\n".join(report) + "\n")
    for line in report[1:]:
        print(line)
    return EXIT_OK


_STUDY_PRESETS = {
    "fig2": {"model_kind": "direct", "outlier_count": 0},
    "fig2-k5": {"model_kind": "direct", "outlier_count": 5, "outlier_magnitude": 5.0},
    "fig2-k10": {"model_kind": "direct", "outlier_count": 10, "outlier_magnitude": 5.0},
    "latent": {"model_kind": "latent", "sigma_eps": 0.5},
    "nonstationary": {"model_kind": "latent-nonstationary", "sigma_eps": 0.5},
    "custom": {},
}


def cmd_study(client, opts: Options) -> int:
    seed = opts.require_seed()
    preset_name = str(opts.get("preset", "custom"))
    if preset_name not in _STUDY_PRESETS:
        raise CliError(EXIT_USAGE,
                       f"unknown preset {preset_name!r}; valid: {', '.join(_STUDY_PRESETS)}")
    preset = dict(_STUDY_PRESETS[preset_name])
    model_kind = str(opts.get("model", preset.get("model_kind", "direct")))
    theta = {
        "tau": float(opts.get("tau", 0.16)),
        "kappa": float(opts.get("kappa", 1.75)),
    }
    sigma_eps = opts.get("sigma_eps", preset.get("sigma_eps"))
    if sigma_eps is not None:
        theta["sigma_eps"] = float(sigma_eps)
    elif model_kind != "direct":
        raise CliError(EXIT_USAGE, "latent models need --sigma-eps")
    methods = opts.get("methods")
    payload = {
        "model_kind": model_kind,
        "theta": theta,
        "lattice": lattice_payload(opts),
        "n_replicates": int(opts.get("replicates", 10)),
        "n_repetitions": int(opts.get("repetitions", 100)),
        "outlier_count": int(opts.get("outlier_count", preset.get("outlier_count", 0))),
        "outlier_magnitude": float(opts.get("outlier_magnitude",
                                            preset.get("outlier_magnitude", 5.0))),
        "seed": seed,
        "threads": int(opts.get("threads", 1)),
        "obs_count": int(opts.get("obs_count", 300)),
        "test_count": int(opts.get("test_count", 60)),
        "with_covariates": bool(opts.get("with_covariates", False)),
    }
    if methods:
        payload["methods"] = [m.strip() for m in str(methods).split(",")]
    resp = call(client, "post", "/studies/estimation", payload)
    out = out_dir(opts)
    write_text(out / "estimates.csv", render_csv(resp["estimates_header"], resp["estimates"]))
    write_text(out / "timings.csv", render_csv(resp["timings_header"], resp["timings"]))
    write_text(out / "summary.csv", render_csv(resp["summary_header"], resp["summary"]))
    write_text(out / "manifest.txt", resp["manifest"])
    print(f"wrote {out / 'estimates.csv'} ({len(resp['estimates'])} rows)")
    return EXIT_OK


def cmd_godambe(client, opts: Options) -> int:
    seed = opts.require_seed()
    thetas = opts.get("theta")
    if not thetas:
        raise CliError(EXIT_USAGE, "missing required --theta tau,kappa (repeatable)")
    if isinstance(thetas, str):
        thetas = [thetas]
    theta_list = []
    for text in thetas:
        parts = str(text).split(",")
        if len(parts) != 2:
            raise CliError(EXIT_USAGE, f"--theta expects 'tau,kappa', got {text!r}")
        theta_list.append({"tau": float(parts[0]), "kappa": float(parts[1])})
    payload = {
        "theta_list": theta_list,
        "lattice": lattice_payload(opts),
        "n_sims": int(opts.get("nsims", 1000)),
        "n_replicates": int(opts.get("replicates", 10)),
        "seed": seed,
        "fd_step": float(opts.get("fd_step", 1e-4)),
    }
    methods = opts.get("methods")
    if methods:
        payload["methods"] = [m.strip() for m in str(methods).split(",")]
    resp = call(client, "post", "/studies/godambe", payload)
    out = out_dir(opts)
    write_text(out / "godambe.csv", render_csv(resp["header"], resp["rows"]))
    # same numbers in the long row format used by fit.csv
    method_labels = resp["header"][2:]
    long_rows = []
    report_lines = ["loofit godambe report"]
    for row in resp["rows"]:
        theta_label, parameter = row[0], row[1]
        report_lines.append(f"{theta_label} {parameter}:")
        for label, sd in zip(method_labels, row[2:]):
            kind_, _, rule = label.partition(":")
            long_rows.append((kind_, rule, parameter, sd, "asymptotic_sd",
                              "", "", ""))
            report_lines.append(f"  {label}: {sd!r}")
    header = ("method", "rule", "parameter", "value", "kind", "wall_time_s",
              "n_evaluations", "converged")
    write_text(out / "godambe_rows.csv", render_csv(header, long_rows))
    write_text(out / "godambe_report.txt", "\n".join(report_lines) + "\n")
    write_text(out / "manifest.txt", resp["manifest"])
    print(f"wrote {out / 'godambe.csv'} ({len(resp['rows'])} rows)")
    return EXIT_OK


def cmd_benchmark(client, opts: Options) -> int:
    seed = opts.require_seed()
    sizes_text = opts.get("sizes", "400,1600,6400")
    if isinstance(sizes_text, (list, tuple)):
        sizes = [int(s) for s in sizes_text]
    else:
        sizes = [int(s) for s in str(sizes_text).split(",")]
    payload = {
        "sizes": sizes,
        "theta": {"tau": float(opts.get("tau", 0.16)), "kappa": float(opts.get("kappa", 1.75))},
        "mode": str(opts.get("mode", "eval")),
        "n_timing_reps": int(opts.get("reps", 5)),
        "n_replicates": int(opts.get("replicates", 10)),
        "seed": seed,
    }
    methods = opts.get("methods")
    if methods:
        payload["methods"] = [m.strip() for m in str(methods).split(",")]
    resp = call(client, "post", "/studies/benchmark", payload)
    out = out_dir(opts)
    write_text(out / "runtime.csv", render_csv(resp["header"], resp["rows"]))
    write_text(out / "manifest.txt", resp["manifest"])
    for label, slope in resp["slopes"].items():
        print(f"slope[{label}]: {slope:.3f}")
    return EXIT_OK


def cmd_predictive(client, opts: Options) -> int:
    seed = opts.require_seed()
    payload = {
        "theta": {
            "tau": float(opts.get("tau", 0.16)),
            "kappa": float(opts.get("kappa", 1.75)),
            "sigma_eps": float(opts.get("sigma_eps", 0.5)),
        },
        "lattice": lattice_payload(opts),
        "model_kind": str(opts.get("model", "latent")),
        "n_replicates": int(opts.get("replicates", 10)),
        "n_repetitions": int(opts.get("repetitions", 100)),
        "outlier_count": int(opts.get("outlier_count", 0)),
        "outlier_magnitude": float(opts.get("outlier_magnitude", 5.0)),
        "obs_count": int(opts.get("obs_count", 300)),
        "test_count": int(opts.get("test_count", 60)),
        "seed": seed,
        "threads": int(opts.get("threads", 1)),
    }
    resp = call(client, "post", "/studies/predictive", payload)
    out = out_dir(opts)
    write_text(out / "predictive.csv", render_csv(resp["header"], resp["rows"]))
    write_text(out / "manifest.txt", resp["manifest"])
    print(f"wrote {out / 'predictive.csv'} ({len(resp['rows'])} rows)")
    return EXIT_OK


def cmd_serve(opts: Options) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=str(opts.get("host", "127.0.0.1")),
                port=int(opts.get("port", 8000)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loofit",
        description="Estimate lattice GMRF parameters by leave-one-out scoring rules.",
    )
    parser.add_argument("--server", help="base URL of a running loofit service "
                                         "(default: run the service in process)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, seeded=False, heavy=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--out", help="output directory (default: current)")
        if seeded:
            p.add_argument("--seed", type=int, help="random seed (required)")
        if heavy:
            p.add_argument("--threads", type=int, help="worker processes (default 1)")
        return p

    sub.add_parser("version", help="print the package version")

    p = add("score", "evaluate a scoring rule for one Gaussian predictive")
    p.add_argument("--rule", help="log | crps | scrps | root | rcrps:<c>")
    p.add_argument("--mu", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--y", type=float)
    p.add_argument("--negate", action="store_true", default=None,
                   help="report the negatively oriented value")

    p = add("simulate", "simulate a dataset and write dataset.json/.csv", seeded=True)
    p.add_argument("--model", help="direct | latent | latent-nonstationary")
    p.add_argument("--tau", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--sigma-eps", dest="sigma_eps", type=float)
    p.add_argument("--beta", help="comma-separated regression coefficients")
    p.add_argument("--with-covariates", dest="with_covariates", action="store_true",
                   default=None)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--x-range", dest="x_range")
    p.add_argument("--y-range", dest="y_range")
    p.add_argument("--reps", type=int, help="number of replicates")
    p.add_argument("--outliers", help="contamination plan, e.g. k=10,K=5")
    p.add_argument("--obs-count", dest="obs_count", type=int)
    p.add_argument("--test-count", dest="test_count", type=int)

    p = add("fit", "fit one method to a dataset file")
    p.add_argument("--data", help="dataset.json produced by simulate")
    p.add_argument("--method", help=f"one of: ml, loos:<rule>")
    p.add_argument("--tau", type=float, help="optional initial tau")
    p.add_argument("--kappa", type=float, help="optional initial kappa")
    p.add_argument("--sigma-eps", dest="sigma_eps", type=float)
    p.add_argument("--beta", help="optional initial beta, comma-separated")
    p.add_argument("--xtol", type=float)
    p.add_argument("--ftol", type=float)
    p.add_argument("--max-evals", dest="max_evals", type=int)

    p = add("study", "repeated-estimation study; writes estimates/timings/summary csv",
            seeded=True, heavy=True)
    p.add_argument("--preset", help=f"one of: {', '.join(_STUDY_PRESETS)}")
    p.add_argument("--model", help="direct | latent | latent-nonstationary")
    p.add_argument("--tau", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--sigma-eps", dest="sigma_eps", type=float)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--outlier-count", dest="outlier_count", type=int)
    p.add_argument("--outlier-magnitude", dest="outlier_magnitude", type=float)
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--x-range", dest="x_range")
    p.add_argument("--y-range", dest="y_range")
    p.add_argument("--obs-count", dest="obs_count", type=int)
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--with-covariates", dest="with_covariates", action="store_true",
                   default=None)

    p = add("godambe", "asymptotic-sd table; writes godambe.csv", seeded=True)
    p.add_argument("--theta", action="append", help="tau,kappa (repeatable)")
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--nsims", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--fd-step", dest="fd_step", type=float)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--x-range", dest="x_range")
    p.add_argument("--y-range", dest="y_range")

    p = add("benchmark", "runtime scaling of evaluations/fits; writes runtime.csv",
            seeded=True)
    p.add_argument("--sizes", help="comma-separated lattice sizes, e.g. 400,1600,6400")
    p.add_argument("--mode", help="eval | fit")
    p.add_argument("--reps", type=int, help="timing repetitions per point")
    p.add_argument("--replicates", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--methods", help="comma-separated method list")

    p = add("predictive", "root-LOOS vs ML predictive quality; writes predictive.csv",
            seeded=True, heavy=True)
    p.add_argument("--model", help="latent | latent-nonstationary")
    p.add_argument("--tau", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--sigma-eps", dest="sigma_eps", type=float)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--outlier-count", dest="outlier_count", type=int)
    p.add_argument("--outlier-magnitude", dest="outlier_magnitude", type=float)
    p.add_argument("--obs-count", dest="obs_count", type=int)
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)

    p = sub.add_parser("serve", help="run the service under uvicorn")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--config", help="JSON config file; flags override its keys")

    return parser


_COMMANDS = {
    "version": cmd_version,
    "score": cmd_score,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "study": cmd_study,
    "godambe": cmd_godambe,
    "benchmark": cmd_benchmark,
    "predictive": cmd_predictive,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = Options(args, load_config(getattr(args, "config", None)))
        if args.command == "serve":
            return cmd_serve(opts)
        client = make_client(args.server)
        try:
            return _COMMANDS[args.command](client, opts)
        finally:
            client.close()
    except CliError as e:
        print(f"loofit: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"loofit: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
