"""Command-line entry point: ``vharcov <subcommand> [options]``.

Subcommands chain through a shared output directory::

    vharcov generate --out run --seed 7
    vharcov fit-forecast --out run --window 400
    vharcov evaluate --out run
    vharcov backtest --out run --constraints restricted

Settings come from defaults, then an optional ``--config`` file (INI with a
``[run]`` section of flat keys, or a previous run's ``manifest.json``), then
command-line flags. Exit codes: 0 success, 1 invalid input, 2 numerical
failure, 3 file or I/O problem.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as dg
from . import evaluation as ev
from . import factor_model as fm
from . import forecaster as fc
from . import panel_io as pio
from . import portfolio as pf
from .errors import NumericError, ValidationError, ConfigError
from .synthetic import SynthConfig, generate_synthetic

log = logging.getLogger("vharcov")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

PANEL_FILE = "panel.cvp"
CLEAN_FILE = "panel_clean.cvp"
RETURNS_FILE = "returns.rtp"
FACTORS_FILE = "factors.csv"
SECTORS_FILE = "sectors.csv"


@dataclass
class RunConfig:
    out: str = "run"
    panel: str = ""
    returns: str = ""
    factor_spec: str = ""
    sectors: str = ""
    seed: int = 0
    threads: int = 1
    # model
    n_factors: int = 3
    use_log_matrix: bool = True
    estimator: str = "LASSO"
    window: int = 1000
    psd_floor: float = 1e-8
    models: str = "vhar,rw,block_rw,ewma"
    # portfolio
    constraints: str = "GLOBAL"
    rebalance_fraction: float = 1.0
    annualization_days: int = 252
    # diagnostics
    k_max: int = 8
    # synthetic data
    synth_n: int = 30
    synth_k: int = 3
    synth_s: int = 3
    synth_t: int = 600
    synth_persistence: str = "0.35,0.3,0.25"
    synth_beta_d: float = 0.3
    synth_block_strength: float = 0.3
    synth_noise_scale: float = 0.5

    def path(self, name: str, default: str) -> Path:
        value = getattr(self, name)
        return Path(value) if value else Path(self.out) / default

    def model_config(self) -> fc.ModelConfig:
        return fc.ModelConfig(self.n_factors, self.use_log_matrix, self.estimator, self.window,
                              psd_floor=self.psd_floor)

    def model_list(self) -> list[str]:
        kinds = [m.strip().lower() for m in self.models.split(",") if m.strip()]
        bad = [m for m in kinds if m not in fc.MODEL_KINDS]
        if bad:
            raise ConfigError(f"unknown model(s) {bad}; choose from {fc.MODEL_KINDS}")
        return kinds

    def synth_config(self) -> SynthConfig:
        try:
            pers = tuple(float(x) for x in self.synth_persistence.split(","))
        except ValueError as exc:
            raise ConfigError(f"synth_persistence must be three numbers: {self.synth_persistence!r}") from exc
        return SynthConfig(N=self.synth_n, K=self.synth_k, S=self.synth_s, T=self.synth_t, persistence=pers,
                           beta_d=self.synth_beta_d, block_strength=self.synth_block_strength,
                           noise_scale=self.synth_noise_scale)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def load_config(path) -> dict:
    """Flat settings from an INI ``[run]`` section or a manifest's ``config`` block."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    if path.suffix == ".json":
        data = json.loads(path.read_text()).get("config", {})
    else:
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not parser.has_section("run"):
            raise ConfigError(f"{path} has no [run] section")
        data = dict(parser["run"])
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    return {k: _coerce(k, v) for k, v in data.items()}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(load_config(args.config))
    for name in _FIELD_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = _coerce(name, v)
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy
    return {"vharcov": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(cfg: RunConfig, command: str, inputs, outputs) -> Path:
    config = dataclasses.asdict(cfg)
    blob = json.dumps(config, sort_keys=True).encode()
    out = Path(cfg.out)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).exists()},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        "versions": _versions(),
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _load_spec(cfg: RunConfig, panel: pio.CovPanel):
    spec, assets = fm.load_factor_spec(_require(cfg.path("factor_spec", FACTORS_FILE)))
    if tuple(assets) != panel.assets:
        raise ValidationError("factor specification assets do not match the panel")
    return spec


def _load_sectors(cfg: RunConfig, panel: pio.CovPanel):
    return fm.load_sectors(_require(cfg.path("sectors", SECTORS_FILE)), panel.assets)


def _default_panel(cfg: RunConfig) -> Path:
    if cfg.panel:
        return Path(cfg.panel)
    clean = Path(cfg.out) / CLEAN_FILE
    return clean if clean.exists() else Path(cfg.out) / PANEL_FILE


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> list[Path]:
    out = Path(cfg.out)
    panel, rets, spec, sectors, truth = generate_synthetic(cfg.synth_config(), cfg.seed)
    paths = [out / PANEL_FILE, out / RETURNS_FILE, out / FACTORS_FILE, out / SECTORS_FILE]
    pio.save_panel(panel, paths[0])
    pio.save_returns(rets, paths[1])
    fm.save_factor_spec(spec, panel.assets, paths[2])
    fm.save_sectors(sectors, panel.assets, paths[3])
    truth_path = out / "truth_sigma_f.cvp"
    pio.save_panel(pio.CovPanel(panel.dates, spec.names, pio.vech_many(truth.sigma_f)), truth_path)
    print(f"generated {panel.t} days x {panel.n} assets into {out}")
    return paths + [truth_path]


def cmd_clean(cfg: RunConfig) -> list[Path]:
    src = _require(cfg.path("panel", PANEL_FILE))
    panel = pio.load_panel(src)
    cleaned, report = pio.clean_panel(panel)
    out = Path(cfg.out)
    dst = out / CLEAN_FILE
    pio.save_panel(cleaned, dst)
    rep = out / "clean_report.csv"
    with rep.open("w") as fh:
        fh.write("date,fraction_extreme,flagged\n")
        flagged = set(report.flagged_days)
        for t, (d, f) in enumerate(zip(panel.dates, report.fraction_extreme)):
            fh.write(f"{d},{float(f):.10g},{int(t in flagged)}\n")
    print(f"flagged {len(report.flagged_days)} of {panel.t} days")
    return [dst, rep]


def cmd_decompose(cfg: RunConfig) -> list[Path]:
    panel = pio.load_panel(_require(_default_panel(cfg)))
    spec = _load_spec(cfg, panel).subset(cfg.n_factors)
    sectors = _load_sectors(cfg, panel)
    sf, b, eps = fm.decompose_panel(panel.matrices(), spec)
    out = Path(cfg.out)
    fpath = out / f"factor_cov_{cfg.n_factors}f.cvp"
    pio.save_panel(pio.CovPanel(panel.dates, spec.names, pio.vech_many(sf)), fpath)
    bpath = out / f"betas_{cfg.n_factors}f.csv"
    with bpath.open("w") as fh:
        fh.write("date,factor,asset,beta\n")
        for t, d in enumerate(panel.dates):
            for k, name in enumerate(spec.names):
                for i, a in enumerate(panel.assets):
                    fh.write(f"{d},{name},{a},{b[t, k, i]!r}\n")
    ppath = out / f"significance_{cfg.n_factors}f.csv"
    fm.save_pattern(fm.significance_pattern(eps), sectors, ppath)
    print(f"decomposed {panel.t} days with {spec.k} factor(s)")
    return [fpath, bpath, ppath]


def cmd_fit_forecast(cfg: RunConfig) -> list[Path]:
    kinds = cfg.model_list()
    panel = pio.load_panel(_require(_default_panel(cfg)))
    mc = cfg.model_config()
    spec = sectors = rets = None
    if any(k in (fc.VHAR, fc.FHAR, fc.BLOCK_RW) for k in kinds):
        spec = _load_spec(cfg, panel)
    if any(k in (fc.VHAR, fc.BLOCK_RW) for k in kinds):
        sectors = _load_sectors(cfg, panel)
    if fc.EWMA in kinds:
        rets = pio.load_returns(_require(cfg.path("returns", RETURNS_FILE)))
    out = Path(cfg.out)
    written = []
    for kind in kinds:
        fs = fc.rolling_forecast(panel, mc, kind, spec, sectors, rets, threads=cfg.threads)
        path = out / f"forecast_{kind}.cvp"
        pio.save_panel(fs.as_panel(), path)
        written.append(path)
        if fs.fits:
            fpath = out / f"fits_{kind}.csv"
            ev.save_fits(fpath, fs.fits)
            written.append(fpath)
        print(f"{kind}: {len(fs)} forecasts")
    return written


def _forecast_files(out: Path) -> dict:
    files = {p.stem[len("forecast_"):]: p for p in sorted(out.glob("forecast_*.cvp"))}
    if not files:
        raise FileNotFoundError(f"no forecast_*.cvp files in {out}; run fit-forecast first")
    return files


def _rw_baseline(fs: fc.ForecastSet, panel: pio.CovPanel) -> fc.ForecastSet:
    pos = np.searchsorted(panel.dates, fs.dates)
    if np.any(pos < 1):
        raise ValidationError("random-walk baseline needs the day before the first forecast")
    return fc.ForecastSet(fs.dates, pio.unvech_many(panel.mats[pos - 1], panel.n), fc.RW, panel.assets)


def _as_forecast_set(p: pio.CovPanel, kind: str) -> fc.ForecastSet:
    return fc.ForecastSet(p.dates, p.matrices(), kind, p.assets)


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    out = Path(cfg.out)
    panel = pio.load_panel(_require(_default_panel(cfg)))
    reports = {}
    fpanel = None
    for kind, path in _forecast_files(out).items():
        fs = _as_forecast_set(pio.load_panel(path), kind)
        actual = panel
        if fs.sigma_hat.shape[-1] != panel.n:
            if fpanel is None:
                fpanel = fc.factor_panel(panel, _load_spec(cfg, panel).subset(fs.sigma_hat.shape[-1]))
            actual = fpanel
        reports[kind] = ev.score(fs, actual, _rw_baseline(fs, actual))
    spath, rpath = out / "scores.csv", out / "ratios.csv"
    ev.save_scores(spath, reports)
    ev.save_ratio_table(rpath, reports)
    written = [spath, rpath]
    for kind in reports:
        fits = out / f"fits_{kind}.csv"
        if fits.exists():
            sel = ev.selection_stats(ev.load_fits(fits))
            sel_path = out / f"selection_{kind}.csv"
            ev.save_selection(sel_path, sel)
            written.append(sel_path)
    print(f"{'model':<10}{'avg_l2':>14}{'ratio_to_rw':>14}")
    for kind, rep in reports.items():
        print(f"{kind:<10}{rep.avg_l2:>14.6g}{rep.ratio_to_rw:>14.4f}")
    return written


def cmd_backtest(cfg: RunConfig) -> list[Path]:
    out = Path(cfg.out)
    panel = pio.load_panel(_require(_default_panel(cfg)))
    rets = pio.load_returns(_require(cfg.path("returns", RETURNS_FILE)))
    cons = pf.ConstraintSet.from_name(cfg.constraints)
    bcfg = pf.BacktestConfig(cfg.rebalance_fraction, cfg.annualization_days)
    reports = {}
    written = []
    tag = cons.kind.lower()
    for kind, path in _forecast_files(out).items():
        fp = pio.load_panel(path)
        if fp.n != panel.n:
            continue  # factor-only forecasts do not define asset weights
        res = pf.backtest(_as_forecast_set(fp, kind), rets, panel, cons, bcfg)
        reports[kind] = res.report
        wpath = out / f"weights_{kind}_{tag}.csv"
        pf.save_weights(wpath, res, panel.assets)
        written.append(wpath)
    rpath = out / f"backtest_{tag}.csv"
    pf.save_report(rpath, reports)
    print(pf.format_report(reports))
    return [rpath] + written


def _return_residuals(rets: np.ndarray, b: np.ndarray, W: np.ndarray) -> np.ndarray:
    f = rets @ W
    return rets - np.einsum("tk,tki->ti", f, b)


def cmd_diagnose(cfg: RunConfig) -> list[Path]:
    out = Path(cfg.out)
    panel = pio.load_panel(_require(_default_panel(cfg)))
    spec = _load_spec(cfg, panel)
    rets = pio.load_returns(_require(cfg.path("returns", RETURNS_FILE)))
    pos = np.searchsorted(rets.dates, panel.dates)
    if np.any(pos >= len(rets)) or np.any(rets.dates[np.minimum(pos, len(rets) - 1)] != panel.dates):
        raise ValidationError("returns panel must cover every covariance panel date")
    r = rets.returns[pos]
    sub = spec.subset(cfg.n_factors)
    _, b, _ = fm.decompose_panel(panel.matrices(), sub)
    series = b.reshape(panel.t, -1)
    labels = [f"{k}:{a}" for k in sub.names for a in panel.assets]
    est = {m: dg.estimate_many(series, m) for m in (dg.GPH, dg.LOCAL_WHITTLE)}
    dpath = out / f"d_estimates_{cfg.n_factors}f.csv"
    dg.save_d_estimates(dpath, labels, est)
    k_max = min(cfg.k_max, panel.t - 1, panel.n - 1)
    scans = {}
    for k in (1, 3, 5, 7):
        if k > spec.k:
            break
        s = spec.subset(k)
        _, bk, _ = fm.decompose_panel(panel.matrices(), s)
        scans[f"{k}F"] = dg.omitted_factor_scan(_return_residuals(r, bk, s.weights), k_max)
    xpath = out / "xi_scan.csv"
    dg.save_xi(xpath, scans)
    print(f"median d (GPH) {np.nanmedian(est[dg.GPH]):.3f}, (local Whittle) {np.nanmedian(est[dg.LOCAL_WHITTLE]):.3f}")
    for name, scan in scans.items():
        print(f"{name}: omitted factors detected = {scan.detected_k}")
    return [dpath, xpath]


COMMANDS = {
    "generate": (cmd_generate, "simulate a synthetic panel with returns, factors and sectors"),
    "clean": (cmd_clean, "flag and replace contaminated days"),
    "decompose": (cmd_decompose, "factor decomposition and residual significance pattern"),
    "fit-forecast": (cmd_fit_forecast, "rolling one-step-ahead forecasts"),
    "evaluate": (cmd_evaluate, "l2 errors and ratios to the random walk"),
    "backtest": (cmd_backtest, "minimum-variance portfolio backtest"),
    "diagnose": (cmd_diagnose, "long memory of loadings and omitted-factor scan"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--config", help="INI file with a [run] section, or a manifest JSON")
    g.add_argument("--out", help="output directory (default: run)")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int)
    g.add_argument("--panel", help="covariance panel (.cvp binary or .csv)")
    g.add_argument("--returns", help="returns panel (.rtp binary or .csv)")
    g.add_argument("--factor-spec", dest="factor_spec", help="factor weights CSV")
    g.add_argument("--sectors", help="asset-to-sector CSV")
    m = common.add_argument_group("model")
    m.add_argument("--factors", dest="n_factors", type=int, choices=(1, 3, 5, 7))
    m.add_argument("--estimator", type=str.upper, choices=("LASSO", "ADALASSO"))
    m.add_argument("--log-matrix", dest="use_log_matrix", choices=("on", "off"))
    m.add_argument("--window", type=int)
    m.add_argument("--models", help="comma-separated subset of " + ",".join(fc.MODEL_KINDS))
    p = common.add_argument_group("portfolio")
    p.add_argument("--constraints", choices=("global", "restricted", "long-only"))
    p.add_argument("--rebalance-fraction", dest="rebalance_fraction", type=float)
    s = common.add_argument_group("synthetic data")
    s.add_argument("--n", dest="synth_n", type=int)
    s.add_argument("--k", dest="synth_k", type=int)
    s.add_argument("--s", dest="synth_s", type=int)
    s.add_argument("--t", dest="synth_t", type=int)
    s.add_argument("--noise-scale", dest="synth_noise_scale", type=float)
    common.add_argument("--k-max", dest="k_max", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vharcov", description="Factor-based realized covariance forecasting")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        func = COMMANDS[args.command][0]
        outputs = func(cfg)
        inputs = [p for p in (cfg.path("panel", PANEL_FILE), cfg.path("returns", RETURNS_FILE),
                              cfg.path("factor_spec", FACTORS_FILE), cfg.path("sectors", SECTORS_FILE))
                  if args.command != "generate"]
        write_manifest(cfg, args.command, inputs, outputs)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
