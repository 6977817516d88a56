"""Command-line driver: runs experiments from config files and writes audited CSV.

Exit status: 0 on success, 1 when an acceptance-tagged run (a config with a
``tolerance``) misses its tolerance or ``verify`` finds a mismatch, 2 on usage
or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from . import laws as _laws
from .normalizers import normalizer_table, solve_a_n, write_normalizer_csv
from .predictors import (gamma_threshold, rozovskii_predictor, transition_scan, x_for_gamma, VARIANTS)

__all__ = ["ConfigError", "ExperimentConfig", "parse_config_text", "load_config", "run", "main",
           "transition_scan"]

EXPERIMENTS = ("norms", "exact", "predict", "scan", "mc", "overshoot", "zrp")
X_RULES = ("absolute", "a_n", "gamma", "gamma_prime", "gamma_tilde")


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        self.message = message
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class ExperimentConfig:
    experiment: str
    law: dict
    n: list
    x_rule: str = "absolute"
    x_values: list = field(default_factory=list)
    variant: str = "integral_general"
    seed: int = 0
    streams: int = 1
    budget: int = 100_000
    out: Optional[str] = None
    tolerance: Optional[float] = None
    options: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}", key="experiment")
        if not self.n:
            raise ConfigError("the n grid is empty", key="n")
        if any(int(v) < 1 for v in self.n):
            raise ConfigError("n values must be positive integers", key="n")
        if self.experiment != "norms" and not self.x_values:
            raise ConfigError("the x grid is empty", key="x_values")
        if self.x_rule not in X_RULES:
            raise ConfigError(f"x_rule must be one of {X_RULES}", key="x_rule")
        if self.x_rule == "gamma" and self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}", key="variant")
        if "family" not in self.law and self.experiment != "zrp":
            raise ConfigError("law.family is required", key="law.family")
        if self.streams < 1 or self.budget < 1:
            raise ConfigError("streams and budget must be positive", key="budget")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


_TOP_KEYS = {"experiment", "n", "x_rule", "x_values", "variant", "seed", "streams", "budget", "out",
             "tolerance"}


def _value(text: str, line: int):
    text = text.strip()
    if not text:
        raise ConfigError("missing value", line)
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if text[0] in "[{\"":
            raise ConfigError(f"malformed value {text!r}", line)
        return text


def _from_mapping(data: dict, lines: Optional[dict] = None) -> ExperimentConfig:
    lines = lines or {}
    kw: dict[str, Any] = {"law": {}, "options": {}}
    for key, val in data.items():
        if key == "law" and isinstance(val, dict):
            kw["law"].update(val)
        elif key == "options" and isinstance(val, dict):
            kw["options"].update(val)
        elif key.startswith("law."):
            kw["law"][key[4:]] = val
        elif key.startswith("options."):
            kw["options"][key[8:]] = val
        elif key in _TOP_KEYS:
            kw[key] = val
        else:
            raise ConfigError(f"unknown key {key!r}", lines.get(key))
    if "experiment" not in kw:
        raise ConfigError("missing 'experiment'")
    if "n" not in kw:
        raise ConfigError("missing 'n'")
    for key in ("n", "x_values"):
        if key in kw and not isinstance(kw[key], list):
            kw[key] = [kw[key]]
    try:
        kw["n"] = [int(v) for v in kw["n"]]
        for key in ("seed", "streams", "budget"):
            if key in kw:
                kw[key] = int(kw[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad integer: {exc}", lines.get("n"), "n")
    cfg = ExperimentConfig(**kw)
    try:
        cfg.validate()
    except ConfigError as exc:
        if exc.line is None and exc.key in lines:
            raise ConfigError(exc.message, lines[exc.key], exc.key) from None
        raise
    return cfg


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the key-value format (``key = value``, ``#`` comments, dotted law keys) or JSON."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno)
        return _from_mapping(data)
    data, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", lineno)
        key, val = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError("empty key", lineno)
        if key in data:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        data[key] = _value(val, lineno)
        lines[key] = lineno
    return _from_mapping(data, lines)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def _build_law(spec: dict):
    spec = dict(spec)
    family = spec.pop("family")
    K_cap = int(spec.pop("K_cap", _laws.DEFAULT_K_CAP))
    return _laws.make_law(family, spec, K_cap=K_cap)


# ---------------------------------------------------------------------------
# Row computations (shared by run and verify)
# ---------------------------------------------------------------------------


def _x_of(cfg: ExperimentConfig, law, n: int, v: float) -> float:
    if cfg.x_rule == "absolute":
        return float(v)
    if cfg.x_rule == "a_n":
        return float(v) * solve_a_n(law, n)
    if cfg.x_rule == "gamma":
        if not math.isfinite(law.beta):
            raise ConfigError("gamma-parameterised x needs a regularly varying right tail")
        return x_for_gamma(law, n, float(v), cfg.variant)
    raise ConfigError(f"x_rule {cfg.x_rule} does not apply to {cfg.experiment}")


def _row_exact(cfg, law, n, v):
    from .oracle import decompose, default_window, p_sum_eq, sum_distribution

    x = _x_of(cfg, law, n, v)
    kernel = cfg.options.get("kernel", "auto")
    d = decompose(law, n, x, kernel=kernel)
    win = default_window(law, n, x)
    dist = sum_distribution(law, n, None, win, kernel=kernel)
    return {"n": n, "x": x, "p_geq": d.total, "p_eq": p_sum_eq(law, n, int(round(x)), window=win, kernel=kernel),
            "gauss_part": d.gauss_part, "jump_part": d.jump_part, "s_exact": d.s_exact, "r": d.r,
            "error_bound": dist.truncation_error_bound}


def _row_predict(cfg, law, n, v):
    from .oracle import decompose

    x = _x_of(cfg, law, n, v)
    d = decompose(law, n, x, kernel=cfg.options.get("kernel", "auto"))
    pred = rozovskii_predictor(law, n, x)
    gamma, s_pred = math.nan, math.nan
    if math.isfinite(law.beta) and law.beta >= 2:
        t = gamma_threshold(law, n, x, cfg.variant)
        gamma, s_pred = t.gamma, t.predicted_s
    row = {"n": n, "x": x, "exact": d.total, "predictor": pred, "ratio": pred / d.total if d.total > 0 else math.nan,
           "gamma": gamma, "s_pred": s_pred, "s_exact": d.s_exact}
    if cfg.tolerance is not None:
        row["pass"] = int(abs(row["ratio"] - 1.0) <= cfg.tolerance)
    return row


def _row_scan(cfg, law, n, v):
    from .oracle import decompose

    x = _x_of(cfg, law, n, v)
    local = cfg.variant.startswith("local")
    kernel = cfg.options.get("kernel", "auto")
    d = decompose(law, n, x, local=local, kernel=kernel)
    t = gamma_threshold(law, n, x, cfg.variant)
    pred = rozovskii_predictor(law, n, x)
    row = {"n": n, "x": x, "exact": d.total, "predictor": pred, "ratio": pred / d.total if d.total > 0 else math.nan,
           "gamma": t.gamma, "s_pred": t.predicted_s, "s_exact": d.s_exact}
    if cfg.tolerance is not None:
        row["pass"] = int(abs(row["s_exact"] - row["s_pred"]) <= cfg.tolerance)
    return row


def _row_mc(cfg, law, n, v):
    from .montecarlo import estimate_big_jump, estimate_gaussian_window

    x = _x_of(cfg, law, n, v)
    w = estimate_gaussian_window(law, n, x, cfg.budget, seed=cfg.seed, streams=cfg.streams)
    b = estimate_big_jump(law, n, x, cfg.budget, seed=cfg.seed + 1, streams=cfg.streams)
    return {"n": n, "x": x, "window_estimate": w.estimate, "window_std_error": w.std_error,
            "jump_estimate": b.estimate, "jump_std_error": b.std_error, "bias_bound": b.bias_bound,
            "n_samples": w.n_samples, "seed": cfg.seed, "streams": cfg.streams}


def _row_overshoot(cfg, law, n, v):
    from .montecarlo import overshoot_experiment

    x = _x_of(cfg, law, n, v)
    regime = cfg.options.get("regime", "max_gt_r")
    rep = overshoot_experiment(law, n, x, regime, cfg.budget, seed=cfg.seed)
    return {"n": n, "x": x, "regime": regime, "ks_exp_inverse_lambda": rep.ks_exp_inverse_lambda,
            "ks_exp_sqrt_x_over_r": rep.ks_exp_sqrt_x_over_r, "best_scale": rep.best_scale,
            "ks_pareto": rep.ks_pareto, "tail_ratio_max_rel_error": rep.tail_ratio_max_rel_error,
            "unresolved_mass": rep.unresolved_mass, "seed": cfg.seed}


def _row_zrp(cfg, law, L, v):
    from . import zrp

    b = float(cfg.law["b"])
    g = cfg.law.get("g", "power")
    K_cap = int(cfg.law.get("K_cap", 1 << 18))
    probe = zrp.ZrpModel(L, 0, b, g, K_cap=K_cap)
    if cfg.x_rule == "absolute":
        N = int(v)
    elif cfg.x_rule == "gamma_prime":
        N = int(round(zrp.N_of_gamma_prime(probe, L, float(v), "b_gt_3" if b > 3 else "b_eq_3")))
    elif cfg.x_rule == "gamma_tilde":
        N = int(round(zrp.N_of_gamma_tilde(probe, L, float(v))))
    else:
        raise ConfigError(f"x_rule {cfg.x_rule} does not apply to zrp")
    model = zrp.ZrpModel(L, N, b, g, K_cap=K_cap)
    eps = cfg.options.get("eps")
    eps = zrp.geometric_split_eps(model) if eps is None else float(eps)
    p = zrp.condensate_probability(model, eps)
    if b > 3:
        param, pred = zrp.gamma_prime(model), zrp.predicted_condensate_weight(model, zrp.gamma_prime(model))
    else:
        gt = zrp.gamma_tilde(model)
        param, pred = gt, zrp.predicted_condensate_weight(model, gt, "gamma_tilde")
    row = {"L": L, "N": N, "parameter": param, "eps": eps, "condensate": p, "predicted": pred}
    if cfg.tolerance is not None:
        row["pass"] = int(abs(p - pred) <= cfg.tolerance)
    return row


_ROWS: dict[str, Callable] = {"exact": _row_exact, "predict": _row_predict, "scan": _row_scan, "mc": _row_mc,
                              "overshoot": _row_overshoot, "zrp": _row_zrp}


def _grid(cfg: ExperimentConfig):
    for n in cfg.n:
        for v in cfg.x_values:
            yield int(n), v


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_rows(rows: list[dict], path: Optional[str]) -> None:
    if not rows:
        return
    header = list(rows[0].keys())
    lines = [",".join(header)] + [",".join(_fmt(r[k]) for k in header) for r in rows]
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def run(cfg: ExperimentConfig) -> int:
    """Run an experiment; returns the exit status."""
    law = _build_law(cfg.law) if cfg.experiment != "zrp" else None
    if cfg.experiment == "norms":
        rows = normalizer_table(law, cfg.n)
        if cfg.out:
            write_normalizer_csv(rows, cfg.out)
        else:
            for r in rows:
                print(",".join(_fmt(v) for v in asdict(r).values()))
        status = 0
    else:
        fn = _ROWS[cfg.experiment]
        rows = [fn(cfg, law, n, v) for n, v in _grid(cfg)]
        _write_rows(rows, cfg.out)
        status = 0 if all(r.get("pass", 1) for r in rows) else 1
    if cfg.out:
        Path(str(cfg.out) + ".json").write_text(cfg.to_json() + "\n")
    return status


def verify(csv_path, fraction: float = 0.01, rtol: float = 1e-9) -> tuple[int, int]:
    """Recompute a deterministic subset of rows of a CLI-written CSV.

    Returns (rows checked, mismatches).  Needs the ``.json`` sidecar written
    next to the CSV.
    """
    cfg = _from_mapping(json.loads(Path(str(csv_path) + ".json").read_text()))
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    points = list(_grid(cfg)) if cfg.experiment != "norms" else [(n, None) for n in cfg.n]
    if len(points) != len(rows):
        raise ConfigError("CSV rows do not match the configured grid")
    step = max(1, int(round(1.0 / fraction)))
    law = _build_law(cfg.law) if cfg.experiment != "zrp" else None
    checked = bad = 0
    for i in range(0, len(rows), step):
        n, v = points[i]
        if cfg.experiment == "norms":
            fresh = {k: _fmt(val) for k, val in asdict(normalizer_table(law, [n])[0]).items()}
        else:
            fresh = {k: _fmt(val) for k, val in _ROWS[cfg.experiment](cfg, law, n, v).items()}
        for k, old in rows[i].items():
            new = fresh.get(k)
            try:
                a, b = float(old), float(new)
                same = (math.isnan(a) and math.isnan(b)) or abs(a - b) <= rtol * max(abs(a), abs(b), 1e-300)
            except (TypeError, ValueError):
                same = old == new
            if not same:
                bad += 1
        checked += 1
    return checked, bad


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _law_check(args) -> int:
    if args.config:
        law = _laws.law_from_spec_text(Path(args.config).read_text())
    elif args.spec:
        law = _laws.law_from_spec_text("\n".join(args.spec))
    else:
        raise ConfigError("law check needs --config or key=value arguments")
    info = {"family": law.family.value, "mean": law.mean, "variance": law.variance, "beta": law.beta,
            "total_mass": law.total_mass, "support_min": law.support_min, "K_cap": law.K_cap,
            "aperiodic": law.aperiodic}
    print(json.dumps(info, default=float, indent=1))
    if args.out:
        _laws.write_pmf_csv(law, args.out, hi=min(law.K_cap, law.k_min + 10_000))
    ok = abs(law.total_mass - 1.0) <= 1e-12
    return 0 if ok else 1


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bigjump", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    sub = p.add_subparsers(dest="command", required=True)
    lc = sub.add_parser("law", help="law utilities")
    lc.add_argument("action", choices=["check"])
    lc.add_argument("spec", nargs="*", help="key=value law parameters")
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run the {name} experiment from --config")
        sp.add_argument("--config", default=argparse.SUPPRESS)
        sp.add_argument("--out", default=argparse.SUPPRESS)
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    vp = sub.add_parser("verify", help="recompute 1%% of the rows of a CLI CSV")
    vp.add_argument("csv")
    vp.add_argument("--fraction", type=float, default=0.01)
    tp = sub.add_parser("transition", help="crossing points of the Gaussian and one-jump terms")
    tp.add_argument("spec", nargs="*")
    tp.add_argument("--n", type=int, required=True)
    return p


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    if args.threads > 1:
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        if args.command == "law":
            return _law_check(args)
        if args.command == "verify":
            checked, bad = verify(args.csv, args.fraction)
            print(f"checked {checked} rows, {bad} mismatching fields")
            return 0 if bad == 0 else 1
        if args.command == "transition":
            law = _laws.law_from_spec_text("\n".join(args.spec))
            print(json.dumps(asdict(transition_scan(law, args.n)), default=float))
            return 0
        if not args.config:
            raise ConfigError(f"{args.command} needs --config")
        cfg = load_config(args.config)
        if cfg.experiment != args.command:
            raise ConfigError(f"config is for '{cfg.experiment}', not '{args.command}'")
        if args.out is not None:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        return run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
