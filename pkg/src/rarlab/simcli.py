"""Command-line front end: run simulations and print variance and bias tables.

Configuration is flat ``key = value`` text with dotted keys::

    design.id = dbcd
    design.gamma = 2
    model.theta = 0.7, 0.4
    trial.n = 2000
    trial.reps = 10000

Exit status is 0 on success, 2 for configuration errors and 3 when a
design fails numerically. Output is written only after the run succeeds.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields

import numpy as np

from . import coins, core, metrics, models, targets, urns
from .delay import DelayModel

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

DESIGNS = ("cr", "pw", "rpw", "wei", "seu", "dl", "gdl", "rru",
           "smlp", "dbcd", "erade", "serade", "thompson")
# closed-form variance available (urn target for the coin and SEU/GDL rules)
REFERENCE_DESIGNS = {"rpw", "dl", "gdl", "smlp", "seu", "dbcd", "erade", "serade", "cr"}


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected a list of numbers, got {text!r}") from None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (tuple, list, np.ndarray)):
        return ";".join(_fmt(v) for v in np.ravel(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6g}"


@dataclass
class SimulationConfig:
    design_id: str = "dl"
    design_gamma: float = 2.0
    design_alpha: float = 0.5
    design_beta: float = 1.0
    design_preset: str = "rpw11"
    design_immigration: float = 1.0
    design_horizon: int = 0
    model_family: str = models.BERNOULLI
    model_theta: tuple = (0.7, 0.4)
    model_variance: tuple = ()
    target_id: str = "urn"
    target_c: float = 0.0
    target_form: str = "symmetric"
    target_rho: tuple = ()
    trial_n: int = 2000
    trial_reps: int = 1000
    trial_seed: int = 0
    trial_estimator: str = "shrinkage"
    warm_mode: str = "restricted-block"
    warm_m0: int = 1
    warm_theta0: tuple = ()
    delay_enabled: bool = False
    delay_entry_mean: float = 1.0
    delay_response_mean: tuple = (1.0,)
    metrics_rpw: str = "corollary"
    output_format: str = "csv"

    # ---- text format -------------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name.replace("_", ".", 1) for f in fields(cls)]

    @classmethod
    def from_text(cls, text: str) -> "SimulationConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            name = key.replace(".", "_", 1)
            if "." not in key or name not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[name] = _parse(types[name], val)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name.replace('_', '.', 1)} = {v}")
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        if self.design_id not in DESIGNS:
            raise ConfigError(f"unknown design {self.design_id!r}; choose from {', '.join(DESIGNS)}")
        if self.model_family not in models.FAMILIES:
            raise ConfigError(f"unknown family {self.model_family!r}")
        if self.target_id not in targets.TARGETS:
            raise ConfigError(f"unknown target {self.target_id!r}")
        if self.trial_n < 1 or self.trial_reps < 1:
            raise ConfigError("trial.n and trial.reps must be positive")
        if self.output_format not in ("csv", "json"):
            raise ConfigError("output.format must be csv or json")
        if self.metrics_rpw not in ("corollary", "table"):
            raise ConfigError("metrics.rpw must be corollary or table")
        if self.warm_mode not in core.WARM_MODES:
            raise ConfigError(f"unknown warm.mode {self.warm_mode!r}")

    # ---- objects -----------------------------------------------------------

    def model(self) -> models.ResponseModel:
        try:
            if self.model_family == models.NORMAL:
                var = self.model_variance or (1.0,) * len(self.model_theta)
                return models.ResponseModel.normal(self.model_theta, var)
            return models.ResponseModel(self.model_family, np.asarray(self.model_theta))
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def target(self) -> targets.Target:
        tid = self.target_id
        if tid == "neyman":
            return targets.NeymanTarget(self.model_family)
        if tid == "bm":
            return targets.BMTarget(self.target_c, self.target_form)
        if tid == "fixed":
            if not self.target_rho:
                raise ConfigError("target.rho is required for the fixed target")
            return targets.FixedTarget(self.target_rho)
        return targets.TARGETS[tid]()

    def design(self) -> core.Design:
        d, K = self.design_id, len(self.model_theta)
        tgt = self.target()
        if d == "cr":
            return core.CompleteRandomization(K)
        if d == "pw":
            return core.PlayTheWinner()
        if d == "rpw":
            if self.design_preset not in urns.RPW_PRESETS:
                raise ConfigError(f"unknown RPW preset {self.design_preset!r}")
            return urns.rpw(self.design_preset)
        if d == "wei":
            return urns.wei(K)
        if d == "seu":
            return urns.SEUDesign(tgt, self.design_beta, n_arms=K)
        if d == "dl":
            return urns.DropTheLoser(K, self.design_immigration)
        if d == "gdl":
            return urns.GeneralizedDropTheLoser(tgt, self.design_beta, K, self.design_immigration)
        if d == "rru":
            return urns.RandomlyReinforcedUrn(K)
        if d == "smlp":
            return coins.SMLP(tgt)
        if d == "dbcd":
            return coins.DBCD(tgt, self.design_gamma)
        if d == "erade":
            return coins.ERADE(tgt, self.design_alpha)
        if d == "serade":
            return coins.SmoothedERADE(tgt, self.design_gamma)
        return coins.ThompsonThallWathen(self.design_horizon or self.trial_n)

    def warm(self) -> core.WarmStart:
        theta0 = self.warm_theta0 or None
        return core.WarmStart(self.warm_mode, self.warm_m0, theta0)

    def delay(self):
        if not self.delay_enabled:
            return None
        rm = self.delay_response_mean
        return DelayModel(self.delay_entry_mean, rm[0] if len(rm) == 1 else tuple(rm))


def _parse(kind, val: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
        if kind == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind == "tuple":
            return _floats(val)
    except ValueError:
        raise ConfigError(f"cannot parse {val!r} as {kind}") from None
    return val


# --------------------------------------------------------------------------
# commands


def _reference(design_id, cfg, model, tgt):
    """Closed-form variance for the configured design, or None."""
    if design_id not in REFERENCE_DESIGNS or model.n_arms != 2:
        return None
    if design_id in ("rpw", "dl") and model.family != models.BERNOULLI:
        return None
    gamma = cfg.design_gamma if design_id == "dbcd" else 0.0
    return metrics.reference_variance(design_id, model.family, model.theta, tgt, gamma,
                                      rpw=cfg.metrics_rpw)


def _true_rho(design, model):
    if isinstance(design, core.CompleteRandomization):
        return np.full(model.n_arms, 1.0 / model.n_arms)
    tgt = design.target
    return None if tgt is None else targets.clamp(tgt.rho(model.theta))


def cmd_simulate(cfg: SimulationConfig, jobs: int = 1) -> list[dict]:
    model, design = cfg.model(), cfg.design()
    if cfg.trial_reps == 1:
        return _trace_rows(cfg, model, design)
    s = core.simulate(design, model, cfg.trial_n, cfg.trial_reps, cfg.warm(), cfg.delay(),
                      cfg.trial_seed, cfg.trial_estimator, jobs=jobs)
    rho = _true_rho(design, model)
    ref = _reference(cfg.design_id, cfg, model, design.target)
    row = {
        "design": cfg.design_id,
        "family": model.family,
        "theta": model.theta.ravel(),
        "n": cfg.trial_n,
        "reps": cfg.trial_reps,
        "seed": cfg.trial_seed,
        "mean_allocation": s.proportions.mean(axis=0),
        "target": rho,
    }
    if rho is not None:
        mo = s.moments(rho[0])
        row.update(variance=mo.variance, variance_se=mo.variance_se, mse=mo.mse)
    else:
        row.update(variance=None, variance_se=None, mse=None)
    row["reference_variance"] = ref
    row["relative_error"] = (None if ref is None or rho is None or not math.isfinite(ref)
                             else row["variance"] / ref - 1)
    row["selection_bias"] = s.selection_bias()
    row["mlr"] = s.mean_mlr() if s.mlr is not None else None
    row["power"] = s.power() if model.n_arms == 2 else None
    row["failures"] = float(np.mean(s.failures)) if model.family == models.BERNOULLI else None
    row["pending"] = float(s.pending.sum(axis=1).mean())
    return [row]


def _trace_rows(cfg, model, design) -> list[dict]:
    state = core.run_trial(design, model, cfg.trial_n, cfg.warm(), cfg.delay(),
                           cfg.trial_seed, cfg.trial_estimator)
    rows = []
    for m in range(state.step):
        row = {"step": m + 1, "arm": int(state.assignments[m]) + 1,
               "response": state.responses[m], "reveal_epoch": int(state.reveal_epochs[m]) + 1}
        for k in range(model.n_arms):
            row[f"p{k + 1}"] = state.probabilities[m, k]
        rows.append(row)
    return rows


def cmd_target(target_id: str, family: str, theta, variance=(), c: float = 0.0,
               form: str = "symmetric") -> list[dict]:
    cfg = SimulationConfig(target_id=target_id, model_family=family, model_theta=tuple(theta),
                           model_variance=tuple(variance), target_c=c, target_form=form)
    cfg.validate()
    model, tgt = cfg.model(), cfg.target()
    try:
        tgt.check(model.family, model.n_arms)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    rho = tgt.rho(model.theta)
    jac = tgt.jacobian(model.theta)
    lb = targets.sigma_lb(tgt, model.family, model.theta)
    return [{"target": target_id, "family": family, "theta": model.theta.ravel(),
             "rho": rho, "gradient": jac, "sigma_lb": lb}]


def _design_spec(token: str):
    """``dbcd:2`` -> ("dbcd", 2.0)."""
    name, _, par = token.partition(":")
    return name.strip(), (float(par) if par else None)


def _grid(text: str | None):
    if not text:
        vals = np.round(np.arange(0.1, 1.0, 0.1), 10)
        return [(a, b) for a in vals for b in vals]
    return [_floats(chunk) for chunk in text.split("/") if chunk.strip()]


def cmd_variance_table(grid=None, designs="rpw,dl,gdl,smlp,seu,dbcd:0,dbcd:1,dbcd:2,erade",
                       n: int = 2000, reps: int = 0, seed: int = 0, rpw_form: str = "corollary",
                       jobs: int = 1) -> list[dict]:
    rows = []
    U = targets.UrnTarget()
    for theta in _grid(grid):
        model = _bernoulli(theta)
        p1, p2 = model.theta[:, 0]
        rho1 = float(U.rho(model.theta)[0])
        for token in designs.split(","):
            name, par = _design_spec(token)
            if name not in REFERENCE_DESIGNS - {"cr"}:
                raise ConfigError(f"no closed-form variance for design {name!r}")
            gamma = par if (name == "dbcd" and par is not None) else 2.0
            ref = metrics.reference_variance(name, models.BERNOULLI, model.theta, U,
                                             gamma if name == "dbcd" else 0.0, rpw=rpw_form)
            regime = metrics.rpw_regime(p1, p2) if name == "rpw" else "normal"
            emp = None
            if reps > 0 and (name != "rpw" or regime == "normal"):
                cfg = SimulationConfig(design_id=name, design_gamma=gamma, model_theta=tuple(theta))
                s = core.simulate(cfg.design(), model, n, reps, seed=seed, track=False, jobs=jobs)
                emp = s.moments(rho1).variance
            label = f"dbcd:{gamma:g}" if name == "dbcd" else name
            rows.append({
                "design": label, "p1": p1, "p2": p2, "analytic": ref, "empirical": emp,
                "relative_error": None if emp is None or not math.isfinite(ref) else emp / ref - 1,
                "regime": regime,
            })
    return rows


def cmd_bias_table(theta=(0.7, 0.4), designs="cr,smlp,dbcd:1,dbcd:2,erade:0.5", n: int = 2000,
                   reps: int = 1000, seed: int = 0, jobs: int = 1) -> list[dict]:
    model = _bernoulli(theta)
    U = targets.UrnTarget()
    rho = U.rho(model.theta)
    lb = float(targets.sigma_lb(U, models.BERNOULLI, model.theta)[0, 0])
    rows = []
    for token in designs.split(","):
        name, par = _design_spec(token)
        if name == "cr":
            design, sb_ref, mlr_ref, scale = core.CompleteRandomization(2), 0.5, None, "1"
        elif name in ("smlp", "dbcd"):
            gamma = 0.0 if name == "smlp" else (2.0 if par is None else par)
            design = coins.DBCD(U, gamma)
            sb_ref = metrics.sb_limit_lower(rho)
            mlr_ref = metrics.sqrt_n_mlr_limit_dbcd(gamma, rho[0], lb)
            scale = "sqrt_n"
            name = f"dbcd:{gamma:g}"
        elif name == "erade":
            alpha = 0.5 if par is None else par
            design = coins.ERADE(U, alpha)
            sb_ref = metrics.sb_limit_erade(alpha, rho[0])
            mlr_ref = metrics.mlr_limit_erade(alpha, rho[0])
            scale = "1"
            name = f"erade:{alpha:g}"
        elif name == "rpw":
            design = urns.rpw()
            sb_ref = metrics.sb_limit_lower(rho)
            mlr_ref = metrics.sqrt_n_mlr_limit_rpw(*model.theta[:, 0])
            scale = "sqrt_n"
        else:
            raise ConfigError(f"bias table does not cover design {name!r}")
        s = core.simulate(design, model, n, reps, seed=seed, jobs=jobs)
        mlr = s.mean_mlr() if s.mlr is not None else 0.0
        rows.append({
            "design": name, "p1": model.theta[0, 0], "p2": model.theta[1, 0], "n": n,
            "selection_bias": s.selection_bias(), "sb_reference": sb_ref,
            "mlr": mlr * (math.sqrt(n) if scale == "sqrt_n" else 1.0),
            "mlr_reference": mlr_ref, "mlr_scale": scale,
        })
    return rows


def _bernoulli(theta):
    theta = tuple(theta)
    if len(theta) != 2:
        raise ConfigError("tables cover two binary arms: give p1,p2")
    try:
        return models.ResponseModel.bernoulli(*theta)
    except ValueError as e:
        raise ConfigError(str(e)) from None


# --------------------------------------------------------------------------
# output


def render(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps([{k: _json_value(v) for k, v in r.items()} for r in rows], indent=2) + "\n"
    buf = io.StringIO()
    header = list(rows[0]) if rows else []
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def _json_value(v):
    if v is None or isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return int(v)
    if isinstance(v, (tuple, list, np.ndarray)):
        arr = np.asarray(v, dtype=float)
        return [_json_value(x) for x in arr] if arr.ndim == 1 else [_json_value(r) for r in arr]
    x = float(v)
    return _fmt(x) if not math.isfinite(x) else float(_fmt(x))


def write_atomic(path: str, text: str) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rarlab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--reps", type=int)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--output", "-o", help="write here instead of stdout")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo run of one design")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration key")

    p = sub.add_parser("target", parents=[common], help="target allocation and its lower bound")
    p.add_argument("--target", default="urn", choices=sorted(targets.TARGETS))
    p.add_argument("--family", default=models.BERNOULLI, choices=models.FAMILIES)
    p.add_argument("--theta", required=True, help="comma-separated parameters (means for normal)")
    p.add_argument("--variance", default="", help="normal variances")
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--form", default="symmetric", choices=("symmetric", "printed"))

    p = sub.add_parser("variance-table", parents=[common], help="closed-form variances with Monte Carlo")
    p.add_argument("--grid", help="p1,p2/p1,p2/...; default the 0.1..0.9 grid")
    p.add_argument("--designs", default="rpw,dl,gdl,smlp,seu,dbcd:0,dbcd:1,dbcd:2,erade")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--rpw", default="corollary", choices=("corollary", "table"))

    p = sub.add_parser("bias-table", parents=[common], help="selection bias and lack of randomness")
    p.add_argument("--theta", default="0.7,0.4")
    p.add_argument("--designs", default="cr,smlp,dbcd:1,dbcd:2,erade:0.5")
    p.add_argument("--n", type=int, default=2000)
    return ap


def _config_from_args(args) -> SimulationConfig:
    text = ""
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
    text += "".join(f"{kv}\n" for kv in args.set)
    cfg = SimulationConfig.from_text(text)
    if args.seed is not None:
        cfg.trial_seed = args.seed
    if args.reps is not None:
        cfg.trial_reps = args.reps
    if args.format:
        cfg.output_format = args.format
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    seed = args.seed if args.seed is not None else 0
    fmt = args.format or "csv"
    try:
        if args.command == "simulate":
            cfg = _config_from_args(args)
            fmt = cfg.output_format
            rows = cmd_simulate(cfg, args.jobs)
        elif args.command == "target":
            rows = cmd_target(args.target, args.family, _floats(args.theta),
                              _floats(args.variance), args.c, args.form)
        elif args.command == "variance-table":
            rows = cmd_variance_table(args.grid, args.designs, args.n, args.reps or 0, seed,
                                      args.rpw, args.jobs)
        else:
            rows = cmd_bias_table(_floats(args.theta), args.designs, args.n,
                                  args.reps or 1000, seed, args.jobs)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (core.NumericalError, targets.ConvergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    text = render(rows, fmt)
    if args.output:
        write_atomic(args.output, text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
