"""Run configuration, canned experiments and metrics output."""

from __future__ import annotations

import copy
import csv
import dataclasses
import inspect
import io
import json
import logging
import math
from pathlib import Path

import tomli
import tomli_w

from .algorithm import IterationRecord, PcmlpConfig, run_pcmlp
from .envs import CATALOG, make_chain, make_env, make_tabular_linmdp
from .odpc import run_odpc
from .planners import MppiConfig

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("iter", "model_error", "bonus_min", "bonus_mean", "bonus_max", "plan_value_model",
                 "value_true_mean", "value_true_se", "avg_bonus_per_step", "info_gain", "coverage",
                 "feasible")

EXPERIMENTS = ("pcmlp", "bonus_decay", "ablation", "reward_free", "odpc")
ABLATION_SCALES = (0.0, 0.1, 1.0, 5.0)


class ConfigError(ValueError):
    """Bad configuration: unknown key, wrong type or invalid value."""


# ---------------------------------------------------------------------------
# metrics CSV
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    value = float(value)
    return "" if math.isnan(value) else format(value, ".10g")


def emit_metrics(records, out=None) -> str:
    """CSV text with the fixed header and one row per record; written to ``out`` if given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        w.writerow([_cell(getattr(r, f)) for f in METRIC_FIELDS])
    text = buf.getvalue()
    if out is not None:
        Path(out).write_text(text)
    return text


def parse_metrics(text: str) -> list:
    """Records from CSV text; empty cells become ``nan`` (``None`` for ``feasible``)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != METRIC_FIELDS:
        raise ValueError("unexpected metrics header")
    out = []
    for row in rows[1:]:
        vals = dict(zip(METRIC_FIELDS, row))
        kw = {f: (float(v) if v else math.nan) for f, v in vals.items() if f not in ("iter", "feasible")}
        feasible = None if vals["feasible"] == "" else vals["feasible"] == "1"
        out.append(IterationRecord(iter=int(vals["iter"]), feasible=feasible, **kw))
    return out


def read_metrics(path) -> list:
    return parse_metrics(Path(path).read_text())


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

RUN_DEFAULTS = dict(experiment="pcmlp", env="linear_system", algorithm="pcmlp", seed=0, out="runs/pcmlp")
ODPC_DEFAULTS = dict(M=500, N=5, delta=0.1, radius=None)
PCMLP_KEYS = {f.name for f in dataclasses.fields(PcmlpConfig)} - {"mppi", "seed"}
MPPI_KEYS = {f.name for f in dataclasses.fields(MppiConfig)}

# experiment presets: (run overrides, pcmlp overrides)
PRESETS = {
    "pcmlp": ({}, {}),
    "bonus_decay": (dict(env="linear_system"), {}),
    "ablation": (dict(env="sparse_hill"), {}),
    "reward_free": (dict(env="sparse_hill"), dict(reward_free=True)),
    "odpc": (dict(env="tabular_linmdp", algorithm="odpc"), {}),
}


def _env_builder(name: str):
    if name not in CATALOG:
        raise ConfigError(f"env: unknown environment {name!r}; choose from {sorted(CATALOG)}")
    return CATALOG[name][0]


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")


def _env_arg_names(name: str) -> set:
    fn = {"tabular_linmdp": make_tabular_linmdp, "chain": make_chain}.get(name) or _env_builder(name)
    params = inspect.signature(fn).parameters
    return {p for p, v in params.items() if v.kind not in (v.VAR_KEYWORD, v.VAR_POSITIONAL)} - {"seed"}


def _set_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple:
    """``key.path=value`` with the value parsed as a TOML literal (bare words become strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r}: empty key")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key, value


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict | None = None, overrides=(), seed: int | None = None,
                   out: str | None = None) -> dict:
    """Fully resolved configuration tree.

    Layers, later wins: built-in defaults, the experiment preset, the
    environment's own defaults, the config file, ``--override`` pairs and
    the ``--seed`` / ``--out`` flags. Unknown keys raise :class:`ConfigError`.
    """
    raw = copy.deepcopy(raw or {})
    for text in overrides:
        _set_dotted(raw, *parse_override(text))
    _check_keys("config", raw, ("run", "env", "pcmlp", "odpc", "ablation"))
    run_in = raw.get("run", {})
    _check_keys("run", run_in, RUN_DEFAULTS)
    experiment = run_in.get("experiment", RUN_DEFAULTS["experiment"])
    if experiment not in PRESETS:
        raise ConfigError(f"run.experiment: unknown experiment {experiment!r}; choose from {list(PRESETS)}")
    run_preset, pcmlp_preset = PRESETS[experiment]
    run = {**RUN_DEFAULTS, "out": f"runs/{experiment}", **run_preset, **run_in}
    if seed is not None:
        run["seed"] = seed
    if out is not None:
        run["out"] = out
    if run["algorithm"] not in ("pcmlp", "odpc"):
        raise ConfigError(f"run.algorithm: expected pcmlp or odpc, got {run['algorithm']!r}")
    if run["algorithm"] == "odpc" and run["env"] != "tabular_linmdp":
        raise ConfigError("run.env: the odpc algorithm needs the tabular_linmdp environment")
    # TOML integers are signed 64-bit, so the echo limits seeds to [0, 2^63)
    if not isinstance(run["seed"], int) or isinstance(run["seed"], bool) or not 0 <= run["seed"] < 2**63:
        raise ConfigError("run.seed: expected an integer in [0, 2^63)")

    env_args = raw.get("env", {})
    _env_builder(run["env"])
    _check_keys("env", env_args, _env_arg_names(run["env"]))

    tree = {"run": run, "env": env_args}
    if run["algorithm"] == "odpc":
        _check_keys("odpc", raw.get("odpc", {}), ODPC_DEFAULTS)
        tree["odpc"] = {k: v for k, v in {**ODPC_DEFAULTS, **raw.get("odpc", {})}.items() if v is not None}
        return tree

    pcmlp_in = raw.get("pcmlp", {})
    _check_keys("pcmlp", pcmlp_in, PCMLP_KEYS | {"mppi"})
    _check_keys("pcmlp.mppi", pcmlp_in.get("mppi", {}), MPPI_KEYS)
    try:
        env_defaults = make_env(run["env"], seed=run["seed"], **env_args).defaults
    except (TypeError, ValueError) as err:
        raise ConfigError(f"env: {err}") from None
    merged = _merge(_merge(_merge({}, env_defaults), pcmlp_preset), pcmlp_in)
    base = dataclasses.asdict(PcmlpConfig())
    base.pop("seed")
    full = _merge(base, merged)
    tree["pcmlp"] = _drop_none(full)
    if experiment == "ablation":
        abl = raw.get("ablation", {})
        _check_keys("ablation", abl, ("scales",))
        tree["ablation"] = {"scales": [float(c) for c in abl.get("scales", ABLATION_SCALES)]}
    pcmlp_config(tree)  # validate values now
    return tree


def _drop_none(d: dict) -> dict:
    return {k: _drop_none(v) if isinstance(v, dict) else v for k, v in d.items() if v is not None}


def pcmlp_config(tree: dict, **changes) -> PcmlpConfig:
    section = copy.deepcopy(tree["pcmlp"])
    mppi = section.pop("mppi", {})
    for k in ("sigma", "action_low", "action_high"):
        if isinstance(mppi.get(k), list):
            mppi[k] = tuple(mppi[k])
    try:
        return PcmlpConfig(seed=tree["run"]["seed"], mppi=MppiConfig(**mppi), **{**section, **changes})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"pcmlp: {err}") from None


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None


def dumps_config(tree: dict) -> str:
    return tomli_w.dumps(_tomlable(tree))


def _tomlable(x):
    if isinstance(x, dict):
        return {k: _tomlable(v) for k, v in x.items() if v is not None}
    if isinstance(x, (list, tuple)):
        return [_tomlable(v) for v in x]
    return x


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return _finite(x)


def _pcmlp_summary(res, records) -> dict:
    first, last = records[0], records[-1]
    ratio = last.avg_bonus_per_step / first.avg_bonus_per_step if first.avg_bonus_per_step > 0 else math.nan
    return dict(best_value=res.best_value, best_iter=res.best_iter, final_value=last.value_true_mean,
                final_coverage=_finite(last.coverage), goal_iter=res.goal_iter,
                bonus_decay_ratio=_finite(ratio), feasibility_rate=None)


def run_experiment(tree: dict) -> dict:
    """Run a resolved configuration and write its outputs; returns the summary."""
    run = tree["run"]
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.toml").write_text(dumps_config(tree))
    seed = run["seed"]

    if run["algorithm"] == "odpc":
        opts = tree["odpc"]
        inst = make_tabular_linmdp(seed=seed, **tree["env"])
        res = run_odpc(inst, M=opts["M"], N=opts["N"], radius=opts.get("radius"), delta=opts["delta"], seed=seed)
        emit_metrics(res.records, out / "metrics.csv")
        feas = [r.feasible for r in res.records]
        summary = dict(best_value=max(r.value_true_mean for r in res.records), v_star=res.v_star,
                       final_value=res.records[-1].value_true_mean, final_coverage=res.records[-1].coverage,
                       feasibility_rate=sum(feas) / len(feas), always_feasible=all(feas))
    elif run["experiment"] == "ablation":
        arms = {}
        for c in tree["ablation"]["scales"]:
            env = make_env(run["env"], seed=seed, **tree["env"])
            res = run_pcmlp(pcmlp_config(tree, bonus_scale=c), env)
            arm = out / f"C_{c:g}"
            arm.mkdir(exist_ok=True)
            emit_metrics(res.records, arm / "metrics.csv")
            arms[f"{c:g}"] = _pcmlp_summary(res, res.records)
        summary = dict(arms=arms, goal_reached={k: v["goal_iter"] is not None for k, v in arms.items()})
    else:
        env = make_env(run["env"], seed=seed, **tree["env"])
        res = run_pcmlp(pcmlp_config(tree), env)
        emit_metrics(res.records, out / "metrics.csv")
        summary = _pcmlp_summary(res, res.records)

    summary = dict(experiment=run["experiment"], env=run["env"], seed=seed, **summary)
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    return summary
