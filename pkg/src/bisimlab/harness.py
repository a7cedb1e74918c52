"""Run configuration, named presets and the five experiment commands.

A run configuration is a JSON document with one section per component::

    {"seed": 0,
     "mdp":    {"n_states": 6, "n_actions": 2, "gamma": 0.9, ...},
     "policy": {"kind": "random", ...},
     "bisim":  {"c_R": 1.0, "c_T": 0.9, ...},
     "train":  {... TrainConfig fields ...},
     "env":    {... EnvConfig fields ...},
     "agent":  {... AgentConfig fields except the metric ...},
     "verify": {... SuiteConfig fields ...},
     "ratio":  {"steps": 20000, "action": 0, "grid": null, "log_every": 10},
     "collapse": {...},
     "run":    {"steps": 50000, "repetitions": 1, "forbid_divergence": false}}

Every knob is addressable by a dotted key (``train.c_T``), either inside the
file or through overrides. Each command writes the echoed configuration, a
run summary and a manifest of emitted files into the output directory.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .agent import AgentConfig, write_episodes
from .envs import EnvConfig
from .errors import ConfigError
from .experiments import RatioStudyConfig, ratio_study, repetition_seed, train_agent
from .learning import TrainConfig, write_diagnostics
from .mdp import PolicyTable, generate_mdp, load_mdp, random_policy, save_mdp
from .metrics import BisimConfig, mean_distance_ratio, metric_on_policy, metric_policy_independent
from .verify import CHECKS, SuiteConfig, run_suite, write_reports

COMMANDS = ("verify-bounds", "exact-metric", "train", "ratio-study", "gen-mdp")

DEFAULTS = {
    "seed": 0,
    "mdp": {"n_states": 6, "n_actions": 2, "deterministic": False, "reward_sparsity": 0.0, "gamma": 0.9,
            "path": None},
    "policy": {"kind": "random", "deterministic": False, "table": None},
    "bisim": {"c_R": 1.0, "c_T": 0.9, "p": 1.0, "tol": 1e-9, "max_iter": None, "accelerate": False,
              "variant": "on_policy"},
    "train": {},
    "env": {},
    "agent": {},
    "verify": {},
    "ratio": {"steps": 20_000, "action": 0, "grid": None, "log_every": 10},
    "run": {"steps": 50_000, "repetitions": 1, "forbid_divergence": False, "stop_on_divergence": False},
}

_DBC = {"train.c_R": 1.0, "train.c_T": 0.99, "train.huber_delta": 1.0, "train.projection_enabled": False,
        "agent.dynamics_mode": "deterministic", "agent.use_ir": False, "agent.use_id": False}
_NORMED = {**_DBC, "train.projection_enabled": True}

PRESETS = {
    # exact-metric weightings
    "def1": {"bisim.c_R": 0.1, "bisim.c_T": 0.9, "bisim.variant": "policy_independent"},
    "def2": {"bisim.c_R": 1.0, "bisim.c_T": "$mdp.gamma", "bisim.variant": "on_policy"},
    # learned-metric variants
    "dbc-plain": _DBC,
    "dbc-orig": {**_DBC, "train.huber_delta": None, "train.q": 1, "train.q_transition": 2,
                 "agent.dynamics_mode": "gaussian"},
    "dbc-matched": {**_DBC, "train.huber_delta": None, "train.q": 2, "train.q_transition": 2,
                    "agent.dynamics_mode": "gaussian"},
    "dbc-alt": {**_DBC, "train.c_R": 0.5, "train.c_T": 0.5, "bisim.c_R": 0.5, "bisim.c_T": 0.5},
    "normed": _NORMED,
    "normed-ir": {**_NORMED, "agent.use_ir": True},
    "normed-ir-id": {**_NORMED, "agent.use_ir": True, "agent.use_id": True},
}


# ---------------------------------------------------------------------------
# configuration


def set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{key!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def get_dotted(doc: dict, key: str):
    node = doc
    for p in key.split("."):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown key {key!r}")
        node = node[p]
    return node


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if "." in k:
            set_dotted(out, k, v)
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _resolve_refs(doc: dict, node=None):
    """Replace ``"$section.key"`` strings with the referenced value."""
    node = doc if node is None else node
    for k, v in node.items():
        if isinstance(v, dict):
            _resolve_refs(doc, v)
        elif isinstance(v, str) and v.startswith("$"):
            node[k] = get_dotted(doc, v[1:])


def build_config(file_doc: dict | None = None, preset: str | None = None, seed: int | None = None,
                 overrides=()) -> dict:
    """Defaults, then the preset, then the file, then explicit overrides and seed."""
    doc = copy.deepcopy(DEFAULTS)
    file_doc = file_doc or {}
    preset = preset or file_doc.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        doc = _merge(doc, PRESETS[preset])
        doc["preset"] = preset
    doc = _merge(doc, {k: v for k, v in file_doc.items() if k != "preset"})
    for key, value in overrides:
        set_dotted(doc, key, value)
    if seed is not None:
        doc["seed"] = seed
    _resolve_refs(doc)
    return doc


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("a config must be a JSON object")
    return doc


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v


def _make(cls, section: dict, drop=()):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names - set(drop)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**{k: _tuples(v) for k, v in section.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def bisim_config(doc: dict) -> BisimConfig:
    return _make(BisimConfig, doc["bisim"], drop=("variant",))


def train_config(doc: dict) -> TrainConfig:
    return _make(TrainConfig, doc["train"])


def env_config(doc: dict) -> EnvConfig:
    return _make(EnvConfig, doc["env"])


def agent_config(doc: dict) -> AgentConfig:
    section = dict(doc["agent"])
    if "metric" in section:
        raise ConfigError("set the metric through the train section")
    agent = _make(AgentConfig, section)
    return dataclasses.replace(agent, metric=train_config(doc))


def suite_config(doc: dict) -> SuiteConfig:
    return _make(SuiteConfig, doc["verify"])


def mdp_and_policy(doc: dict, seed: int):
    m = doc["mdp"]
    if m.get("path"):
        try:
            mdp = load_mdp(m["path"])
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load MDP {m['path']}: {exc}") from exc
    else:
        try:
            mdp = generate_mdp(repetition_seed(seed, 0), m["n_states"], m["n_actions"], m["deterministic"],
                               m["reward_sparsity"], m["gamma"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid mdp section: {exc}") from exc
    pol = doc["policy"]
    kind = pol.get("kind", "random")
    if pol.get("table") is not None:
        pi = PolicyTable(np.asarray(pol["table"], dtype=float))
    elif kind == "uniform":
        pi = PolicyTable.uniform(mdp.n_states, mdp.n_actions)
    elif kind == "random":
        pi = random_policy(repetition_seed(seed, 1), mdp.n_states, mdp.n_actions, pol.get("deterministic", False))
    else:
        raise ConfigError(f"unknown policy kind {kind!r}")
    return mdp, pi


# ---------------------------------------------------------------------------
# run bookkeeping


@dataclass
class RunSummary:
    command: str
    checks: dict = field(default_factory=dict)  # name -> "pass" | "fail" | "out-of-hypothesis"
    scalars: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v != "fail" for v in self.checks.values())

    def to_dict(self) -> dict:
        return {"command": self.command, "checks": self.checks, "scalars": self.scalars,
                "passed": self.passed, "wall_time": self.wall_time}


class RunDir:
    """Output directory that remembers every file written through it."""

    def __init__(self, path):
        self.path = str(path)
        os.makedirs(self.path, exist_ok=True)
        self.files: list[str] = []

    def file(self, name: str) -> str:
        self.files.append(name)
        return os.path.join(self.path, name)

    def write_json(self, name: str, doc) -> None:
        with open(self.file(name), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    def write_manifest(self) -> None:
        entries = []
        for name in sorted(set(self.files)):
            with open(os.path.join(self.path, name), "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            entries.append({"file": name, "sha256": digest})
        with open(os.path.join(self.path, "manifest.json"), "w") as fh:
            json.dump({"files": entries}, fh, indent=2)
            fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not math.isfinite(o):
        return repr(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_mdp(doc: dict, out: RunDir) -> RunSummary:
    mdp, pi = mdp_and_policy(doc, doc["seed"])
    save_mdp(mdp, out.file("mdp.json"))
    out.write_json("policy.json", {"action_probs": pi.action_probs})
    return RunSummary("gen-mdp", scalars={"n_states": mdp.n_states, "n_actions": mdp.n_actions,
                                          "deterministic": mdp.is_deterministic()})


def cmd_exact_metric(doc: dict, out: RunDir) -> RunSummary:
    mdp, pi = mdp_and_policy(doc, doc["seed"])
    cfg = bisim_config(doc)
    variant = doc["bisim"].get("variant", "on_policy")
    if variant == "on_policy":
        d, trace = metric_on_policy(mdp, pi, cfg)
    elif variant == "policy_independent":
        d, trace = metric_policy_independent(mdp, cfg)
    else:
        raise ConfigError(f"unknown metric variant {variant!r}")
    d.to_csv(out.file("distances.csv"))
    with open(out.file("trace.csv"), "w") as fh:
        fh.write("iteration,residual\n")
        for k, r in enumerate(trace.residuals, start=1):
            fh.write(f"{k},{r!r}\n")
    bound = cfg.diameter_bound(mdp.reward_range)
    summary = RunSummary("exact-metric", scalars={
        "diameter": d.diameter, "diameter_bound": bound, "iterations": trace.iterations,
        "residual": trace.residuals[-1] if trace.residuals else 0.0, "converged": trace.converged,
        "c_R": cfg.c_R, "c_T": cfg.c_T, "variant": variant})
    summary.checks["diameter"] = "pass" if d.diameter <= bound + 1e-9 else "fail"
    return summary


def cmd_verify_bounds(doc: dict, out: RunDir) -> RunSummary:
    cfg = suite_config(doc)
    results = run_suite(cfg, seed=doc["seed"])
    for name in write_reports(results, out.path):
        out.files.append(name)
    summary = RunSummary("verify-bounds")
    worst = -math.inf
    for name in CHECKS:
        r = results[name]
        if r.cases == 0 and r.out_of_hypothesis > 0:
            summary.checks[name] = "out-of-hypothesis"
        else:
            summary.checks[name] = "pass" if r.passed else "fail"
        if r.cases:
            worst = max(worst, r.max_violation if name != "distance_reward_ratio" else -math.inf)
    summary.scalars["max_bound_violation"] = _finite(worst)
    summary.scalars["n_mdps"] = cfg.n_mdps
    return summary


def cmd_train(doc: dict, out: RunDir) -> RunSummary:
    env_cfg = env_config(doc)
    agent_cfg = agent_config(doc)
    run = doc["run"]
    summary = RunSummary("train")
    evals, diverged_any = [], False
    for rep in range(int(run["repetitions"])):
        seed = repetition_seed(doc["seed"], rep)
        agent, res = train_agent(env_cfg, agent_cfg, int(run["steps"]), seed,
                                 stop_on_divergence=bool(run.get("stop_on_divergence", False)))
        tag = f"_rep{rep}" if run["repetitions"] > 1 else ""
        write_diagnostics(res.diagnostics, out.file(f"diagnostics{tag}.csv"))
        write_episodes(res.episodes, out.file(f"episodes{tag}.csv"))
        with open(out.file(f"eval{tag}.csv"), "w") as fh:
            fh.write("step,eval_return\n")
            for step, ret in res.eval_returns:
                fh.write(f"{step},{ret!r}\n")
        agent.encoder.net.save(out.file(f"encoder{tag}.json"))
        agent.learner.dynamics.net.save(out.file(f"dynamics{tag}.json"))
        agent.q_net.save(out.file(f"q_net{tag}.json"))
        last = res.diagnostics[-1] if res.diagnostics else None
        radius = agent.metric_cfg.projection_radius
        diverged = res.diverged_at is not None
        diverged_any |= diverged
        summary.scalars[f"rep{rep}"] = {
            "seed": seed, "diverged": diverged, "diverged_at": res.diverged_at,
            "final_mean_norm": _finite(last.mean_norm) if last else None,
            "max_logged_norm": _finite(max((d.max_norm for d in res.diagnostics), default=float("nan"))),
            "radius": radius, "final_ratio": last.ratio if last else None,
            "ratio_target": agent.metric_cfg.ratio_target, "final_eval_return": res.final_eval,
        }
        if res.final_eval is not None:
            evals.append(res.final_eval)
    summary.scalars["diverged"] = diverged_any
    summary.scalars["mean_final_eval_return"] = float(np.mean(evals)) if evals else None
    if run.get("forbid_divergence"):
        summary.checks["no_divergence"] = "fail" if diverged_any else "pass"
    return summary


def cmd_ratio_study(doc: dict, out: RunDir) -> RunSummary:
    train = train_config(doc)
    r = doc["ratio"]
    env = env_config({"env": {"task": "sparse_pendulum", **doc["env"]}})
    cfg = RatioStudyConfig(env=env, grid=_tuples(r.get("grid")), action=int(r.get("action", 0)),
                           steps=int(r["steps"]), log_every=int(r.get("log_every", 10)))
    res = ratio_study(cfg, train, seed=repetition_seed(doc["seed"], 0))
    with open(out.file("ratio.csv"), "w") as fh:
        fh.write(f"# target={res.target!r}\n")
        fh.write("step,mu_bd,mu_rd,ratio,target\n")
        for s, bd, rd, ratio in zip(res.steps, res.mu_bd, res.mu_rd, res.ratios):
            fh.write(f"{s},{bd!r},{rd!r},{'' if ratio is None else repr(ratio)},{res.target!r}\n")
    write_diagnostics(res.diagnostics, out.file("diagnostics.csv"))
    summary = RunSummary("ratio-study", scalars={
        "target": res.target, "exact_ratio": res.exact_ratio, "final_ratio": _finite(res.final_ratio),
        "relative_gap": _finite(res.relative_gap), "c_R": train.c_R, "c_T": train.c_T})
    summary.checks["exact_ratio"] = "pass" if abs(res.exact_ratio - res.target) <= 1e-8 else "fail"
    return summary


_HANDLERS = {
    "verify-bounds": cmd_verify_bounds,
    "exact-metric": cmd_exact_metric,
    "train": cmd_train,
    "ratio-study": cmd_ratio_study,
    "gen-mdp": cmd_gen_mdp,
}


def run_command(command: str, doc: dict, out_dir) -> RunSummary:
    """Run one command, writing config echo, artifacts, summary and manifest into ``out_dir``."""
    if command not in _HANDLERS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    out = RunDir(out_dir)
    out.write_json("config.json", doc)
    start = time.perf_counter()
    summary = _HANDLERS[command](doc, out)
    summary.wall_time = time.perf_counter() - start
    out.write_json("summary.json", summary.to_dict())
    out.write_manifest()
    return summary


def ratio_target(c_R: float, c_T: float) -> float:
    return mean_distance_ratio(BisimConfig(c_R=c_R, c_T=c_T))
