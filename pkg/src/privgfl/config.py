"""Experiment configuration files.

Configs are TOML documents.  Every setting has a dotted path
(``section.key``) which is also how sweep axes name it::

    seeds = [0, 1]
    output = "runs/fig3"

    [task]
    kind = "regression"        # regression | classification | csv
    P = 10
    K = 100
    N = 100
    M = 2
    rho = 0.1

    [graph]
    preset = "erdos_renyi"     # complete | ring | erdos_renyi | edges
    p = 0.3
    seed = 1

    [train]
    mu = 0.7
    rounds = 300
    L = 11
    epochs = [1, 10]
    batch = [5, 10]

    [privacy]
    schemes = ["none", "graph_homomorphic", "independent_laplace"]
    sigma_g_sq = 0.1
    masking = "off"            # off | secret_sharing

    [sweep]
    "privacy.sigma_g_sq" = [0.001, 0.01, 0.1, 1, 2, 10]

See README.md for the full key list.
"""

from __future__ import annotations

import copy
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import privacy

_INT = "int"
_FLOAT = "float"
_STR = "str"
_BOOL = "bool"
_ANY = "any"

# section -> key -> (type, default); default None means optional/absent
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "": {
        "seed": (_INT, None),
        "seeds": (_ANY, None),
        "output": (_STR, "runs"),
    },
    "task": {
        "kind": (_STR, "regression"),
        "P": (_INT, 10),
        "K": (_INT, 100),
        "N": (_ANY, 100),
        "N_total": (_INT, None),
        "partition": (_ANY, "equal"),
        "M": (_INT, 2),
        "rho": (_FLOAT, 0.1),
        "data_seed": (_INT, None),
        "eig_range": (_ANY, [0.5, 2.0]),
        "noise_var": (_ANY, [0.05, 0.5]),
        "test_size": (_INT, 256),
        "shift": (_FLOAT, 1.0),
        "label_noise": (_FLOAT, 0.1),
        "path": (_STR, None),
        "test_path": (_STR, None),
        "target": (_STR, "classification"),
        "oracle": (_STR, "auto"),
    },
    "graph": {
        "preset": (_STR, "erdos_renyi"),
        "P": (_INT, None),
        "p": (_FLOAT, 0.3),
        "seed": (_INT, 1),
        "edges": (_ANY, None),
    },
    "train": {
        "mu": (_FLOAT, 0.7),
        "rounds": (_INT, 300),
        "L": (_INT, 11),
        "epochs": (_ANY, [1, 10]),
        "batch": (_ANY, [5, 10]),
        "workers": (_INT, 1),
        "clip_B": (_FLOAT, None),
    },
    "privacy": {
        "schemes": (_ANY, ["none", "graph_homomorphic", "independent_laplace"]),
        "sigma_g_sq": (_FLOAT, 0.1),
        "masking": (_STR, "off"),
        "B": (_FLOAT, None),
        "mask_scale": (_FLOAT, 1.0),
        "dh_modulus": (_INT, privacy.DH_MODULUS),
        "dh_generator": (_INT, privacy.DH_GENERATOR),
    },
}

TASK_KINDS = ("regression", "classification", "csv")
GRAPH_PRESETS = ("complete", "ring", "erdos_renyi", "edges")
ORACLES = ("auto", "closed_form", "numeric", "none")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def known_paths() -> set[str]:
    return {(f"{s}.{k}" if s else k) for s, keys in SCHEMA.items() for k in keys}


def _check_type(path: str, value, kind: str):
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    elif kind == _STR:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif kind == _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
    return value


def _int_pair(path: str, value) -> tuple[int, int]:
    if isinstance(value, int) and not isinstance(value, bool):
        return value, value
    if (isinstance(value, list) and len(value) == 2
            and all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
        if not 1 <= value[0] <= value[1]:
            raise ConfigError(path, f"range must satisfy 1 <= lo <= hi, got {value}")
        return value[0], value[1]
    raise ConfigError(path, f"expected an integer or [lo, hi], got {value!r}")


def _float_pair(path: str, value) -> tuple[float, float]:
    if (isinstance(value, list) and len(value) == 2
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        lo, hi = float(value[0]), float(value[1])
        if not 0 <= lo <= hi:
            raise ConfigError(path, f"range must satisfy 0 <= lo <= hi, got {value}")
        return lo, hi
    raise ConfigError(path, f"expected [lo, hi], got {value!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict  # normalized nested dict with defaults filled in
    seeds: tuple[int, ...]
    sweep: tuple[tuple[str, tuple], ...]

    def get(self, path: str):
        section, _, key = path.rpartition(".")
        return self.raw[section][key] if section else self.raw[""][key]

    @property
    def task(self) -> dict:
        return self.raw["task"]

    @property
    def graph(self) -> dict:
        return self.raw["graph"]

    @property
    def train(self) -> dict:
        return self.raw["train"]

    @property
    def privacy(self) -> dict:
        return self.raw["privacy"]

    @property
    def output(self) -> str:
        return self.raw[""]["output"]

    def points(self) -> list[tuple[int, dict[str, Any], "ExperimentConfig"]]:
        """Cartesian sweep points as ``(index, {path: value}, config)``."""
        if not self.sweep:
            return [(0, {}, self)]
        axes = [p for p, _ in self.sweep]
        out = []
        for idx, combo in enumerate(itertools.product(*(vals for _, vals in self.sweep))):
            raw = copy.deepcopy(self.raw)
            for path, val in zip(axes, combo):
                section, _, key = path.rpartition(".")
                raw[section][key] = val
            cfg = normalize(_denormalize(raw), sweep_allowed=False)
            out.append((idx, dict(zip(axes, combo)), cfg))
        return out


def _denormalize(raw: dict) -> dict:
    doc = {k: v for k, v in raw[""].items() if v is not None}
    for section in SCHEMA:
        if section:
            doc[section] = {k: v for k, v in raw[section].items() if v is not None}
    return doc


def normalize(doc: dict, sweep_allowed: bool = True) -> ExperimentConfig:
    """Validate a parsed TOML document and fill defaults."""
    raw: dict[str, dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        src = doc if section == "" else doc.get(section, {})
        if section and not isinstance(src, dict):
            raise ConfigError(section, "expected a table")
        out = {}
        for key, (kind, default) in keys.items():
            path = f"{section}.{key}" if section else key
            if key in src:
                out[key] = _check_type(path, src[key], kind)
            else:
                out[key] = copy.deepcopy(default)
        extra = [k for k in src if k not in keys and not (section == "" and (k in SCHEMA or k == "sweep"))]
        if extra:
            where = f"{section}.{extra[0]}" if section else extra[0]
            raise ConfigError(where, "unknown setting")
        raw[section] = out
    unknown_sections = [k for k, v in doc.items() if isinstance(v, dict) and k not in SCHEMA and k != "sweep"]
    if unknown_sections:
        raise ConfigError(unknown_sections[0], "unknown section")

    t = raw["task"]
    if t["kind"] not in TASK_KINDS:
        raise ConfigError("task.kind", f"must be one of {', '.join(TASK_KINDS)}")
    for key in ("P", "K", "M"):
        if t[key] < 1:
            raise ConfigError(f"task.{key}", "must be at least 1")
    if t["rho"] < 0:
        raise ConfigError("task.rho", "must be nonnegative")
    if t["N_total"] is None:
        _int_pair("task.N", t["N"])
    elif t["N_total"] < t["P"] * t["K"]:
        raise ConfigError("task.N_total", "fewer rows than agents")
    _float_pair("task.eig_range", t["eig_range"])
    _float_pair("task.noise_var", t["noise_var"])
    if t["eig_range"][0] <= 0:
        raise ConfigError("task.eig_range", "eigenvalues must be positive")
    if t["kind"] == "csv" and not t["path"]:
        raise ConfigError("task.path", "required when task.kind = 'csv'")
    if t["oracle"] not in ORACLES:
        raise ConfigError("task.oracle", f"must be one of {', '.join(ORACLES)}")
    part = t["partition"]
    if not (isinstance(part, str) or (isinstance(part, list) and all(isinstance(c, int) for c in part))):
        raise ConfigError("task.partition", "expected 'equal', 'dirichlet(alpha, seed)' or a count list")

    g = raw["graph"]
    if g["preset"] not in GRAPH_PRESETS:
        raise ConfigError("graph.preset", f"must be one of {', '.join(GRAPH_PRESETS)}")
    if g["P"] is not None and g["P"] != t["P"]:
        raise ConfigError("graph.P", f"disagrees with task.P = {t['P']}")
    if g["preset"] == "edges":
        edges = g["edges"]
        if not isinstance(edges, list) or not all(
                isinstance(e, list) and len(e) == 2 and all(isinstance(x, int) for x in e)
                for e in edges):
            raise ConfigError("graph.edges", "expected a list of [p, m] integer pairs")
    if not 0 <= g["p"] <= 1:
        raise ConfigError("graph.p", "edge probability must lie in [0, 1]")

    tr = raw["train"]
    if tr["mu"] < 0:
        raise ConfigError("train.mu", "must be nonnegative")
    if tr["rounds"] < 0:
        raise ConfigError("train.rounds", "must be nonnegative")
    if not 1 <= tr["L"] <= t["K"]:
        raise ConfigError("train.L", f"must lie in [1, task.K = {t['K']}]")
    tr["epochs"] = list(_int_pair("train.epochs", tr["epochs"]))
    tr["batch"] = list(_int_pair("train.batch", tr["batch"]))
    if tr["workers"] < 1:
        raise ConfigError("train.workers", "must be at least 1")

    pv = raw["privacy"]
    schemes = pv["schemes"]
    if isinstance(schemes, str):
        schemes = [schemes]
    if not isinstance(schemes, list) or not schemes:
        raise ConfigError("privacy.schemes", "expected a non-empty list")
    for s in schemes:
        if s not in privacy.SCHEMES:
            raise ConfigError("privacy.schemes", f"unknown scheme {s!r}")
    if len(set(schemes)) != len(schemes):
        raise ConfigError("privacy.schemes", "duplicate scheme")
    pv["schemes"] = list(schemes)
    if not (pv["sigma_g_sq"] >= 0 and math.isfinite(pv["sigma_g_sq"])):
        raise ConfigError("privacy.sigma_g_sq", "must be a finite nonnegative number")
    if pv["masking"] not in ("off", "secret_sharing"):
        raise ConfigError("privacy.masking", "must be 'off' or 'secret_sharing'")
    if pv["B"] is not None and pv["B"] <= 0:
        raise ConfigError("privacy.B", "must be positive")

    top = raw[""]
    if top["seeds"] is not None and top["seed"] is not None:
        raise ConfigError("seeds", "give either seed or seeds, not both")
    if top["seeds"] is not None:
        seeds = top["seeds"]
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            seeds = [seeds]
        if not isinstance(seeds, list) or not seeds or not all(
                isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
            raise ConfigError("seeds", "expected a non-empty list of nonnegative integers")
    else:
        seeds = [top["seed"] if top["seed"] is not None else 0]
        if seeds[0] < 0:
            raise ConfigError("seed", "must be nonnegative")

    sweep_doc = doc.get("sweep", {})
    if not isinstance(sweep_doc, dict):
        raise ConfigError("sweep", "expected a table of path = [values]")
    if sweep_doc and not sweep_allowed:
        raise ConfigError("sweep", "nested sweeps are not allowed")
    paths = known_paths()
    sweep = []
    for path, values in _flatten(sweep_doc):
        if path not in paths or path in ("seed", "seeds", "output"):
            raise ConfigError(f"sweep.{path}", "does not name a sweepable setting")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{path}", "expected a non-empty list of values")
        if len({repr(v) for v in values}) != len(values):
            raise ConfigError(f"sweep.{path}", "repeated value; output names would collide")
        sweep.append((path, tuple(values)))
    cfg = ExperimentConfig(raw, tuple(seeds), tuple(sweep))
    # validate every sweep point up front so a bad value fails before any run
    if sweep:
        for path, values in sweep:
            for v in values:
                trial = copy.deepcopy(raw)
                section, _, key = path.rpartition(".")
                trial[section][key] = v
                try:
                    normalize(_denormalize(trial), sweep_allowed=False)
                except ConfigError as exc:
                    raise ConfigError(f"sweep.{path}", f"value {v!r}: {exc}") from None
    return cfg


def _flatten(d: dict, prefix: str = ""):
    # accepts both  "privacy.sigma_g_sq" = [...]  and  [sweep.privacy] sigma_g_sq = [...]
    for k, v in d.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, path + ".")
        else:
            yield path, v


def loads(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"cannot parse config: {exc}") from None
    return normalize(doc)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    return loads(text)
