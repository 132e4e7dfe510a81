"""TOML run configuration for the command-line pipelines."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


DEFAULTS: dict = {
    "seed": None,
    "family": "gaussian",
    "output_dir": "out",
    "threads": 1,
    "domain": {"kind": "lattice", "rows": 10, "cols": 10, "spacing": [1.0, 1.0]},
    "simulation": {
        "T": 14,
        "horizon": 1,
        "beta": [1.0],
        "sigma2_z": 0.03,
        "n_covariates": 0,
        "study": "gaussian",
        "gqn": {},
    },
    "data": {"observations": None, "latent": None, "truth": None, "intercept": True, "beta": None,
             "calibration": None},
    "basis": {"r_s": 15, "r_t": None, "bandwidth": None, "bandwidth_factor": 1.5,
              "n_mc": 1000, "standardize": True},
    "calibration": {"target": "gqn", "replicates": 500, "prior": {}, "materialize": False},
    "epr": {"n_reps": 1000, "alpha_xi": 0.001, "time_varying": False, "hyperprior": {},
            "sigma2_known": True},
    "holdout": {"fraction": 0.0},
    "scoring": {"log_scale": False, "record_timing": False},
    "output": {"draw_blocks": ["xi", "beta", "eta", "q", "theta"]},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def set_dotted(cfg: dict, dotted: str, value) -> None:
    """Apply a ``section.key=value`` override (value parsed as TOML when possible)."""
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = parsed


def resolve(raw: dict, base_dir: Path | None = None) -> dict:
    """Fill defaults and validate; raises :class:`ConfigError`."""
    cfg = _merge(DEFAULTS, raw)
    if cfg["seed"] is None:
        raise ConfigError("config must set an integer 'seed'")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("'seed' must be an integer")
    if cfg["family"] not in ("gaussian", "poisson", "bernoulli"):
        raise ConfigError(f"unknown family {cfg['family']!r}")
    frac = cfg["holdout"]["fraction"]
    if not 0.0 <= frac < 1.0:
        raise ConfigError("holdout.fraction must lie in [0, 1)")
    sim = cfg["simulation"]
    if sim["horizon"] < 0 or sim["T"] < 1:
        raise ConfigError("simulation.T must be >= 1 and horizon >= 0")
    if cfg["calibration"]["target"] not in ("gqn", "var1"):
        raise ConfigError("calibration.target must be 'gqn' or 'var1'")
    if cfg["calibration"]["replicates"] < 2:
        raise ConfigError("calibration.replicates must be >= 2")
    dom = cfg["domain"]
    if dom["kind"] not in ("lattice", "areal", "point_set"):
        raise ConfigError(f"unknown domain kind {dom['kind']!r}")
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    out = Path(cfg["output_dir"])
    cfg["output_dir"] = str(out if out.is_absolute() else base_dir / out)
    for section, key in (("domain", "geojson"), ("data", "observations"), ("data", "latent"),
                         ("data", "truth"),
                         ("data", "calibration"), ("domain", "sites")):
        val = cfg[section].get(key)
        if val is None:
            continue
        p = Path(val)
        p = p if p.is_absolute() else base_dir / p
        cfg[section][key] = str(p)
    if dom["kind"] == "areal":
        if not dom.get("geojson"):
            raise ConfigError("areal domains need domain.geojson")
        if not Path(dom["geojson"]).exists():
            raise ConfigError(f"missing file {dom['geojson']}")
    return cfg


def load_config(path, overrides=()) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = load_toml(path)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        set_dotted(raw, key.strip(), val.strip())
    return resolve(raw, path.parent)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()
