import copy
import json
import os

from modules.objectives import OBJECTIVES

MODES = ("single", "distributed", "escape-test", "coupled-test", "select-ablation", "sweep")

PRESETS = {"paper-defaults": "paper_defaults.json"}

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")

DEFAULTS = {
    "mode": "single",
    "objective": "double-well-d",
    "dim": 10,
    "objective_options": {},
    "x0": "saddle",
    "x0_scale": 0.0,

    "n": 10000,
    "m": 1,
    "private": True,
    "epsilon": 1.0,
    "delta": 1e-5,
    "c1": 1.0,
    "c2": 1.0,
    "clip": True,
    "heterogeneity": 0.0,
    "sample_budget_factor": 8,

    "s": 4.0,
    "C": 1.0,
    "omega": 0.1,
    "horizon_hint": 1000,
    "max_steps": None,
    "drift_rewind_mode": "actual-queries",
    "overrides": {"chi": None, "mu": None, "kappa": None, "Gamma": None, "Q": None, "b1": None, "b2": None},

    "escape": {"eta": 0.1, "Gamma": 60, "R": 0.5, "r": 0.05, "sigma": 0.0, "chi": 0.01, "trials": 400},

    "omega_prime": 0.05,
    "holdout_fraction": 1.0,
    "candidate_stride": 1,

    "grid": {},
    "seeds": list(range(20)),
    "out": "runs/default",
    "workers": 1,
    "summary_interval": 0,
    "store_traces": True,
}

GRID_KEYS = ("n", "dim", "epsilon", "m")

X0_CHOICES = ("saddle", "minimum", "origin")


class ConfigError(ValueError):
    pass


class AttrDict(dict):
    def __init__(self, *args, **kwargs):
        super(AttrDict, self).__init__(*args, **kwargs)
        self.__dict__ = self


def _merge(base, update, prefix=""):
    for key, value in update.items():
        name = prefix + key
        if key not in base:
            raise ConfigError("unknown config key '{}'".format(name))
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            _merge(base[key], value, name + ".")
        else:
            base[key] = value


def _read_json(path):
    try:
        with open(path) as f:
            data = json.loads(f.read())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError("cannot read config '{}': {}".format(path, e))
    if not isinstance(data, dict):
        raise ConfigError("config '{}' must hold a JSON object".format(path))
    return data


def parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("--seeds expects a comma-separated list of integers, got '{}'".format(text))
    return seeds


def load_config(path=None, preset=None, overrides=None, environ=None):
    """Defaults, then the config file, then the preset, then command-line overrides."""
    environ = os.environ if environ is None else environ
    h = copy.deepcopy(DEFAULTS)
    explicit_seeds = False
    if path is not None:
        data = _read_json(path)
        explicit_seeds = "seeds" in data
        _merge(h, data)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("unknown preset '{}', expected one of {}".format(preset, sorted(PRESETS)))
        _merge(h, _read_json(os.path.join(CONFIG_DIR, PRESETS[preset])))
        h["preset"] = preset
    else:
        h["preset"] = None
    for key, value in (overrides or {}).items():
        if value is not None:
            _merge(h, {key: value})
            explicit_seeds = explicit_seeds or key == "seeds"
    if not explicit_seeds and "SOSPKIT_SEED" in environ:
        try:
            h["seeds"] = [int(environ["SOSPKIT_SEED"])]
        except ValueError:
            raise ConfigError("SOSPKIT_SEED must be an integer")
    h = AttrDict(h)
    validate(h)
    return h


def validate(h):
    if h.mode not in MODES:
        raise ConfigError("mode must be one of {}, got '{}'".format(MODES, h.mode))
    if h.objective not in OBJECTIVES:
        raise ConfigError("unknown objective '{}', expected one of {}".format(h.objective, sorted(OBJECTIVES)))
    if not isinstance(h.seeds, list) or not h.seeds:
        raise ConfigError("seed list is empty")
    if len(set(h.seeds)) != len(h.seeds):
        raise ConfigError("seed list has duplicates")
    if h.mode == "sweep" and not h.grid:
        raise ConfigError("sweep mode needs a non-empty 'grid'")
    for key, values in h.grid.items():
        if key not in GRID_KEYS:
            raise ConfigError("unknown grid key '{}', expected one of {}".format(key, GRID_KEYS))
        if not isinstance(values, list) or not values:
            raise ConfigError("grid '{}' must be a non-empty list".format(key))
    for key in ("n", "m", "dim", "sample_budget_factor", "candidate_stride", "workers"):
        if not isinstance(h[key], int) or h[key] < 1:
            raise ConfigError("'{}' must be a positive integer".format(key))
    if h.private and not (h.epsilon > 0 and 0 < h.delta < 1):
        raise ConfigError("epsilon must be positive and delta in (0, 1)")
    if not 0 < h.omega < 1 or not 0 < h.omega_prime < 1:
        raise ConfigError("omega and omega_prime must lie in (0, 1)")
    if not 0 < h.holdout_fraction <= 1:
        raise ConfigError("holdout_fraction must lie in (0, 1]")
    if not isinstance(h.x0, list) and h.x0 not in X0_CHOICES:
        raise ConfigError("x0 must be a list or one of {}, got '{}'".format(X0_CHOICES, h.x0))
    if h.drift_rewind_mode not in ("actual-queries", "accepted-path"):
        raise ConfigError("drift_rewind_mode must be 'actual-queries' or 'accepted-path'")
    for key, value in h.overrides.items():
        if value is None:
            continue
        integral = key in ("Gamma", "Q", "b1", "b2")
        if isinstance(value, bool) or not isinstance(value, int if integral else (int, float)) or value <= 0:
            raise ConfigError("'overrides.{}' must be a positive {}".format(key, "integer" if integral else "number"))
        if key == "mu" and value < 1:
            raise ConfigError("'overrides.mu' must be >= 1")
    for key in ("c1", "c2"):
        if h[key] != "gaussian" and not (isinstance(h[key], (int, float)) and h[key] > 0):
            raise ConfigError("'{}' must be positive or \"gaussian\"".format(key))


def build_env(config, config_name, path):
    """Write the effective config next to the run outputs."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, config_name), "w") as f:
        json.dump(config, f, indent=4, sort_keys=True)
