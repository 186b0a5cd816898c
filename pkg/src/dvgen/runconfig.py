"""Run configuration: an INI file with one section per stage.

Keys are addressed as ``section.key`` on the command line
(``--set train.epochs=10``).  Unknown sections or keys are rejected, and each
section is validated by building the config object it feeds.

Schema (defaults shown)::

    [run]       seed = 0
    [data]      height = 16, width = 16, actions = cardinal, speed = 1.0,
                segment_min = 8, segment_max = 16, blob_sigma = 1.0,
                clip_length = 45, boundary = wrap,
                n_train = 500, n_val = 50, n_test = 100
    [model]     latent_dim = 8, ae_widths = 128,64, activation = elu,
                hidden = 32, cell = lstm, num_layers = 2, num_inducing = 16,
                lambdas = 1,1,0.1,1,0.01, gp_sample_noise = true,
                gp_noise_floor = 1e-4
    [train]     epochs, lr, batch_size, context = 5, predict = 10, log_every = 0
    [trigger]   mode = none, fixed_frames = 15,35, window = 10,
                std_multiplier = 2.0, std_floor = 1e-8, reset_on_switch = false
    [generate]  split = test, contexts = 100, horizon = 40, samples = 50,
                workers = 1
    [evaluate]  windows = 10-25,25-40
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from . import dvg
from .errors import ConfigError
from .synthdata import CARDINAL_ACTIONS, DIAGONAL_ACTIONS, WalkerConfig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _windows(text: str) -> tuple:
    out = []
    for part in text.split(","):
        a, b = part.strip().split("-")
        out.append((int(a), int(b)))
    return tuple(out)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ",".join(f"{a}-{b}" for a, b in v)
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_T = dvg.TrainConfig()
_M = dvg.DvgConfig()
_G = dvg.TriggerConfig()

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {"seed": (int, 0)},
    "data": {
        "height": (int, 16), "width": (int, 16), "actions": (str, "cardinal"),
        "speed": (float, 1.0), "segment_min": (int, 8), "segment_max": (int, 16),
        "blob_sigma": (float, 1.0), "clip_length": (int, 45), "boundary": (str, "wrap"),
        "n_train": (int, 500), "n_val": (int, 50), "n_test": (int, 100),
    },
    "model": {
        "latent_dim": (int, _M.latent_dim), "ae_widths": (_ints, _M.ae_widths),
        "activation": (str, _M.activation), "hidden": (int, _M.hidden), "cell": (str, _M.cell),
        "num_layers": (int, _M.num_layers), "num_inducing": (int, _M.num_inducing),
        "lambdas": (_floats, _M.lambdas), "gp_sample_noise": (_bool, _M.gp_sample_noise),
        "gp_noise_floor": (float, _M.gp_noise_floor),
    },
    "train": {
        "epochs": (int, _T.epochs), "lr": (float, _T.lr), "batch_size": (int, _T.batch_size),
        "context": (int, _T.context), "predict": (int, _T.predict), "log_every": (int, 0),
    },
    "trigger": {
        "mode": (str, _G.mode), "fixed_frames": (_ints, _G.fixed_frames), "window": (int, _G.window),
        "std_multiplier": (float, _G.std_multiplier), "std_floor": (float, _G.std_floor),
        "reset_on_switch": (_bool, _G.reset_on_switch),
    },
    "generate": {
        "split": (str, "test"), "contexts": (int, 100), "horizon": (int, 40),
        "samples": (int, 50), "workers": (int, 1),
    },
    "evaluate": {"windows": (_windows, ((10, 25), (25, 40)))},
}

ACTION_SETS = {"cardinal": CARDINAL_ACTIONS, "diagonal": DIAGONAL_ACTIONS}
SPLITS = ("train", "val", "test")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                                  for s, keys in SCHEMA.items()})

    def __getitem__(self, dotted: str):
        section, key = _split_key(dotted)
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def set(self, dotted: str, text) -> None:
        section, key = _split_key(dotted)
        parser = SCHEMA[section][key][0]
        if not isinstance(text, str):
            self.values[section][key] = text
            return
        try:
            self.values[section][key] = parser(text.strip())
        except ValueError as exc:
            raise ConfigError(f"{dotted}: cannot parse {text!r}: {exc}") from None

    # -- derived configs -------------------------------------------------
    def walker(self) -> WalkerConfig:
        d = self.values["data"]
        if d["actions"] not in ACTION_SETS:
            raise ConfigError(f"data.actions must be one of {sorted(ACTION_SETS)}")
        return WalkerConfig(height=d["height"], width=d["width"], actions=ACTION_SETS[d["actions"]],
                            segment_length=(d["segment_min"], d["segment_max"]),
                            blob_sigma=d["blob_sigma"], clip_length=d["clip_length"],
                            speed=d["speed"], boundary=d["boundary"])

    def model(self) -> dvg.DvgConfig:
        m, d = self.values["model"], self.values["data"]
        return dvg.DvgConfig(height=d["height"], width=d["width"], seed=self.seed, **m)

    def train(self) -> dvg.TrainConfig:
        t = dict(self.values["train"])
        t.pop("log_every")
        return dvg.TrainConfig(seed=self.seed, **t)

    def trigger(self) -> dvg.TriggerConfig:
        return dvg.TriggerConfig(**self.values["trigger"])

    def validate(self) -> "RunConfig":
        """Build every derived config; any invariant violation becomes :class:`ConfigError`."""
        try:
            self.walker()
            self.model()
            tc = self.train()
            self.trigger()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        d, g = self.values["data"], self.values["generate"]
        checks = [
            (tc.epochs >= 0, "train.epochs must be >= 0"),
            (tc.lr >= 0, "train.lr must be >= 0"),
            (tc.batch_size >= 1, "train.batch_size must be >= 1"),
            (tc.context >= 1 and tc.predict >= 1, "train.context and train.predict must be >= 1"),
            (all(d[k] >= 0 for k in ("n_train", "n_val", "n_test")), "episode counts must be >= 0"),
            (g["split"] in SPLITS, f"generate.split must be one of {SPLITS}"),
            (g["contexts"] >= 0 and g["samples"] >= 1 and g["horizon"] >= 1,
             "generate needs contexts >= 0, samples >= 1, horizon >= 1"),
            (g["workers"] >= 1, "generate.workers must be >= 1"),
            (all(0 <= a < b for a, b in self.values["evaluate"]["windows"]),
             "evaluate.windows must be increasing ranges"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    # -- text form -------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            cp[section] = {k: _fmt_value(v) for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {s: {k: _fmt_value(v) for k, v in keys.items()} for s, keys in self.values.items()}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        for section, keys in raw.items():
            for key, text in keys.items():
                cfg.set(f"{section}.{key}", text)
        return cfg.validate()


def _split_key(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"config key {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section {section!r}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    return section, key


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Defaults, then the INI file at ``path``, then ``key=value`` overrides, then ``seed``."""
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, text in cp[section].items():
                cfg.set(f"{section}.{key}", text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, text = item.split("=", 1)
        cfg.set(key.strip(), text)
    if seed is not None:
        cfg.values["run"]["seed"] = int(seed)
    return cfg.validate()
