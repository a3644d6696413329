"""Training/run configuration: JSON file + CLI overrides + built-in defaults."""

from dataclasses import asdict, dataclass, field, fields
import json

from .data import ExposureSimulator
from .model import DomainTransferParams, preset_spec
from .training import LossConfig, Schedule, TrainSettings


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # domain transfer
    alpha: float = 0.03
    gamma: float = 0.45
    delta: float = 1 / 255
    s_max: float = 64.0
    # loss
    epsilon: float = 1.0
    # exposure simulation
    crf_gamma: float = 1 / 2.2
    ev_range: list = field(default_factory=lambda: [-6.0, 3.0])
    contrast_range: list = field(default_factory=lambda: [0.8, 1.2])
    # optimization
    lr_phases: list = field(default_factory=lambda: [[1e-2, 0.75], [5e-5, 0.25]])
    n_stages: int = 0  # 0: one stage per decoder layer
    stage_decay: float = 0.1
    restart_lr_per_stage: bool = False
    clip_norm: float = 5.0
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-8
    pretrain_steps: int = 300
    joint_steps: int = 800
    checkpoint_every: int = 0
    # seeds
    seed: int = 0
    init_seed: int = 0
    data_seed: int = 0
    # data layout
    patch_size: list = field(default_factory=lambda: [64, 64])
    scene_size: list = field(default_factory=lambda: [64, 128])
    # network
    network: str = "desk"
    init_sigma: float = 0.02

    def validate(self):
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(f"{path}: {msg}")

        for name in ("alpha", "delta", "clip_norm", "adam_eps", "crf_gamma"):
            need(getattr(self, name) > 0, name, "must be > 0")
        need(0 < self.gamma < 1, "gamma", "must lie in (0, 1)")
        need(self.s_max > 1, "s_max", "must be > 1")
        need(self.epsilon >= 0, "epsilon", "must be >= 0")
        need(0 <= self.beta1 < 1, "beta1", "must lie in [0, 1)")
        need(0 <= self.beta2 < 1, "beta2", "must lie in [0, 1)")
        need(0 < self.stage_decay <= 1, "stage_decay", "must lie in (0, 1]")
        need(self.n_stages >= 0, "n_stages", "must be >= 0")
        need(self.init_sigma >= 0, "init_sigma", "must be >= 0")
        for name in ("batch_size",):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        for name in ("pretrain_steps", "joint_steps", "checkpoint_every"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        for name in ("ev_range", "contrast_range", "patch_size", "scene_size"):
            value = getattr(self, name)
            need(isinstance(value, list) and len(value) == 2, name, "must be a 2-element list")
            for i, v in enumerate(value):
                need(isinstance(v, (int, float)) and not isinstance(v, bool), f"{name}[{i}]",
                     "must be a number")
            need(value[0] <= value[1] or name in ("patch_size", "scene_size"), name,
                 "must be ordered [low, high]")
        need(-6 <= self.ev_range[0] and self.ev_range[1] <= 3, "ev_range", "must lie within [-6, 3]")
        need(self.contrast_range[0] > 0, "contrast_range[0]", "must be > 0")
        for name in ("patch_size", "scene_size"):
            for i, v in enumerate(getattr(self, name)):
                need(isinstance(v, int) and v >= 16, f"{name}[{i}]", "must be an integer >= 16")
        need(isinstance(self.lr_phases, list) and self.lr_phases, "lr_phases", "must be a non-empty list")
        for i, phase in enumerate(self.lr_phases):
            need(isinstance(phase, list) and len(phase) == 2, f"lr_phases[{i}]",
                 "must be [lr, fraction]")
            need(isinstance(phase[0], (int, float)) and phase[0] > 0, f"lr_phases[{i}][0]", "must be > 0")
            need(isinstance(phase[1], (int, float)) and phase[1] > 0, f"lr_phases[{i}][1]", "must be > 0")
        try:
            preset_spec(self.network)
        except ValueError as e:
            raise ConfigError(f"network: {e}") from None
        return self

    # derived objects -------------------------------------------------

    def transfer(self):
        return DomainTransferParams(self.alpha, self.gamma, self.delta, self.s_max)

    def simulator(self):
        return ExposureSimulator(self.crf_gamma, tuple(self.ev_range), tuple(self.contrast_range))

    def spec(self):
        return preset_spec(self.network)

    def schedule(self):
        stages = self.n_stages or len(self.spec().decoder)
        return Schedule(tuple(tuple(p) for p in self.lr_phases), stages, self.stage_decay,
                        self.restart_lr_per_stage)

    def settings(self, steps):
        return TrainSettings(
            steps=steps,
            batch_size=self.batch_size,
            seed=self.seed,
            schedule=self.schedule(),
            loss=LossConfig(self.epsilon, self.transfer()),
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            clip_norm=self.clip_norm,
        )

    def to_dict(self):
        return asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name, value):
    kind = FIELD_TYPES[name]
    if kind in ("bool", bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true or false, got {value!r}")
        return value
    if kind in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if kind in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if kind in ("str", str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if not isinstance(value, list):
        raise ConfigError(f"{name}: expected a list, got {value!r}")
    return value


def config_from_dict(d, base=None):
    if not isinstance(d, dict):
        raise ConfigError("<root>: config must be a JSON object")
    unknown = sorted(set(d) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    values = (base or TrainConfig()).to_dict()
    for k, v in d.items():
        values[k] = _coerce(k, v)
    return TrainConfig(**values).validate()


def load_config(path=None, overrides=None):
    """Built-in defaults, then the JSON file, then CLI overrides."""
    cfg = TrainConfig()
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"<root>: invalid JSON in {path}: {e}") from None
        cfg = config_from_dict(data, cfg)
    if overrides:
        cfg = config_from_dict(overrides, cfg)
    return cfg.validate()


def parse_override(name, text):
    """Flag values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return _coerce(name, value)
