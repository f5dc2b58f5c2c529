"""Experiment configuration: nested dataclasses with a JSON round trip."""

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .extraction import ExtractConfig
from .mmn import FineTuneConfig
from .policy import ImitationConfig, PolicyArch
from .qbn import QbnTrainConfig

SCHEMA = "moorenet.config/1"


@dataclass
class BottleneckSpec:
    size: int
    encoder_widths: tuple = None
    output_activation: str = "linear"


@dataclass
class ExperimentConfig:
    name: str
    env: dict
    arch: PolicyArch
    qbn_h: BottleneckSpec
    qbn_f: BottleneckSpec = None
    seed: int = 0
    imitation: ImitationConfig = field(default_factory=ImitationConfig)
    rollout_episodes: int = 500
    rollout_epsilon: float = 0.0
    qbn_train: QbnTrainConfig = field(default_factory=QbnTrainConfig)
    fine_tune: FineTuneConfig = field(default_factory=FineTuneConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    eval_episodes: int = 100

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["schema"] = SCHEMA
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        schema = doc.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ValueError(f"unsupported config schema {schema!r}")
        return _build(cls, doc)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed))


def _build(cls, doc):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = _build(hint, value)
        else:
            value = _tuples(value)
        kwargs[name] = value
    return cls(**kwargs)


def _tuples(value):
    """JSON arrays back to tuples, recursively."""
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    if isinstance(value, dict):
        return {k: _tuples(v) for k, v in value.items()}
    return value


def load_config(path):
    with open(path) as fh:
        return ExperimentConfig.from_json(fh.read())


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(cfg.to_json())


# -- presets -----------------------------------------------------------------

MCE_IMITATION = ImitationConfig(lr=3e-3, train_episodes=2000, max_epochs=150, patience=30)
TOMITA_IMITATION = ImitationConfig(lr=3e-3, train_episodes=2000, max_epochs=100, patience=20, target_loss=1e-3)


def mce_config(instance, b_h=8, b_f=8, seed=0):
    return ExperimentConfig(
        name=f"{instance}-{b_h}-{b_f}",
        env={"kind": "mce", "instance": instance, "seed": 0, "episode_length": 50},
        arch=PolicyArch(obs_dim=1, action_count=4, hidden_size=8, feature_width=4),
        qbn_h=BottleneckSpec(b_h, None, "linear"),
        qbn_f=BottleneckSpec(b_f, None, "linear"),
        seed=seed,
        imitation=dataclasses.replace(MCE_IMITATION),
    )


# Grammars 3 and 6 need a deeper encoder to reconstruct h faithfully; on the
# others the extra fidelity keeps the net's drift on long runs and inflates
# the machine.
DEEP_ENCODER_GRAMMARS = (3, 6)


def tomita_config(grammar, b_h=16, seed=0):
    widths = (8 * b_h, 4 * b_h) if grammar in DEEP_ENCODER_GRAMMARS else None
    return ExperimentConfig(
        name=f"tomita{grammar}-{b_h}",
        env={"kind": "tomita", "grammar": grammar, "length_range": (1, 50)},
        arch=PolicyArch(obs_dim=2, action_count=2, hidden_size=10),
        qbn_h=BottleneckSpec(b_h, widths, "linear"),
        qbn_f=None,
        seed=seed,
        imitation=dataclasses.replace(TOMITA_IMITATION),
        rollout_episodes=2000,
    )


def preset(name):
    """``amnesia``, ``blind``, ``tracker`` or ``tomitaN``, optionally ``-Bh-Bf``."""
    base, *sizes = name.split("-")
    sizes = [int(s) for s in sizes]
    if base.startswith("tomita"):
        grammar = int(base[6:])
        if not 1 <= grammar <= 7 or len(sizes) > 1:
            raise ValueError(f"bad Tomita preset {name!r}")
        return tomita_config(grammar, *sizes)
    if base not in ("amnesia", "blind", "tracker") or len(sizes) > 2:
        raise ValueError(f"unknown preset {name!r}")
    if base == "blind" and not sizes:
        sizes = [8, 4]
    return mce_config(base, *sizes)
