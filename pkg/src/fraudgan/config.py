"""Run configuration.

A config file is flat ``key = value`` text; ``#`` starts a comment. Every key
is a field of :class:`TrainConfig` and falls back to the default below when
absent. Unknown keys are errors. Defaults follow the published setup where it
states a value; :data:`DESK` overrides them for laptop-scale runs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigFileError(ValueError):
    pass


@dataclass
class TrainConfig:
    # randomness
    seed: int = 0
    # data
    data: str = ""  # JSONL corpus; empty means a synthetic corpus from the synth_* keys
    embeddings: str = ""  # pretrained text embedding file; empty means seeded random vectors
    T: int = 400
    C: int = 5
    min_freq: int = 1
    supervision: float = 0.7  # fraction of each label used for training
    synth_vocab: int = 200
    synth_size: int = 2000
    synth_fraud: float = 0.3
    synth_rho: float = 0.8
    synth_bot: float = 0.0  # fraction of fraud drawn from the bot distribution
    synth_min_len: int = 8
    synth_max_len: int = 24
    # model sizes
    embed_dim: int = 50
    gen_embed_dim: int = 32
    gen_hidden_dim: int = 32
    noise_dim: int = 16
    score_dim: int = 8
    windows: str = "1,2,3"
    filters: int = 100
    # schedule
    g_pretrain_epochs: int = 100
    d_pretrain_epochs: int = 50
    adv_iterations: int = 120
    gen_steps: int = 5  # IT
    disc_epochs: int = 3  # IT'
    disc_steps_per_epoch: int = 0  # 0 means one pass over the larger class
    gen_batch: int = 50
    disc_batch: int = 64
    rollouts: int = 16
    igm_batch: int = 32
    early_stop_patience: int = 0  # 0 disables the AUC-plateau stop
    # optimisation
    gamma: float = 1.0
    mle_rate: float = 1e-2
    disc_rate: float = 1e-4
    disc_optimizer: str = "adam"
    lam: float = 1.0
    baseline: bool = False
    # switches
    score_in_g: bool = True
    score_in_d: bool = True
    regularizer_on: bool = True
    augment: bool = True  # add generated fraud to D_g negatives
    features: str = ""  # comma list over mnr, rl, se, sr

    def window_sizes(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self.windows.split(",") if w.strip())

    def feature_list(self) -> tuple[str, ...]:
        return tuple(f.strip() for f in self.features.split(",") if f.strip())

    def validate(self) -> "TrainConfig":
        counts = {
            "T": self.T, "min_freq": self.min_freq, "embed_dim": self.embed_dim,
            "gen_batch": self.gen_batch, "disc_batch": self.disc_batch, "rollouts": self.rollouts,
            "gen_steps": self.gen_steps, "disc_epochs": self.disc_epochs, "igm_batch": self.igm_batch,
            "filters": self.filters, "noise_dim": self.noise_dim,
        }
        for key, v in counts.items():
            if v < 1:
                raise ConfigFileError(f"{key} must be >= 1")
        for key in ("g_pretrain_epochs", "d_pretrain_epochs", "adv_iterations",
                    "disc_steps_per_epoch", "early_stop_patience"):
            if getattr(self, key) < 0:
                raise ConfigFileError(f"{key} must be >= 0")
        if self.C not in (2, 5):
            raise ConfigFileError("C must be 2 or 5")
        if not 0 < self.supervision < 1:
            raise ConfigFileError("supervision must lie strictly between 0 and 1")
        if self.lam < 0 or self.gamma < 0:
            raise ConfigFileError("lam and gamma must be non-negative")
        if self.disc_optimizer not in ("adam", "sgd"):
            raise ConfigFileError("disc_optimizer must be adam or sgd")
        if not self.window_sizes():
            raise ConfigFileError("windows must list at least one width")
        return self

    def as_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


DESK = dict(
    T=32,
    filters=16,
    g_pretrain_epochs=100,
    d_pretrain_epochs=3,
    adv_iterations=30,
    gen_steps=1,
    disc_epochs=1,
    rollouts=4,
    gamma=1e-2,
    disc_rate=1e-3,
    baseline=True,
)


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK, **overrides}).validate()


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigFileError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return replace(base or TrainConfig(), **values).validate()


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.as_dict().items())
