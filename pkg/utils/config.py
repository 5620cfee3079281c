"""
TOML run configuration with environment overrides.

A config file has `schema_version = 1` and the sections [world], [model],
[training], [hashing], [css] and [cleaning]; omitted keys keep their code
defaults. DUOHASH_<SECTION>__<KEY>=<toml value> overrides a file value,
e.g. DUOHASH_TRAINING__W=0.1.
"""
import dataclasses
import os
from dataclasses import dataclass, field

import toml

from dataset import WorldConfig
from model.model import ModelConfig
from trainer import TrainingConfig
from utils.errors import ConfigError
from utils.hashing import C_LSH_BITS

C_SCHEMA_VERSION = 1
C_ENV_PREFIX = "DUOHASH_"


@dataclass
class HashingConfig:
    l_b: int = C_LSH_BITS
    lsh_seed: int = 0

    def validate(self):
        if self.l_b <= 0:
            raise ConfigError("hashing.l_b must be positive, got {}".format(self.l_b))


@dataclass
class CssConfig:
    k_sweep: list = field(default_factory=lambda: [100, 50, 25, 10, 5, 1])
    renormalize: bool = False
    kmeans_seed: int = 0
    forge_iterations: int = 5000
    lam_vis: float = 1.0
    forge_step: float = 0.05
    cover_pool: int = 100
    split_fraction: float = 0.1

    def validate(self):
        if not self.k_sweep or any(k <= 0 for k in self.k_sweep):
            raise ConfigError("css.k_sweep must list positive template counts")
        if self.forge_iterations < 0 or self.lam_vis < 0 or self.forge_step <= 0:
            raise ConfigError("css collision settings must be nonnegative with a positive step")
        if self.cover_pool <= 0:
            raise ConfigError("css.cover_pool must be positive")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("css.split_fraction must be in (0, 1)")


@dataclass
class CleaningConfig:
    t_mis: float = 0.6
    t_dup: float = 1.0

    def validate(self):
        if not 0.0 < self.t_mis < 2.0:
            raise ConfigError("cleaning.t_mis must be in (0, 2), got {}".format(self.t_mis))
        if self.t_dup <= 0:
            raise ConfigError("cleaning.t_dup must be positive, got {}".format(self.t_dup))


C_SECTIONS = {"world": WorldConfig, "model": ModelConfig, "training": TrainingConfig,
              "hashing": HashingConfig, "css": CssConfig, "cleaning": CleaningConfig}


@dataclass
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    hashing: HashingConfig = field(default_factory=HashingConfig)
    css: CssConfig = field(default_factory=CssConfig)
    cleaning: CleaningConfig = field(default_factory=CleaningConfig)

    def validate(self):
        for name in C_SECTIONS:
            try:
                getattr(self, name).validate()
            except ConfigError:
                raise
            except ValueError as e:
                raise ConfigError("[{}] {}".format(name, e))
        if self.model.d_in != self.world.d_in:
            raise ConfigError("model.d_in ({}) must equal world d_id + d_content ({})"
                              .format(self.model.d_in, self.world.d_in))
        return self

    def as_dict(self):
        snapshot = {"schema_version": C_SCHEMA_VERSION}
        snapshot.update({name: dataclasses.asdict(getattr(self, name)) for name in C_SECTIONS})
        return snapshot


def _parse_env_value(raw):
    try:
        return toml.loads("value = {}".format(raw))["value"]
    except toml.TomlDecodeError:
        return raw


def env_overrides(environ=None):
    """ Section -> {key: value} from DUOHASH_<SECTION>__<KEY> variables """
    environ = os.environ if environ is None else environ
    overrides = {}
    for name in sorted(environ):
        if not name.startswith(C_ENV_PREFIX) or "__" not in name[len(C_ENV_PREFIX):]:
            continue
        section, key = name[len(C_ENV_PREFIX):].split("__", 1)
        section = section.lower()
        if section not in C_SECTIONS:
            raise ConfigError("environment variable {} names unknown section {}".format(name, section))
        # keys match case-insensitively, M and p_T included
        fields = {f.name.lower(): f.name for f in dataclasses.fields(C_SECTIONS[section])}
        if key.lower() not in fields:
            raise ConfigError("environment variable {} names unknown key {}.{}".format(name, section, key))
        overrides.setdefault(section, {})[fields[key.lower()]] = _parse_env_value(environ[name])
    return overrides


def _build_section(name, values):
    cls = C_SECTIONS[name]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError("unknown keys in [{}]: {}".format(name, ", ".join(unknown)))
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError("invalid [{}] section: {}".format(name, e))


def config_from_dict(raw, environ=None):
    """ Build and validate a Config from parsed TOML plus environment overrides """
    raw = dict(raw)
    version = raw.pop("schema_version", C_SCHEMA_VERSION)
    if version != C_SCHEMA_VERSION:
        raise ConfigError("unsupported schema_version {}, expected {}".format(version, C_SCHEMA_VERSION))
    unknown = sorted(set(raw) - set(C_SECTIONS))
    if unknown:
        raise ConfigError("unknown config sections: {}".format(", ".join(unknown)))

    sections = {name: dict(raw.get(name, {})) for name in C_SECTIONS}
    for name, values in env_overrides(environ).items():
        sections[name].update(values)
    world = _build_section("world", sections["world"])
    sections["model"].setdefault("d_in", world.d_in)
    config = Config(world=world, **{name: _build_section(name, sections[name])
                                    for name in C_SECTIONS if name != "world"})
    return config.validate()


def load_config(path=None, environ=None):
    """ Load a TOML config file; no path means code defaults (plus environment overrides)

    @param path Path to a .toml file or None
    @param environ Mapping used for overrides, os.environ by default
    @return Validated Config
    """
    raw = {}
    if path:
        try:
            raw = toml.load(path)
        except FileNotFoundError:
            raise ConfigError("config file {} does not exist".format(path))
        except toml.TomlDecodeError as e:
            raise ConfigError("cannot parse config file {}: {}".format(path, e))
    return config_from_dict(raw, environ)


def dump_config(config, path):
    with open(path, "w") as f:
        toml.dump(config.as_dict(), f)
