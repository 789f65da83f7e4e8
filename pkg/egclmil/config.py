'''
egclmil / config.py

Run configuration sections and the load_config() factory

Default values are defined as module level attributes.  A run is described by
one JSON document with the sections below; any key may be omitted and falls
back to its default.  Unknown sections or keys are rejected.

    {
      "task": "seven_class",
      "model":  {"kind": "clam", "proj_dim": 512, ...},
      "loss":   {"mode": "cl", "lambda": 0.5, ...},
      "train":  {"epochs": 50, "lr": 1e-4, "seed": 42, ...},
      "stain":  {"mode": "native", ...},
      "paths":  {"cohort": "cohort/manifest.json", ...},
      "expert_pairs": "pairs.json"
    }
'''
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .errors import ConfigError

_logger = logging.getLogger(__name__)

# =============================================================================
# Default Configuration Values
# =============================================================================
DEFAULT_TASK = 'seven_class'
DEFAULT_SEED = 42

TASK_NAMES = ('binary', 'three_class', 'six_class', 'seven_class')
TASK_ALIASES = {
    '2': 'binary',
    '3': 'three_class',
    '6': 'six_class',
    '7': 'seven_class',
}
MODEL_KINDS = ('clam', 'meanmil_linear', 'meanmil_mlp')
LOSS_MODES = ('baseline', 'cl', 'egcl')
STAIN_MODES = ('native', 'macenko')
BASIS_MODES = ('per_patch', 'pooled')

# JSON key -> dataclass attribute where the two differ
_KEY_ALIASES = {
    'loss': {'lambda': 'lam'},
}


def resolve_task(task) -> str:
    ''' Accepts 2/3/6/7 or a schema name and returns the schema name '''
    name = TASK_ALIASES.get(str(task).strip(), str(task).strip())
    if name not in TASK_NAMES:
        raise ConfigError(
            f'Unknown task {task!r}: expected one of 2, 3, 6, 7 or {", ".join(TASK_NAMES)}'
        )
    return name


# =============================================================================
# Configuration Dataclasses
# =============================================================================
@dataclass(frozen=True)
class ModelConfig:
    '''
    Slide-level head selection and sizes.

    Attributes:
        kind: clam, meanmil_linear or meanmil_mlp
        proj_dim: CLAM projection width d
        attn_hidden: attention network hidden width
        gated: tanh * sigmoid gated attention (False -> tanh only)
        k_instance: patches per side sampled for the instance loss
        mlp_hidden: hidden width of the MeanMIL MLP variant
    '''
    kind: str = 'clam'
    proj_dim: int = 512
    attn_hidden: int = 256
    gated: bool = True
    k_instance: int = 8
    mlp_hidden: int = 256

    def __post_init__(self):
        errors = []
        if self.kind not in MODEL_KINDS:
            errors.append(f'model.kind must be one of {MODEL_KINDS}: {self.kind!r}')
        for name in ('proj_dim', 'attn_hidden', 'k_instance', 'mlp_hidden'):
            if int(getattr(self, name)) < 1:
                errors.append(f'model.{name} must be >= 1: {getattr(self, name)}')
        if errors:
            raise ConfigError(' - '.join(errors))


@dataclass(frozen=True)
class LossConfig:
    '''
    Weights of the composite objective.

    Attributes:
        lam: contrastive weight (JSON key "lambda")
        tau: contrastive temperature
        alpha: L2 weight on every trainable parameter
        gamma: up-weighting of expert-pair negatives (egcl mode)
        instance_weight: weight of the instance hinge term
        mode: baseline, cl or egcl
        queue_capacity: memory queue length
    '''
    lam: float = 0.5
    tau: float = 0.1
    alpha: float = 1e-5
    gamma: float = 2.0
    instance_weight: float = 1.0
    mode: str = 'cl'
    queue_capacity: int = 256

    def __post_init__(self):
        errors = []
        if self.mode not in LOSS_MODES:
            errors.append(f'loss.mode must be one of {LOSS_MODES}: {self.mode!r}')
        if self.lam < 0:
            errors.append(f'loss.lambda must be >= 0: {self.lam}')
        if self.tau <= 0:
            errors.append(f'loss.tau must be > 0: {self.tau}')
        if self.alpha < 0:
            errors.append(f'loss.alpha must be >= 0: {self.alpha}')
        if self.gamma < 1:
            errors.append(f'loss.gamma must be >= 1: {self.gamma}')
        if self.instance_weight < 0:
            errors.append(f'loss.instance_weight must be >= 0: {self.instance_weight}')
        if self.queue_capacity < 1:
            errors.append(f'loss.queue_capacity must be >= 1: {self.queue_capacity}')
        if errors:
            raise ConfigError(' - '.join(errors))

    @property
    def contrastive_active(self) -> bool:
        ''' The queue is only consulted in cl/egcl mode with a positive weight '''
        return self.mode != 'baseline' and self.lam > 0


@dataclass(frozen=True)
class TrainConfig:
    '''
    Optimization and cross-validation protocol.

    Attributes:
        epochs: maximum number of passes over the training partition
        lr: Adam learning rate
        beta1, beta2, eps: Adam moment decay rates and stabilizer
        early_stopping: stop after `patience` epochs without val macro F1 gain
        patience: epochs tolerated without improvement
        seed: seed for splitting, initialization and shuffling
        n_folds: cross-validation folds
        fractions: train/val/test fractions
        jobs: worker processes for folds and sweep points
    '''
    epochs: int = 50
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stopping: bool = True
    patience: int = 10
    seed: int = DEFAULT_SEED
    n_folds: int = 10
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    jobs: int = 1

    def __post_init__(self):
        errors = []
        if self.epochs < 1:
            errors.append(f'train.epochs must be >= 1: {self.epochs}')
        if self.lr <= 0:
            errors.append(f'train.lr must be > 0: {self.lr}')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errors.append(f'train.beta1/beta2 must be in [0, 1): {self.beta1}, {self.beta2}')
        if self.eps <= 0:
            errors.append(f'train.eps must be > 0: {self.eps}')
        if self.patience < 1:
            errors.append(f'train.patience must be >= 1: {self.patience}')
        if self.n_folds < 2:
            errors.append(f'train.n_folds must be >= 2: {self.n_folds}')
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            errors.append(f'train.fractions must be three positive values: {self.fractions}')
        elif abs(sum(self.fractions) - 1.0) > 1e-6:
            errors.append(f'train.fractions must sum to 1: {self.fractions}')
        if self.jobs < 1:
            errors.append(f'train.jobs must be >= 1: {self.jobs}')
        if errors:
            raise ConfigError(' - '.join(errors))


@dataclass(frozen=True)
class StainConfig:
    '''
    Stain handling.

    Attributes:
        mode: native or macenko, the cohort the run trains on
        beta: OD threshold for tissue pixels
        alpha_pct: angle percentile for the extreme stain directions
        basis_mode: per_patch or pooled (one basis per slide)
        reference: optional JSON file overriding the reference basis
    '''
    mode: str = 'native'
    beta: float = 0.15
    alpha_pct: float = 1.0
    basis_mode: str = 'per_patch'
    reference: Optional[str] = None

    def __post_init__(self):
        errors = []
        if self.mode not in STAIN_MODES:
            errors.append(f'stain.mode must be one of {STAIN_MODES}: {self.mode!r}')
        if self.basis_mode not in BASIS_MODES:
            errors.append(f'stain.basis_mode must be one of {BASIS_MODES}: {self.basis_mode!r}')
        if self.beta < 0:
            errors.append(f'stain.beta must be >= 0: {self.beta}')
        if not 0 <= self.alpha_pct < 50:
            errors.append(f'stain.alpha_pct must be in [0, 50): {self.alpha_pct}')
        if errors:
            raise ConfigError(' - '.join(errors))


@dataclass(frozen=True)
class PathsConfig:
    '''
    Attributes:
        cohort: native cohort manifest
        cohort_macenko: manifest of the Macenko-normalized cohort
        runs: directory receiving run directories
    '''
    cohort: Optional[str] = None
    cohort_macenko: Optional[str] = None
    runs: str = 'runs'


@dataclass(frozen=True)
class RunConfig:
    '''
    Complete, validated run description.  Use load_config() to create one.
    '''
    task: str = DEFAULT_TASK
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stain: StainConfig = field(default_factory=StainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    expert_pairs: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'task', resolve_task(self.task))

    @property
    def cohort_manifest(self) -> Path:
        ''' Manifest selected by the stain mode '''
        if self.stain.mode == 'macenko':
            if not self.paths.cohort_macenko:
                raise ConfigError('stain.mode=macenko requires paths.cohort_macenko')
            return Path(self.paths.cohort_macenko)
        if not self.paths.cohort:
            raise ConfigError('paths.cohort is not set')
        return Path(self.paths.cohort)


_SECTIONS = {
    'model': ModelConfig,
    'loss': LossConfig,
    'train': TrainConfig,
    'stain': StainConfig,
    'paths': PathsConfig,
}
_TOP_LEVEL = ('task', 'expert_pairs')


# =============================================================================
# Config File Parsing
# =============================================================================
def _read_config_file(config_file: Path) -> dict:
    '''
    Reads the JSON run configuration and returns it as a dictionary.
    No file yields an empty dictionary (all defaults); a named file that
    does not exist is an error.
    '''
    if config_file is None:
        return {}
    if not Path(config_file).is_file():
        raise ConfigError(f'Configuration file not found: {config_file}')

    _logger.debug(f'Reading config file: {config_file}')
    try:
        with open(config_file, 'r') as f:
            settings = json.load(f)
    except (OSError, PermissionError) as e:
        raise ConfigError(f'Unable to read configuration file {config_file}: {e}') from e
    except json.JSONDecodeError as e:
        raise ConfigError(f'Configuration file {config_file} is not valid JSON: {e}') from e

    if not isinstance(settings, dict):
        raise ConfigError(f'Configuration file {config_file} must hold a JSON object')
    return settings


def _resolve_value(arg_value, config_value, default_value):
    '''Returns the highest priority value: arg > config file > default.'''
    if arg_value is not None:
        return arg_value
    if config_value is not None:
        return config_value
    return default_value


def _check_keys(settings: dict, allowed, where: str) -> None:
    unknown = sorted(set(settings) - set(allowed))
    if unknown:
        raise ConfigError(f'Unknown key(s) in {where}: {", ".join(unknown)}')


def _build_section(name: str, file_section: dict, override_section: dict):
    cls = _SECTIONS[name]
    aliases = _KEY_ALIASES.get(name, {})
    attr_names = {f.name for f in fields(cls)}
    json_names = {aliases.get(a, a): a for a in attr_names}
    json_names.update({k: v for k, v in aliases.items()})
    # accept the attribute name as well as its JSON alias
    allowed = set(json_names) | attr_names

    for where, section in (('config file', file_section), ('overrides', override_section)):
        if not isinstance(section, dict):
            raise ConfigError(f'Section {name!r} in {where} must be a JSON object')
        _check_keys(section, allowed, f'{where} section {name!r}')

    def lookup(section, attr):
        for key, target in json_names.items():
            if target == attr and key in section:
                return section[key]
        return section.get(attr)

    values = {}
    defaults = cls()
    for f in fields(cls):
        value = _resolve_value(
            lookup(override_section, f.name),
            lookup(file_section, f.name),
            getattr(defaults, f.name)
        )
        if f.name == 'fractions':
            value = tuple(float(v) for v in value)
        values[f.name] = value
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f'Bad configuration value in section {name!r}: {e}') from e


# =============================================================================
# Factory Function
# =============================================================================
def load_config(config_file: Path = None, overrides: dict = None) -> RunConfig:
    '''
    Load and validate a run configuration, returning an immutable RunConfig.

    Priority order for each setting: overrides > config file > default

    Args:
        config_file: Path to the JSON run configuration (optional)
        overrides: Same shape as the JSON document; used by CLI flags

    Returns:
        RunConfig: Validated, immutable configuration object

    Raises:
        ConfigError: Unknown keys or invalid values
    '''
    file_settings = _read_config_file(config_file)
    overrides = overrides or {}

    allowed = set(_SECTIONS) | set(_TOP_LEVEL)
    _check_keys(file_settings, allowed, f'config file {config_file}')
    _check_keys(overrides, allowed, 'overrides')

    sections = {}
    for name in _SECTIONS:
        sections[name] = _build_section(
            name, file_settings.get(name) or {}, overrides.get(name) or {}
        )

    try:
        config = RunConfig(
            task=_resolve_value(overrides.get('task'), file_settings.get('task'), DEFAULT_TASK),
            expert_pairs=_resolve_value(
                overrides.get('expert_pairs'), file_settings.get('expert_pairs'), None
            ),
            **sections
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f'Bad configuration value assignment in {config_file}: {e}') from e

    _logger.debug(
        f'Config loaded: task={config.task}, model={config.model.kind}, '
        f'mode={config.loss.mode}, lambda={config.loss.lam}, seed={config.train.seed}'
    )
    return config


def config_to_dict(config: RunConfig) -> dict:
    ''' Fully expanded effective configuration, JSON serializable '''
    result = {'task': config.task}
    for name in _SECTIONS:
        section = getattr(config, name)
        aliases = {v: k for k, v in _KEY_ALIASES.get(name, {}).items()}
        values = {}
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = list(value)
            values[aliases.get(f.name, f.name)] = value
        result[name] = values
    result['expert_pairs'] = config.expert_pairs
    return result


def save_config(config: RunConfig, path: Path) -> None:
    ''' Write the effective configuration next to run results '''
    with open(path, 'w') as f:
        json.dump(config_to_dict(config), f, indent=2, sort_keys=True)
        f.write('\n')


def with_loss(config: RunConfig, **changes) -> RunConfig:
    ''' Copy of the config with loss settings replaced (used by sweeps) '''
    return replace(config, loss=replace(config.loss, **changes))


def with_train(config: RunConfig, **changes) -> RunConfig:
    ''' Copy of the config with train settings replaced '''
    return replace(config, train=replace(config.train, **changes))
