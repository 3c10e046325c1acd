"""
Configuration for the MLGSC hyperspectral clustering toolkit.

Two layers live here:

* process settings (logging, thread caps) read from the environment, in the
  same dataclass style the rest of the tooling uses, and
* the run configuration tree (views, encoder, losses, training, clustering)
  as validated pydantic models with a flat INI-style text format.
"""
import configparser
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, root_validator, validator

load_dotenv()

PRESET_DIR = Path(__file__).resolve().parent / 'presets'
U64_MAX = 2 ** 64 - 1


class ConfigValidationError(ValueError):
    """Raised when a run configuration violates its invariants."""
    exit_code = 2


# ============================================================================
# PROCESS SETTINGS (environment)
# ============================================================================

@dataclass
class LoggingConfig:
    """Structured logging configuration."""
    LEVEL: str = os.getenv('LOG_LEVEL', 'INFO')
    FORMAT: str = os.getenv('LOG_FORMAT', 'json')  # json or text
    OUTPUT: str = os.getenv('LOG_OUTPUT', 'stderr')  # stderr, file, or both

    # File logging
    LOG_FILE: str = os.getenv('LOG_FILE', 'logs/mlgsc.log')
    MAX_FILE_SIZE: int = int(os.getenv('LOG_MAX_SIZE', '10485760'))  # 10MB
    BACKUP_COUNT: int = int(os.getenv('LOG_BACKUP_COUNT', '5'))

    # Structured logging fields
    SERVICE_NAME: str = os.getenv('SERVICE_NAME', 'mlgsc')
    ENVIRONMENT: str = os.getenv('ENVIRONMENT', 'research')
    VERSION: str = os.getenv('APP_VERSION', '1.0.0')


@dataclass
class AppConfig:
    """Process-level knobs."""
    # Caps BLAS/OpenMP threads; 0 leaves the libraries alone
    THREADS: int = int(os.getenv('MLGSC_THREADS', '0'))
    OUTPUT_DIR: str = os.getenv('MLGSC_OUTPUT_DIR', 'runs')


class Settings:
    """Combines the environment-driven config sections."""

    def __init__(self):
        self.logging = LoggingConfig()
        self.app = AppConfig()

        self._validate_config()

    def _validate_config(self):
        """Validate all environment settings."""
        errors = []

        if self.logging.LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            errors.append(f"LOG_LEVEL must be a logging level name, got {self.logging.LEVEL!r}")
        if self.logging.FORMAT not in ('json', 'text'):
            errors.append(f"LOG_FORMAT must be 'json' or 'text', got {self.logging.FORMAT!r}")
        if self.logging.OUTPUT not in ('stderr', 'file', 'both'):
            errors.append(f"LOG_OUTPUT must be 'stderr', 'file' or 'both', got {self.logging.OUTPUT!r}")
        if self.app.THREADS < 0:
            errors.append("MLGSC_THREADS must be >= 0")

        if errors:
            raise ConfigValidationError(
                "Configuration validation failed:\n" + "\n".join(f"- {error}" for error in errors))

    def get_logging_config(self) -> dict:
        """Get logging configuration as a dictionary."""
        return {
            'level': self.logging.LEVEL,
            'format': self.logging.FORMAT,
            'output': self.logging.OUTPUT,
            'log_file': self.logging.LOG_FILE,
            'max_file_size': self.logging.MAX_FILE_SIZE,
            'backup_count': self.logging.BACKUP_COUNT,
            'service_name': self.logging.SERVICE_NAME,
            'environment': self.logging.ENVIRONMENT,
            'version': self.logging.VERSION
        }

    def thread_limit(self) -> Optional[int]:
        """Thread cap for numerical libraries, or None when uncapped."""
        return self.app.THREADS or None


# ============================================================================
# RUN CONFIGURATION MODELS
# ============================================================================

def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(',') if item.strip()]
    return value


class _Section(BaseModel):
    class Config:
        extra = 'forbid'
        validate_assignment = True


class ViewConfig(_Section):
    """Feature views and graph construction."""
    pca_components_spectral: int = 4
    pca_components_texture: int = 3
    window_w: int = 5
    knn_k: int = 10
    se_radii: List[int] = Field(default_factory=lambda: [1, 2, 3])
    drop_prob_delta: float = 0.1

    _split_radii = validator('se_radii', pre=True, allow_reuse=True)(_split_list)

    @validator('pca_components_spectral', 'pca_components_texture', 'knn_k')
    def _positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator('window_w')
    def _odd_window(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("window_w must be a positive odd number")
        return v

    @validator('se_radii')
    def _increasing_radii(cls, v):
        if not v:
            raise ValueError("se_radii must not be empty")
        if v[0] < 1 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("se_radii must be positive and strictly increasing")
        return v

    @validator('drop_prob_delta')
    def _delta_range(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("drop_prob_delta must lie in [0, 1)")
        return v


class EncoderConfig(_Section):
    """GCN encoder sizes."""
    hidden_dim: int = 64
    output_dim: int = 32

    @validator('hidden_dim', 'output_dim')
    def _positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v


class ContrastiveConfig(_Section):
    """Temperature and zero-norm handling for the contrastive losses."""
    tau: float = 0.05
    # 'error' rejects zero-norm embeddings, 'clamp' floors the norm at 1e-12
    zero_norm_policy: str = 'error'

    @validator('tau')
    def _positive_tau(cls, v):
        if v <= 0:
            raise ValueError("tau must be > 0")
        return v

    @validator('zero_norm_policy')
    def _policy(cls, v):
        if v not in ('error', 'clamp'):
            raise ValueError("zero_norm_policy must be 'error' or 'clamp'")
        return v


class FusionConfig(_Section):
    """Feature fusion and self-expression settings."""
    granularity: str = 'coordinate'
    sx_adjacency: str = 'spectral'
    sx_lambda: float = 100.0
    # unit-length rows of F_s in the dictionary
    sx_normalize: bool = True
    # 'mean' carries L_SE per node in the total, 'sum' the plain sum
    sx_reduction: str = 'mean'

    @validator('granularity')
    def _granularity(cls, v):
        if v not in ('coordinate', 'node'):
            raise ValueError("granularity must be 'coordinate' or 'node'")
        return v

    @validator('sx_adjacency')
    def _sx_adjacency(cls, v):
        if v not in ('spectral', 'texture', 'mean'):
            raise ValueError("sx_adjacency must be 'spectral', 'texture' or 'mean'")
        return v

    @validator('sx_reduction')
    def _sx_reduction(cls, v):
        if v not in ('mean', 'sum'):
            raise ValueError("sx_reduction must be 'mean' or 'sum'")
        return v

    @validator('sx_lambda')
    def _positive_lambda(cls, v):
        if v <= 0:
            raise ValueError("sx_lambda must be > 0")
        return v


class TrainConfig(_Section):
    """Joint optimization settings, with every module config embedded."""
    epochs: int = 200
    learning_rate: float = 1e-3
    # 'projected_gd' steps C by the inverse Lipschitz constant, 'adam' uses the shared optimizer
    sx_update: str = 'projected_gd'
    sx_learning_rate: Optional[float] = None
    seed: int = 0
    enable_cnode: bool = True
    enable_dnode: bool = True
    enable_graph: bool = True
    enable_se: bool = True
    inter_view_pairing: str = 'mean'
    use_texture_view: bool = True
    use_spectral_view: bool = True
    use_attention_pooling: bool = True
    resample_augmentation_each_epoch: bool = False
    resample_corruption_each_epoch: bool = False
    freeze_encoders: bool = False
    grad_clip_norm: Optional[float] = 5.0
    divergence_threshold: float = 1e6
    log_every: int = 10

    views: ViewConfig = Field(default_factory=ViewConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = Field(
        default_factory=lambda: ContrastiveConfig(zero_norm_policy='clamp'))
    fusion: FusionConfig = Field(default_factory=FusionConfig)

    @validator('contrastive', pre=True)
    def _clamp_by_default(cls, v):
        # dead ReLU rows are routine during training
        if isinstance(v, dict):
            return {'zero_norm_policy': 'clamp', **v}
        return v

    @validator('epochs', 'log_every')
    def _at_least_one(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator('learning_rate', 'divergence_threshold')
    def _positive(cls, v, field):
        if v <= 0:
            raise ValueError(f"{field.name} must be > 0")
        return v

    @validator('sx_learning_rate', 'grad_clip_norm')
    def _positive_or_none(cls, v, field):
        if v is not None and v <= 0:
            raise ValueError(f"{field.name} must be > 0 or none")
        return v

    @validator('seed')
    def _u64_seed(cls, v):
        if not 0 <= v <= U64_MAX:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return v

    @validator('sx_update')
    def _sx_update(cls, v):
        if v not in ('projected_gd', 'adam'):
            raise ValueError("sx_update must be 'projected_gd' or 'adam'")
        return v

    @validator('inter_view_pairing')
    def _pairing(cls, v):
        if v not in ('mean', 'all_pairs'):
            raise ValueError("inter_view_pairing must be 'mean' or 'all_pairs'")
        return v

    @root_validator(skip_on_failure=True)
    def _some_view(cls, values):
        if not (values.get('use_texture_view') or values.get('use_spectral_view')):
            raise ValueError("at least one of use_texture_view / use_spectral_view must be enabled")
        return values

    def families(self) -> List[str]:
        """Enabled feature families in canonical order."""
        enabled = []
        if self.use_spectral_view:
            enabled.append('spectral_spatial')
        if self.use_texture_view:
            enabled.append('texture')
        return enabled


class ClusteringConfig(_Section):
    """Affinity and spectral clustering settings."""
    n_clusters: int = 3
    n_init: int = 10
    max_iter: int = 300
    nmi_norm: str = 'arithmetic'
    affinity_topq: Optional[int] = None
    coefficient_source: str = 'closed_form'

    @validator('n_clusters')
    def _k(cls, v):
        if v < 2:
            raise ValueError("n_clusters must be >= 2")
        return v

    @validator('n_init', 'max_iter')
    def _positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator('nmi_norm')
    def _nmi(cls, v):
        if v not in ('arithmetic', 'geometric', 'max'):
            raise ValueError("nmi_norm must be 'arithmetic', 'geometric' or 'max'")
        return v

    @validator('affinity_topq')
    def _topq(cls, v):
        if v is not None and v < 1:
            raise ValueError("affinity_topq must be >= 1 or none")
        return v

    @validator('coefficient_source')
    def _source(cls, v):
        if v not in ('trained', 'closed_form'):
            raise ValueError("coefficient_source must be 'trained' or 'closed_form'")
        return v


class SceneCropConfig(_Section):
    """Half-open pixel ranges of the processed sub-scene."""
    row_range: Tuple[int, int]
    col_range: Tuple[int, int]

    _split_ranges = validator('row_range', 'col_range', pre=True, allow_reuse=True)(_split_list)

    @validator('row_range', 'col_range')
    def _non_empty(cls, v, field):
        if v[0] < 0 or v[1] <= v[0]:
            raise ValueError(f"{field.name} must be a non-empty range start,stop with 0 <= start < stop")
        return v


class DatasetSource(_Section):
    """Header paths of a cube and its label map."""
    cube: str
    labels: Optional[str] = None


class SyntheticSource(_Section):
    """Parameters of a generated scene."""
    k_classes: int = 3
    height: int = 30
    width: int = 30
    bands: int = 20
    noise_sigma: float = 0.02

    @validator('k_classes')
    def _classes(cls, v):
        if v < 2:
            raise ValueError("k_classes must be >= 2")
        return v

    @validator('height', 'width', 'bands')
    def _positive(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be >= 1")
        return v

    @validator('noise_sigma')
    def _sigma(cls, v):
        if v < 0:
            raise ValueError("noise_sigma must be >= 0")
        return v


class RunConfig(_Section):
    """Everything one CLI run needs."""
    seed: int = 0
    output_dir: str = Field(default_factory=lambda: settings.app.OUTPUT_DIR)
    dataset: Optional[DatasetSource] = None
    synthetic: Optional[SyntheticSource] = None
    crop: Optional[SceneCropConfig] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    clustering: ClusteringConfig = Field(default_factory=ClusteringConfig)

    @validator('seed')
    def _u64_seed(cls, v):
        if not 0 <= v <= U64_MAX:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return v

    @root_validator(skip_on_failure=True)
    def _one_source(cls, values):
        has_dataset = values.get('dataset') is not None
        has_synthetic = values.get('synthetic') is not None
        if has_dataset == has_synthetic:
            raise ValueError("exactly one of [dataset] or [synthetic] must be configured")
        train = values.get('train')
        if train is not None and train.seed != values['seed']:
            values['train'] = train.copy(update={'seed': values['seed']})
        return values

    def with_seed(self, seed: int) -> 'RunConfig':
        """Copy of this config with a new master seed."""
        return build_run_config(_merge(self.to_dict(), {'seed': seed}))

    def to_dict(self) -> Dict[str, Any]:
        return self.dict()


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a nested dict into a RunConfig."""
    try:
        return RunConfig.parse_obj(data)
    except ValidationError as e:
        raise ConfigValidationError(f"Invalid run configuration:\n{e}") from e


def default_run_config() -> RunConfig:
    """Synthetic desk-scale run with every default."""
    return build_run_config({'synthetic': {}})


# ============================================================================
# TEXT FORMAT
# ============================================================================

# text section -> path inside the RunConfig tree
_SECTION_PATHS = {
    'dataset': ('dataset',),
    'synthetic': ('synthetic',),
    'crop': ('crop',),
    'views': ('train', 'views'),
    'encoder': ('train', 'encoder'),
    'contrastive': ('train', 'contrastive'),
    'fusion': ('train', 'fusion'),
    'train': ('train',),
    'clustering': ('clustering',),
}
_SECTION_ORDER = ['run', 'dataset', 'synthetic', 'crop', 'views', 'encoder',
                  'contrastive', 'fusion', 'train', 'clustering']


def _format_value(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ','.join(_format_value(item) for item in value)
    return str(value)


def _parse_value(raw: str) -> Any:
    text = raw.strip()
    if text.lower() == 'none':
        return None
    return text


def config_to_text(cfg: RunConfig) -> str:
    """Serialize a RunConfig to the sectioned key-value format."""
    data = cfg.dict()
    lines = ['[run]', f"seed = {data['seed']}", f"output_dir = {data['output_dir']}"]
    for section in _SECTION_ORDER[1:]:
        node: Any = data
        for key in _SECTION_PATHS[section]:
            node = node.get(key) if node is not None else None
        if node is None:
            continue
        lines.append('')
        lines.append(f'[{section}]')
        for key, value in node.items():
            if isinstance(value, dict):
                continue
            if section == 'train' and key == 'seed':
                continue
            lines.append(f'{key} = {_format_value(value)}')
    return '\n'.join(lines) + '\n'


def config_from_text(text: str) -> RunConfig:
    """Parse the sectioned key-value format into a validated RunConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigValidationError(f"Malformed config text: {e}") from e

    data: Dict[str, Any] = {}
    for section in parser.sections():
        values = {key: _parse_value(raw) for key, raw in parser.items(section)}
        if section == 'run':
            data.update(values)
            continue
        if section not in _SECTION_PATHS:
            raise ConfigValidationError(f"Unknown config section [{section}]")
        node = data
        for key in _SECTION_PATHS[section]:
            node = node.setdefault(key, {})
        node.update(values)
    return build_run_config(data)


def load_run_config(path) -> RunConfig:
    """Read a config file; a missing file is a validation problem."""
    path = Path(path)
    if not path.is_file():
        raise ConfigValidationError(f"Config file not found: {path}")
    return config_from_text(path.read_text(encoding='utf-8'))


def save_run_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(config_to_text(cfg), encoding='utf-8')


def list_presets() -> List[str]:
    """Names of the shipped dataset presets."""
    return sorted(p.stem for p in PRESET_DIR.glob('*.cfg'))


def load_preset(name: str) -> RunConfig:
    path = PRESET_DIR / f'{name}.cfg'
    if not path.is_file():
        raise ConfigValidationError(f"Unknown preset {name!r}; available: {', '.join(list_presets())}")
    return load_run_config(path)


# Global settings instance
settings = Settings()
