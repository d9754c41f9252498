"""
Experiment configuration: one JSON or TOML document validated with the DRF
serializers in ``serializers.py`` and turned into frozen dataclasses.
"""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional, Union
import copy
import json
import logging
import sys

from django.conf import settings
from rest_framework.exceptions import ErrorDetail

from .adversarial import DiscriminatorSchedule
from .choices import SelectionStrategy
from .generator import PairedGeneratorConfig
from .segmentation import SegConfig
from .storage import config_hash
from .superres import SRConfig
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment config; ``errors`` holds ``section.field: message`` strings"""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__('; '.join(self.errors))


@dataclass(frozen=True)
class SamplingConfig:
    n: int = 64
    mode: str = 'ddim'
    steps: int = 100
    batch_size: int = 16
    threshold: float = 0.5
    strategy: str = SelectionStrategy.BEST_VAL_LOSS
    score_samples: int = 64
    score_mode: str = 'ddpm'
    score_steps: Optional[int] = None
    histogram_bins: int = 256


@dataclass(frozen=True)
class DataConfig:
    train_root: Optional[Path] = None
    finetune_root: Optional[Path] = None
    test_root: Optional[Path] = None
    toy_n: int = 500
    toy_test_n: int = 100
    toy_size: int = 32
    # tile real test images into eval_crop squares; 0 resizes whole images
    eval_crop: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    n_generated: int = 500
    strategies: tuple = tuple(SelectionStrategy.values)
    superres: bool = True
    finetune: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    output_root: Path
    generator: PairedGeneratorConfig
    train: TrainConfig
    discriminator: DiscriminatorSchedule
    superres: SRConfig
    sr_epochs: int
    segmentation: SegConfig
    sampling: SamplingConfig
    data: DataConfig
    pipeline: PipelineConfig
    document: dict
    config_hash: str
    base_dir: Optional[Path] = None

    @property
    def flavor(self) -> str:
        return str(self.generator.variant)

    @property
    def run_name(self) -> str:
        return f"{self.name}-{self.flavor}{'-disc' if self.train.use_discriminator else ''}"

    def run_dir(self, run_name: Optional[str] = None) -> Path:
        return self.output_root / 'run' / (run_name or self.run_name)

    def with_overrides(self, *, flavor: Optional[str] = None, with_discriminator: Optional[bool] = None,
                       seed: Optional[int] = None) -> 'ExperimentConfig':
        """Re-validated copy; the config hash follows the overrides"""
        document = copy.deepcopy(self.document)
        if flavor is not None:
            document['generator']['variant'] = flavor
        if with_discriminator is not None:
            document['train']['use_discriminator'] = with_discriminator
        if seed is not None:
            document['seed'] = seed
        return build_config(document, self.base_dir)


def flatten_errors(errors: Any, prefix: str = '') -> list[str]:
    """DRF error structure -> ['section.field: message', ...]"""
    if isinstance(errors, dict):
        messages = []
        for key, value in errors.items():
            path = prefix if key == 'non_field_errors' else (f"{prefix}.{key}" if prefix else str(key))
            messages.extend(flatten_errors(value, path))
        return messages
    if isinstance(errors, list):
        if all(isinstance(item, (str, ErrorDetail)) for item in errors):
            return [f"{prefix or 'config'}: {item}" for item in errors]
        messages = []
        for index, item in enumerate(errors):
            messages.extend(flatten_errors(item, f"{prefix}[{index}]"))
        return messages
    return [f"{prefix or 'config'}: {errors}"]


def read_document(path: Union[str, Path]) -> dict:
    path = Path(path)
    try:
        if path.suffix == '.toml':
            with open(path, 'rb') as handle:
                return tomllib.load(handle)
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError as e:
        raise ConfigError([f"config: file not found: {path}"]) from e
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError([f"config: cannot parse {path}: {e}"]) from e


def _resolve(value: str, base: Optional[Path]) -> Optional[Path]:
    if not value:
        return None
    path = Path(value).expanduser()
    return path if path.is_absolute() or base is None else (base / path)


def build_config(document: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Validate ``document`` and build the section dataclasses"""
    from .serializers import ExperimentConfigSerializer

    serializer = ExperimentConfigSerializer(data=document)
    if not serializer.is_valid():
        raise ConfigError(flatten_errors(serializer.errors))
    validated = json.loads(json.dumps(serializer.validated_data))
    base = Path(base_dir) if base_dir is not None else None

    seed = validated['seed']
    train_doc = dict(validated['train'])
    if train_doc['num_workers'] is None:
        train_doc['num_workers'] = settings.PAIRDIFF_NUM_WORKERS
    sr_doc = dict(validated['superres'])
    sr_epochs = sr_doc.pop('epochs') or train_doc['epochs']
    if sr_doc['steps_train'] is None:
        sr_doc['steps_train'] = train_doc['T']
    data_doc = validated['data']

    try:
        train = TrainConfig(seed=seed, **train_doc)
        experiment = ExperimentConfig(
            name=validated['name'],
            seed=seed,
            output_root=_resolve(validated['output_root'], base) or Path(settings.PAIRDIFF_OUTPUT_ROOT),
            generator=PairedGeneratorConfig(num_timesteps=train.T, **validated['generator']),
            train=train,
            discriminator=DiscriminatorSchedule(T=train.T, **validated['discriminator']),
            superres=SRConfig(image_channels=validated['generator']['image_channels'],
                              beta_start=train.beta_start, beta_end=train.beta_end, **sr_doc),
            sr_epochs=sr_epochs,
            segmentation=SegConfig(in_channels=validated['generator']['image_channels'],
                                   **validated['segmentation']),
            sampling=SamplingConfig(**validated['sampling']),
            data=DataConfig(
                train_root=_resolve(data_doc['train_root'], base),
                finetune_root=_resolve(data_doc['finetune_root'], base),
                test_root=_resolve(data_doc['test_root'], base),
                toy_n=data_doc['toy_n'],
                toy_test_n=data_doc['toy_test_n'],
                toy_size=data_doc['toy_size'],
                eval_crop=data_doc['eval_crop'],
            ),
            pipeline=PipelineConfig(**{**validated['pipeline'],
                                       'strategies': tuple(validated['pipeline']['strategies'])}),
            document=validated,
            config_hash=config_hash(validated),
            base_dir=base,
        )
    except ValueError as e:
        raise ConfigError([f"config: {e}"]) from e
    return experiment


def load_config(path: Union[str, Path], seed: Optional[int] = None) -> ExperimentConfig:
    """Read, validate and build the experiment config at ``path``"""
    path = Path(path)
    document = read_document(path)
    if seed is not None:
        document['seed'] = seed
    experiment = build_config(document, base_dir=path.resolve().parent)
    logger.info(f"Loaded config {experiment.name} from {path} (hash {experiment.config_hash[:12]})")
    return experiment


def with_output_root(experiment: ExperimentConfig, output_root: Union[str, Path]) -> ExperimentConfig:
    return replace(experiment, output_root=Path(output_root))
