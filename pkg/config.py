# config.py
import json
import os
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple

from pydantic import AfterValidator, BaseModel, ValidationError, field_validator

import htr_constants as C
from errors import ConfigError


def _ordered(pair: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = pair
    if lo > hi:
        raise ValueError(f"range must satisfy lo <= hi, got ({lo}, {hi})")
    return pair


Range = Annotated[Tuple[float, float], AfterValidator(_ordered)]
IntRange = Annotated[Tuple[int, int], AfterValidator(_ordered)]

Mode = Literal["source_only", "unsup_adapt", "sup_adapt"]
Pooling = Literal["cmv", "spp", "tpp", "gru"]
LambdaKind = Literal["constant", "linear", "exponential"]


# -----------------------
# Augmentation (online for source data, offline for building toy targets)
# -----------------------
class PixelAugment(BaseModel):
    blur_sigma_range: Range = (0.0, 0.0)
    gamma_range: Range = (1.0, 1.0)
    brightness_range: Range = (0.0, 0.0)
    contrast_range: Range = (1.0, 1.0)
    noise_std_range: Range = (0.0, 0.0)

    @field_validator("blur_sigma_range", "noise_std_range")
    @classmethod
    def _non_negative(cls, v):
        if v[0] < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("gamma_range", "contrast_range")
    @classmethod
    def _positive(cls, v):
        if v[0] <= 0:
            raise ValueError("must be > 0")
        return v


class ElasticAugment(BaseModel):
    alpha: float = 0.0
    sigma: float = 4.0

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v):
        if v < 0:
            raise ValueError("alpha must be >= 0")
        return v

    @field_validator("sigma")
    @classmethod
    def _sigma(cls, v):
        if v <= 0:
            raise ValueError("sigma must be > 0")
        return v


class GeometricAugment(BaseModel):
    shear_range_deg: Range = (0.0, 0.0)
    rotation_range_deg: Range = (0.0, 0.0)
    scale_range: Range = (1.0, 1.0)
    elastic: ElasticAugment = ElasticAugment()

    @field_validator("shear_range_deg")
    @classmethod
    def _shear(cls, v):
        if v[0] <= -60 or v[1] >= 60:
            raise ValueError("shear must stay within (-60, 60) degrees")
        return v

    @field_validator("scale_range")
    @classmethod
    def _scale(cls, v):
        if v[0] <= 0:
            raise ValueError("scale must be > 0")
        return v


class BackgroundAugment(BaseModel):
    enabled: bool = False
    texture_strength_range: Range = (0.0, 0.0)

    @field_validator("texture_strength_range")
    @classmethod
    def _unit(cls, v):
        if v[0] < 0 or v[1] > 1:
            raise ValueError("texture strength must lie in [0, 1]")
        return v


class AugmentConfig(BaseModel):
    """Defaults collapse every range to its identity value."""
    pixel: PixelAugment = PixelAugment()
    geometric: GeometricAugment = GeometricAugment()
    background: BackgroundAugment = BackgroundAugment()

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls()

    @classmethod
    def light(cls) -> "AugmentConfig":
        return cls(
            pixel=PixelAugment(blur_sigma_range=(0.0, 0.8), gamma_range=(0.8, 1.2),
                               brightness_range=(-0.05, 0.05), contrast_range=(0.85, 1.15),
                               noise_std_range=(0.0, 0.02)),
            geometric=GeometricAugment(shear_range_deg=(-5.0, 5.0), rotation_range_deg=(-2.0, 2.0),
                                       scale_range=(0.9, 1.1),
                                       elastic=ElasticAugment(alpha=1.0, sigma=4.0)),
            background=BackgroundAugment(enabled=True, texture_strength_range=(0.0, 0.15)),
        )

    @classmethod
    def heavy(cls) -> "AugmentConfig":
        return cls(
            pixel=PixelAugment(blur_sigma_range=(0.5, 1.5), gamma_range=(0.6, 1.6),
                               brightness_range=(-0.1, 0.1), contrast_range=(0.6, 1.0),
                               noise_std_range=(0.05, 0.12)),
            geometric=GeometricAugment(shear_range_deg=(-30.0, 30.0), rotation_range_deg=(-4.0, 4.0),
                                       scale_range=(0.8, 1.2),
                                       elastic=ElasticAugment(alpha=3.0, sigma=3.0)),
            background=BackgroundAugment(enabled=True, texture_strength_range=(0.1, 0.35)),
        )


# -----------------------
# Module sections
# -----------------------
class SynthConfig(BaseModel):
    font_size_range: IntRange = C.FONT_SIZE_RANGE
    margin_range_px: IntRange = C.MARGIN_RANGE_PX
    max_font_retries: int = C.MAX_FONT_RETRIES
    extra_symbols: List[str] = []
    n_jobs: int = 1


class DataConfig(BaseModel):
    canonical_height: int = C.CANONICAL_HEIGHT
    max_transcript_len: int = C.MAX_TRANSCRIPT_LEN
    batch_size: int = C.BATCH_SIZE

    @field_validator("canonical_height")
    @classmethod
    def _height(cls, v):
        if v < 2 * C.DOWNSAMPLE_FACTOR:
            raise ValueError(f"canonical_height must be >= {2 * C.DOWNSAMPLE_FACTOR}")
        return v

    @field_validator("batch_size")
    @classmethod
    def _batch(cls, v):
        if v < 2:
            raise ValueError("batch_size must be >= 2")
        return v


class ModelConfig(BaseModel):
    backbone: Literal["small", "vgg19bn"] = "small"
    conv_channels: List[int] = list(C.BACKBONE_SMALL_CHANNELS)
    encoder_layers: int = C.ENCODER_LAYERS
    encoder_hidden: int = C.ENCODER_HIDDEN
    decoder_layers: int = C.DECODER_LAYERS
    decoder_hidden: int = C.DECODER_HIDDEN
    embedding_dim: int = C.EMBEDDING_DIM
    attention_dim: int = C.ATTENTION_DIM
    attention_channels: int = C.ATTENTION_CHANNELS
    attention_kernel: int = C.ATTENTION_KERNEL
    dropout: float = C.DROPOUT
    pretrained_backbone: Optional[str] = None

    @field_validator("conv_channels")
    @classmethod
    def _five_blocks(cls, v):
        if len(v) != 5:
            raise ValueError("the small backbone has exactly 5 conv blocks")
        return v

    @field_validator("attention_kernel")
    @classmethod
    def _odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("attention_kernel must be a positive odd integer")
        return v


class AdversaryConfig(BaseModel):
    pooling: Pooling = "gru"
    hidden_widths: Tuple[int, int] = C.DISCRIMINATOR_WIDTHS
    gru_hidden: Optional[int] = None   # defaults to the feature dimension D
    gru_layers: int = C.POOLING_GRU_LAYERS
    spp_levels: List[int] = list(C.PYRAMID_LEVELS)
    tpp_levels: List[int] = list(C.PYRAMID_LEVELS)


class TrainConfig(BaseModel):
    mode: Mode = "source_only"
    learning_rate: float = C.LEARNING_RATE
    epochs: int = 10
    max_steps: Optional[int] = None
    lambda_schedule: LambdaKind = "constant"
    lambda_horizon: Optional[int] = None   # E; defaults to epochs
    grad_clip_norm: float = C.GRAD_CLIP_NORM
    init_checkpoint: Optional[str] = None
    adapt_from_scratch: bool = False
    resume_from: Optional[str] = None
    checkpoint_every_steps: Optional[int] = None
    log_every_steps: Optional[int] = None
    online_augment: Optional[AugmentConfig] = None
    target_writer: Optional[str] = None
    source_limit: Optional[int] = None
    target_limit: Optional[int] = None
    mix_source_in_sup_adapt: bool = False
    deterministic: bool = True
    device: str = "cpu"

    @field_validator("epochs")
    @classmethod
    def _epochs(cls, v):
        if v < 1:
            raise ValueError("epochs must be >= 1")
        return v

    @property
    def horizon(self) -> int:
        return self.lambda_horizon or self.epochs


class EvalConfig(BaseModel):
    case_sensitive: bool = True
    strip_punctuation: bool = False
    max_unk_rate: float = 0.5
    batch_size: int = C.BATCH_SIZE


class PathsConfig(BaseModel):
    source_manifest: Optional[str] = None
    target_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    charset: Optional[str] = None
    fonts_dir: Optional[str] = None
    corpus: Optional[str] = None
    out_dir: str = "runs/default"


class RunConfig(BaseModel):
    seed: int = 1
    synth: SynthConfig = SynthConfig()
    augment: AugmentConfig = AugmentConfig()
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    adversary: AdversaryConfig = AdversaryConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    paths: PathsConfig = PathsConfig()

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Return a copy with dotted keys ("train.mode") replaced; None values are skipped."""
        data = self.echo()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                if key not in node or not isinstance(node[key], dict):
                    raise ConfigError(f"Unknown config section '{dotted}'")
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"Unknown config key '{dotted}'")
            node[leaf] = value
        return parse_run_config(data)

    def check_mode_requirements(self) -> None:
        mode = self.train.mode
        paths = self.paths
        if mode in ("source_only", "unsup_adapt") and not paths.source_manifest:
            raise ConfigError(f"mode {mode} needs a source manifest")
        if mode == "unsup_adapt" and not paths.target_manifest:
            raise ConfigError("mode unsup_adapt needs a target manifest (unlabeled real images)")
        if mode == "sup_adapt" and not paths.target_manifest:
            raise ConfigError("mode sup_adapt needs a labeled target manifest")
        if mode == "sup_adapt" and self.train.mix_source_in_sup_adapt and not paths.source_manifest:
            raise ConfigError("mix_source_in_sup_adapt needs a source manifest")
        if not paths.val_manifest:
            raise ConfigError("training needs a labeled validation manifest")


def parse_run_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("Config file must hold a JSON object")
    return parse_run_config(data)


def save_run_config(cfg: RunConfig, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.echo(), indent=2, sort_keys=True), encoding="utf-8")


def output_root() -> Path:
    return Path(os.environ.get("SYNTH2REAL_OUTPUT_ROOT", "."))


def cache_root() -> Path:
    return Path(os.environ.get("SYNTH2REAL_CACHE_DIR", Path.home() / ".cache" / "synth2real-htr"))


def resolve_out(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p
