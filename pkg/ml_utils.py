# ml_utils.py
"""
Checkpoint container for recognizer/discriminator weights plus everything
needed to resume or re-evaluate a run, with a lazy in-process cache.
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import torch
from torch import nn

import htr_constants as C
from config import RunConfig, cache_root, parse_run_config
from datakit import Charset
from errors import CheckpointError, ConfigError, IncompatibleCharset

logger = logging.getLogger("synth2real-htr.ml_utils")

_checkpoint_cache: Dict[Tuple[str, float], "Checkpoint"] = {}   # (resolved path, mtime) -> checkpoint


@dataclass
class Checkpoint:
    config: RunConfig
    charset: Charset
    recognizer: Dict[str, torch.Tensor]
    discriminator: Optional[Dict[str, torch.Tensor]] = None
    optimizer: Optional[Dict[str, Any]] = None
    progress: Dict[str, Any] = field(default_factory=dict)
    rng: Optional[Dict[str, Any]] = None
    path: Optional[str] = None

    @property
    def mode(self) -> str:
        return self.config.train.mode


def capture_rng_state() -> Dict[str, Any]:
    state = {"torch": torch.get_rng_state()}
    if torch.cuda.is_available():
        state["cuda"] = torch.cuda.get_rng_state_all()
    return state


def restore_rng_state(state: Optional[Dict[str, Any]]) -> None:
    if not state:
        return
    torch.set_rng_state(state["torch"])
    if "cuda" in state and torch.cuda.is_available():
        torch.cuda.set_rng_state_all(state["cuda"])


def save_checkpoint(path: str, config: RunConfig, charset: Charset, recognizer: nn.Module,
                    discriminator: Optional[nn.Module] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    progress: Optional[Dict[str, Any]] = None, with_rng: bool = True) -> str:
    payload = {
        "format_version": C.CHECKPOINT_FORMAT_VERSION,
        "config": config.echo(),
        "charset": charset.to_json(),
        "charset_fingerprint": charset.fingerprint(),
        "recognizer": recognizer.state_dict(),
        "discriminator": discriminator.state_dict() if discriminator is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "progress": dict(progress or {}),
        "rng": capture_rng_state() if with_rng else None,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.debug("Saved checkpoint %s", path)
    return path


def _read(path: Path, map_location: str) -> Dict[str, Any]:
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint container")
    if payload["format_version"] != C.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {payload['format_version']!r}")
    return payload


def load_checkpoint(path: str, map_location: str = "cpu", use_cache: bool = False) -> Checkpoint:
    """Load and verify a checkpoint. With use_cache, repeated loads of an unchanged file are free."""
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    key = (str(p.resolve()), p.stat().st_mtime)
    if use_cache and key in _checkpoint_cache:
        return _checkpoint_cache[key]

    payload = _read(p, map_location)
    try:
        charset = Charset.from_json(payload["charset"])
        config = parse_run_config(payload["config"])
    except (ConfigError, KeyError) as e:
        raise CheckpointError(f"{path}: damaged checkpoint header: {e}") from e
    if charset.fingerprint() != payload.get("charset_fingerprint"):
        raise IncompatibleCharset(f"{path}: stored charset does not match its fingerprint")

    ckpt = Checkpoint(config=config, charset=charset, recognizer=payload["recognizer"],
                      discriminator=payload.get("discriminator"), optimizer=payload.get("optimizer"),
                      progress=payload.get("progress") or {}, rng=payload.get("rng"), path=str(p))
    if use_cache:
        _checkpoint_cache[key] = ckpt
        logger.info("Loaded checkpoint %s into cache", path)
    return ckpt


def clear_cache() -> None:
    _checkpoint_cache.clear()


def load_module_state(module: nn.Module, state: Dict[str, torch.Tensor], what: str) -> None:
    try:
        module.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{what} weights do not fit the configured architecture: {e}") from e


def check_compatible(ckpt: Checkpoint, charset: Charset, config: Optional[RunConfig] = None) -> None:
    """Raise if a checkpoint cannot be loaded into a model built from (charset, config)."""
    if ckpt.charset.fingerprint() != charset.fingerprint():
        raise IncompatibleCharset(f"{ckpt.path}: checkpoint charset differs from the run's charset")
    if config is not None and ckpt.config.model.model_dump() != config.model.model_dump():
        raise CheckpointError(f"{ckpt.path}: checkpoint model section differs from the run's model config")


# -----------------------
# Pretrained backbone weights
# -----------------------
def _resolve_weights(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    cached = cache_root() / p.name
    if cached.exists():
        return cached
    raise ConfigError(f"Pretrained backbone weights not found at {path} or {cached}")


def load_backbone_weights(backbone: nn.Sequential, path: str) -> int:
    """
    Load convolutional weights from an external state dict (e.g. a VGG-19-BN
    `features.*` dump). RGB first-layer kernels are summed to one gray channel.
    Returns the number of tensors loaded.
    """
    state = torch.load(_resolve_weights(path), map_location="cpu", weights_only=True)
    own = backbone.state_dict()
    loaded = {}
    for key, tensor in state.items():
        key = key[len("features."):] if key.startswith("features.") else key
        if key not in own:
            continue
        if tensor.dim() == 4 and own[key].dim() == 4 and tensor.shape[1] == 3 and own[key].shape[1] == 1:
            tensor = tensor.sum(dim=1, keepdim=True)
        if tensor.shape != own[key].shape:
            logger.warning("Skipping backbone tensor %s: shape %s != %s", key, tuple(tensor.shape),
                           tuple(own[key].shape))
            continue
        loaded[key] = tensor
    if not loaded:
        raise CheckpointError(f"No backbone tensors in {path} match the configured backbone")
    backbone.load_state_dict(loaded, strict=False)
    logger.info("Loaded %d/%d backbone tensors from %s", len(loaded), len(own), path)
    return len(loaded)
