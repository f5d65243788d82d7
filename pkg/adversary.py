# adversary.py
"""
Domain classifier for adversarial adaptation: temporal pooling of H to a
fixed-size vector, a three-layer discriminator and the gradient reversal layer.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn
from torch.autograd import Function
from torch.nn.utils.rnn import pack_padded_sequence

from config import AdversaryConfig
from errors import DimensionMismatch, EmptySequence
from recognizer import FeatureSequence

logger = logging.getLogger("synth2real-htr.adversary")


# -----------------------
# Gradient reversal
# -----------------------
@dataclass(frozen=True)
class GrlConfig:
    lambda_: float = 1.0

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"GRL lambda must be >= 0, got {self.lambda_}")


class GradientReversalFunction(Function):
    """Identity on the forward pass; grad -> -lambda * grad on the way back."""

    @staticmethod
    def forward(ctx, x, lambda_):
        ctx.lambda_ = lambda_
        return x.clone()

    @staticmethod
    def backward(ctx, grads):
        return -grads.new_tensor(ctx.lambda_) * grads, None


class GradientReversal(nn.Module):
    def __init__(self, lambda_: float = 1.0):
        super().__init__()
        self.lambda_ = lambda_

    def forward(self, x):
        return GradientReversalFunction.apply(x, self.lambda_)

    def extra_repr(self) -> str:
        return f"lambda_={self.lambda_}"


def grl(x: torch.Tensor, cfg: Union[GrlConfig, float]) -> torch.Tensor:
    lambda_ = cfg.lambda_ if isinstance(cfg, GrlConfig) else GrlConfig(float(cfg)).lambda_
    return GradientReversalFunction.apply(x, lambda_)


# -----------------------
# Temporal pooling
# -----------------------
def pooled_dim(strategy: str, cfg: AdversaryConfig, feature_dim: int, conv_channels: int) -> int:
    if strategy == "cmv":
        return feature_dim
    if strategy == "tpp":
        return feature_dim * sum(cfg.tpp_levels)
    if strategy == "spp":
        return conv_channels * sum(level * level for level in cfg.spp_levels)
    if strategy == "gru":
        return cfg.gru_hidden or feature_dim
    raise ValueError(f"Unknown pooling strategy '{strategy}'")


class TemporalPooling(nn.Module):
    """Maps a FeatureSequence to (B, pooled_dim) using only each item's valid positions."""

    def __init__(self, strategy: str, cfg: AdversaryConfig, feature_dim: int, conv_channels: int):
        super().__init__()
        self.strategy = strategy
        self.cfg = cfg
        self.out_dim = pooled_dim(strategy, cfg, feature_dim, conv_channels)
        self.gru: Optional[nn.GRU] = None
        if strategy == "gru":
            self.gru = nn.GRU(feature_dim, self.out_dim, num_layers=cfg.gru_layers, batch_first=True)

    def forward(self, H: FeatureSequence) -> torch.Tensor:
        if H.values.shape[0] == 0 or int(H.lengths.min()) < 1:
            raise EmptySequence("temporal pooling needs at least one valid position per item")
        if self.strategy == "cmv":
            return self._cmv(H)
        if self.strategy == "tpp":
            return self._tpp(H)
        if self.strategy == "spp":
            return self._spp(H)
        return self._gru(H)

    def _cmv(self, H: FeatureSequence) -> torch.Tensor:
        mask = H.mask().unsqueeze(-1).to(H.values.dtype)
        lengths = H.lengths.to(H.values.device, H.values.dtype).unsqueeze(-1)
        return (H.values * mask).sum(dim=1) / lengths

    def _tpp(self, H: FeatureSequence) -> torch.Tensor:
        rows = []
        for b in range(H.values.shape[0]):
            seq = H.item(b).unsqueeze(0)                             # (1, D, N)
            rows.append(torch.cat([F.adaptive_max_pool1d(seq, level).flatten()
                                   for level in self.cfg.tpp_levels]))
        return torch.stack(rows)

    def _spp(self, H: FeatureSequence) -> torch.Tensor:
        rows = []
        for fmap in H.conv_maps:                                     # (C, h, N)
            fmap = fmap.unsqueeze(0)
            rows.append(torch.cat([F.adaptive_max_pool2d(fmap, level).flatten()
                                   for level in self.cfg.spp_levels]))
        return torch.stack(rows)

    def _gru(self, H: FeatureSequence) -> torch.Tensor:
        packed = pack_padded_sequence(H.values, H.lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h_n = self.gru(packed)
        return h_n[-1]


def temporal_pool(H: FeatureSequence, strategy: Union[str, TemporalPooling],
                  cfg: Optional[AdversaryConfig] = None) -> torch.Tensor:
    if isinstance(strategy, TemporalPooling):
        return strategy(H)
    cfg = cfg or AdversaryConfig(pooling=strategy)
    conv_channels = int(H.conv_maps[0].shape[0]) if H.conv_maps else 0
    return TemporalPooling(strategy, cfg, H.feature_dim, conv_channels).to(H.values)(H)


# -----------------------
# Discriminator
# -----------------------
class DomainDiscriminator(nn.Module):
    """Three affine layers with batch norm and ReLU; one logit per item (sigmoid = P(source))."""

    def __init__(self, in_dim: int, hidden_widths=(512, 256)):
        super().__init__()
        self.in_dim = in_dim
        layers: List[nn.Module] = []
        width = in_dim
        for h in hidden_widths:
            layers += [nn.Linear(width, h), nn.BatchNorm1d(h), nn.ReLU(inplace=True)]
            width = h
        layers.append(nn.Linear(width, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.dim() != 2 or f.shape[1] != self.in_dim:
            raise DimensionMismatch(f"discriminator expects (B, {self.in_dim}), got {tuple(f.shape)}")
        return self.net(f).squeeze(-1)


def discriminate(params: DomainDiscriminator, f: torch.Tensor) -> torch.Tensor:
    return params(f)


class DomainClassifier(nn.Module):
    """theta_d: pooling (learnable for the GRU strategy) followed by the discriminator."""

    def __init__(self, cfg: AdversaryConfig, feature_dim: int, conv_channels: int):
        super().__init__()
        self.cfg = cfg
        self.pool = TemporalPooling(cfg.pooling, cfg, feature_dim, conv_channels)
        self.discriminator = DomainDiscriminator(self.pool.out_dim, cfg.hidden_widths)
        self.reversal = GradientReversal(1.0)

    def forward(self, H: FeatureSequence, lambda_: Optional[float] = None) -> torch.Tensor:
        """Domain logits; when lambda_ is given, H enters through the reversal layer."""
        if lambda_ is not None:
            self.reversal.lambda_ = lambda_
            H = FeatureSequence(self.reversal(H.values), H.lengths,
                                [self.reversal(m) for m in H.conv_maps])
        return self.discriminator(self.pool(H))

    def reset_parameters(self, seed: Optional[int] = None) -> None:
        """Fresh random theta_d, as at the start of adaptation."""
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            for m in self.modules():
                if m is not self and hasattr(m, "reset_parameters"):
                    m.reset_parameters()
            for m in self.modules():
                if isinstance(m, nn.BatchNorm1d):
                    m.reset_running_stats()
        logger.info("Discriminator re-initialized (seed=%s)", seed)
