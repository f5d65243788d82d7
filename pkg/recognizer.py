# recognizer.py
"""
Encoder-decoder word recognizer.

The encoder runs a convolutional backbone over each word image at its own
width, collapses the height axis, and feeds the columns to a bidirectional
GRU. The decoder is a unidirectional GRU driven by location-based attention
over the encoder sequence H.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

import htr_constants as C
from config import ModelConfig
from datakit import Charset, TokenSeq, pad_images
from errors import WidthTooSmall
from synthgen import WordImage

logger = logging.getLogger("synth2real-htr.recognizer")

# VGG-19-BN feature layers with the last max-pool removed
VGG19_BN_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                   512, 512, 512, 512, "M", 512, 512, 512, 512]


def _conv_bn_relu(cin: int, cout: int) -> List[nn.Module]:
    return [nn.Conv2d(cin, cout, kernel_size=3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


def build_backbone(cfg: ModelConfig) -> Tuple[nn.Sequential, int]:
    """Returns (layers, output channels). Both presets downsample width by 16."""
    layers: List[nn.Module] = []
    if cfg.backbone == "vgg19bn":
        cin = 1
        for v in VGG19_BN_LAYOUT:
            if v == "M":
                layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
            else:
                layers += _conv_bn_relu(cin, v)
                cin = v
        return nn.Sequential(*layers), cin
    cin = 1
    for i, cout in enumerate(cfg.conv_channels):
        layers += _conv_bn_relu(cin, cout)
        if i < 4:
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        cin = cout
    return nn.Sequential(*layers), cin


def batch_norm_groups(bn: nn.BatchNorm2d, blocks: List[torch.Tensor]) -> List[torch.Tensor]:
    """
    Train-mode batch norm over several (G_j, C, h, w_j) blocks of different widths,
    normalized with statistics of all their positions together. Running statistics
    get one update per call, as a single nn.BatchNorm2d pass would.
    """
    channels = bn.num_features
    flat = torch.cat([x.transpose(0, 1).reshape(channels, -1) for x in blocks], dim=1)
    momentum = bn.momentum
    if bn.track_running_stats:
        bn.num_batches_tracked.add_(1)
        if momentum is None:
            momentum = 1.0 / float(bn.num_batches_tracked)
    out = F.batch_norm(flat.unsqueeze(0), bn.running_mean, bn.running_var, bn.weight, bn.bias,
                       training=True, momentum=momentum or 0.0, eps=bn.eps)[0]
    pieces, start = [], 0
    for x in blocks:
        g, _, h, w = x.shape
        piece = out[:, start:start + g * h * w].reshape(channels, g, h, w).transpose(0, 1)
        pieces.append(piece.clone(memory_format=torch.contiguous_format))
        start += g * h * w
    return pieces


@dataclass
class FeatureSequence:
    """Batch of encoder outputs H; item b is values[b, :lengths[b]] (N x D)."""
    values: torch.Tensor            # (B, N_max, D); zeros beyond each length
    lengths: torch.Tensor           # (B,) long
    conv_maps: List[torch.Tensor]   # per item (C, h, N) pre-recurrent map

    @property
    def feature_dim(self) -> int:
        return int(self.values.shape[-1])

    @property
    def n_max(self) -> int:
        return int(self.values.shape[1])

    def mask(self) -> torch.Tensor:
        positions = torch.arange(self.n_max, device=self.values.device)
        return positions.unsqueeze(0) < self.lengths.to(self.values.device).unsqueeze(1)

    def item(self, b: int) -> torch.Tensor:
        """D x N view of one item, as the encoder function is usually written."""
        return self.values[b, : int(self.lengths[b])].t()

    def select(self, index: torch.Tensor) -> "FeatureSequence":
        idx = [int(i) for i in index]
        n = int(self.lengths[idx].max()) if idx else 0
        return FeatureSequence(self.values[idx, :n], self.lengths[idx], [self.conv_maps[i] for i in idx])


def feature_length(width: int) -> int:
    if width < 1:
        raise WidthTooSmall(f"image width {width} yields an empty feature sequence")
    return -(-width // C.DOWNSAMPLE_FACTOR)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone, self.conv_channels = build_backbone(cfg)
        self.rnn = nn.GRU(self.conv_channels, cfg.encoder_hidden, num_layers=cfg.encoder_layers,
                          bidirectional=True, batch_first=True,
                          dropout=cfg.dropout if cfg.encoder_layers > 1 else 0.0)
        self.feature_dim = cfg.encoder_hidden

    def _run_backbone(self, blocks: List[torch.Tensor]) -> List[torch.Tensor]:
        """Runs the layers over every width group; train-mode batch norm pools statistics across groups."""
        for layer in self.backbone:
            if isinstance(layer, nn.BatchNorm2d) and layer.training:
                blocks = batch_norm_groups(layer, blocks)
            else:
                blocks = [layer(x) for x in blocks]
        return blocks

    def forward(self, images: torch.Tensor, widths: Sequence[int]) -> FeatureSequence:
        """images: (B, H, W_max) ink intensities (0 = background); columns past each width are ignored."""
        widths = [int(w) for w in widths]
        groups = [(w, [i for i, wi in enumerate(widths) if wi == w]) for w in sorted(set(widths))]
        blocks = []
        for w, group in groups:
            ink = images[group, :, :w]
            padded = feature_length(w) * C.DOWNSAMPLE_FACTOR
            if padded != w:
                ink = F.pad(ink, (0, padded - w))
            blocks.append(ink.unsqueeze(1))
        maps: List[Optional[torch.Tensor]] = [None] * len(widths)
        for (w, group), out in zip(groups, self._run_backbone(blocks)):
            out = out[..., :feature_length(w)]
            for j, i in enumerate(group):
                maps[i] = out[j]
        columns = [m.max(dim=1).values.t() for m in maps]        # (N_i, C)
        lengths = torch.tensor([c.shape[0] for c in columns], dtype=torch.long)
        seq = nn.utils.rnn.pad_sequence(columns, batch_first=True)
        packed = pack_padded_sequence(seq, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=seq.shape[1])
        hidden = self.rnn.hidden_size
        values = out[..., :hidden] + out[..., hidden:]
        return FeatureSequence(values, lengths.to(values.device), maps)


class LocationAttention(nn.Module):
    """e_ki = w^T tanh(W h_i + V s_{k-1} + U l_ki + b),  l_k = F * alpha_{k-1}."""

    def __init__(self, feature_dim: int, state_dim: int, att_dim: int, channels: int, kernel: int):
        super().__init__()
        self.F = nn.Conv1d(1, channels, kernel_size=kernel, padding=kernel // 2, bias=False)
        self.W = nn.Linear(feature_dim, att_dim, bias=False)
        self.V = nn.Linear(state_dim, att_dim, bias=False)
        self.U = nn.Linear(channels, att_dim, bias=False)
        self.b = nn.Parameter(torch.zeros(att_dim))
        self.w = nn.Linear(att_dim, 1, bias=False)

    def energies(self, H: FeatureSequence, s_prev: torch.Tensor, alpha_prev: torch.Tensor,
                 projected: Optional[torch.Tensor] = None) -> torch.Tensor:
        if projected is None:
            projected = self.W(H.values)
        loc = self.F(alpha_prev.unsqueeze(1)).transpose(1, 2)           # (B, N, p)
        z = projected + self.V(s_prev).unsqueeze(1) + self.U(loc) + self.b
        return self.w(torch.tanh(z)).squeeze(-1)

    def forward(self, H: FeatureSequence, s_prev: torch.Tensor, alpha_prev: torch.Tensor,
                projected: Optional[torch.Tensor] = None) -> torch.Tensor:
        e = self.energies(H, s_prev, alpha_prev, projected)
        e = e.masked_fill(~H.mask(), float("-inf"))
        return torch.softmax(e, dim=1)


@dataclass
class DecoderState:
    s: torch.Tensor        # (layers, B, hidden); s_{k-1}
    alpha: torch.Tensor    # (B, N) alpha_{k-1}
    step: int = 0


def uniform_alpha(H: FeatureSequence) -> torch.Tensor:
    mask = H.mask().to(H.values.dtype)
    return mask / mask.sum(dim=1, keepdim=True)


class AttentionDecoder(nn.Module):
    def __init__(self, n_classes: int, feature_dim: int, cfg: ModelConfig):
        super().__init__()
        self.embedding = nn.Embedding(n_classes, cfg.embedding_dim)
        self.attention = LocationAttention(feature_dim, cfg.decoder_hidden, cfg.attention_dim,
                                           cfg.attention_channels, cfg.attention_kernel)
        self.rnn = nn.GRU(cfg.embedding_dim + feature_dim, cfg.decoder_hidden,
                          num_layers=cfg.decoder_layers, batch_first=True,
                          dropout=cfg.dropout if cfg.decoder_layers > 1 else 0.0)
        self.out = nn.Linear(cfg.decoder_hidden + feature_dim, n_classes)

    def init_state(self, H: FeatureSequence) -> DecoderState:
        b = H.values.shape[0]
        s = H.values.new_zeros(self.rnn.num_layers, b, self.rnn.hidden_size)
        return DecoderState(s, uniform_alpha(H), 0)

    def step(self, state: DecoderState, H: FeatureSequence, prev_tokens: torch.Tensor,
             projected: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, DecoderState]:
        alpha = self.attention(H, state.s[-1], state.alpha, projected)
        context = torch.bmm(alpha.unsqueeze(1), H.values).squeeze(1)    # sum_i alpha_ki h_i
        x = torch.cat([self.embedding(prev_tokens), context], dim=-1).unsqueeze(1)
        out, s = self.rnn(x, state.s)
        logits = self.out(torch.cat([out.squeeze(1), context], dim=-1))
        return logits, DecoderState(s, alpha, state.step + 1)


class WordRecognizer(nn.Module):
    """theta_e = encoder, theta_r = decoder."""

    def __init__(self, cs: Charset, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.n_classes = len(cs)
        self.end_id = cs.end_id
        self.pad_id = cs.pad_id
        self.encoder = Encoder(cfg)
        self.decoder = AttentionDecoder(self.n_classes, self.encoder.feature_dim, cfg)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def to_ink(self, images: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
        """Background-white pixels -> ink intensities on the model's device/dtype."""
        t = torch.as_tensor(images).to(device=self.device, dtype=self.dtype)
        return C.BACKGROUND_LEVEL - t

    def encode(self, images: Union[np.ndarray, torch.Tensor], widths: Sequence[int]) -> FeatureSequence:
        return self.encoder(self.to_ink(images), widths)

    def forward_teacher_forced(self, H: FeatureSequence, targets: torch.Tensor) -> torch.Tensor:
        """targets: (B, T) ids ending in END (PAD after). Returns (B, T, classes)."""
        targets = targets.to(H.values.device)
        b, t = targets.shape
        start = torch.full((b, 1), self.end_id, dtype=torch.long, device=targets.device)
        prev = torch.cat([start, targets[:, :-1]], dim=1)
        prev = prev.masked_fill(prev == self.pad_id, self.end_id)
        state = self.decoder.init_state(H)
        projected = self.decoder.attention.W(H.values)
        rows = []
        for k in range(t):
            logits, state = self.decoder.step(state, H, prev[:, k], projected)
            rows.append(logits)
        return torch.stack(rows, dim=1)

    @torch.no_grad()
    def decode_greedy(self, H: FeatureSequence, t_max: int) -> List[TokenSeq]:
        if t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {t_max}")
        b = H.values.shape[0]
        state = self.decoder.init_state(H)
        projected = self.decoder.attention.W(H.values)
        prev = torch.full((b,), self.end_id, dtype=torch.long, device=H.values.device)
        outputs: List[List[int]] = [[] for _ in range(b)]
        finished = [False] * b
        for _ in range(t_max):
            logits, state = self.decoder.step(state, H, prev, projected)
            logits[:, self.pad_id] = float("-inf")
            prev = logits.argmax(dim=-1)
            for i, tok in enumerate(prev.tolist()):
                if not finished[i]:
                    outputs[i].append(tok)
                    finished[i] = tok == self.end_id
            if all(finished):
                break
        for i in range(b):
            if not finished[i]:
                outputs[i].append(self.end_id)
        return [TokenSeq(tuple(o)) for o in outputs]


# -----------------------
# Single-item helpers
# -----------------------
def _single(img: Union[WordImage, Sequence[WordImage]]) -> List[WordImage]:
    return [img] if isinstance(img, WordImage) else list(img)


def encode(model: WordRecognizer, img: Union[WordImage, Sequence[WordImage]]) -> FeatureSequence:
    block, widths = pad_images(_single(img))
    return model.encode(block, widths)


def attention_scores(attention: LocationAttention, H: FeatureSequence, s_prev: torch.Tensor,
                     alpha_prev: torch.Tensor) -> torch.Tensor:
    return attention(H, s_prev, alpha_prev)


def decode_step(decoder: AttentionDecoder, state: DecoderState, H: FeatureSequence,
                prev_token: Union[int, torch.Tensor]) -> Tuple[torch.Tensor, DecoderState]:
    if not torch.is_tensor(prev_token):
        prev_token = torch.full((H.values.shape[0],), int(prev_token), dtype=torch.long,
                                device=H.values.device)
    return decoder.step(state, H, prev_token)


def decode_greedy(model: WordRecognizer, H: FeatureSequence, t_max: int) -> List[TokenSeq]:
    return model.decode_greedy(H, t_max)


def forward_teacher_forced(model: WordRecognizer, img: Union[WordImage, Sequence[WordImage]],
                           target: Union[TokenSeq, Sequence[TokenSeq]]) -> torch.Tensor:
    targets = [target] if isinstance(target, TokenSeq) else list(target)
    t_max = max(len(t) for t in targets)
    block = torch.full((len(targets), t_max), model.pad_id, dtype=torch.long)
    for i, t in enumerate(targets):
        block[i, :len(t)] = torch.tensor(t.ids, dtype=torch.long)
    return model.forward_teacher_forced(encode(model, img), block)


@torch.no_grad()
def recognize(model: WordRecognizer, images: Sequence[WordImage], t_max: int,
              batch_size: int = C.BATCH_SIZE) -> List[TokenSeq]:
    """Greedy transcription of many images, batched, eval mode."""
    was_training = model.training
    model.eval()
    out: List[TokenSeq] = []
    try:
        for start in range(0, len(images), batch_size):
            chunk = [images[i] for i in range(start, min(start + batch_size, len(images)))]
            out.extend(model.decode_greedy(encode(model, chunk), t_max))
    finally:
        model.train(was_training)
    return out
