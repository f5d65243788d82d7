# datakit.py
"""
Charset and transcript tokenization, real-dataset manifests, image
preprocessing and source/target batching with domain labels.
"""
import hashlib
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

import htr_constants as C
from config import AugmentConfig
from errors import ConfigError, DecodeError, ExhaustedStream
from synthgen import LABEL_AUDIT, Corpus, Domain, WordImage, augment, scale_to_height

logger = logging.getLogger("synth2real-htr.datakit")

__all__ = [
    "LABEL_AUDIT", "Charset", "TokenSeq", "build_charset", "encode_transcript", "decode_tokens",
    "save_charset", "load_charset", "preprocess", "Split", "ManifestRecord", "DatasetManifest",
    "load_manifest", "save_manifest", "ManifestImages", "DomainBatch", "collate", "DomainBatcher",
    "LabeledBatcher", "make_batches", "make_labeled_batches", "pad_images",
]


# -----------------------
# Charset / TokenSeq
# -----------------------
class Charset:
    """Symbols take ids [0, n) in codepoint order; END, PAD, UNK follow."""

    def __init__(self, symbols: Iterable[str]):
        symbols = list(symbols)
        for s in symbols:
            if len(s) != 1:
                raise ConfigError(f"Charset symbols must be single characters, got {s!r}")
        if len(set(symbols)) != len(symbols):
            raise ConfigError("Charset symbols must be unique")
        self.symbols: List[str] = symbols
        self.id_of: Dict[str, int] = {c: i for i, c in enumerate(symbols)}
        n = len(symbols)
        self.specials: Dict[str, int] = {"END": n, "PAD": n + 1, "UNK": n + 2}
        self.char_of: Dict[int, str] = {i: c for c, i in self.id_of.items()}
        self.unk_count = 0

    def __len__(self) -> int:
        return len(self.symbols) + len(self.specials)

    def __eq__(self, other) -> bool:
        return isinstance(other, Charset) and self.symbols == other.symbols

    @property
    def end_id(self) -> int:
        return self.specials["END"]

    @property
    def pad_id(self) -> int:
        return self.specials["PAD"]

    @property
    def unk_id(self) -> int:
        return self.specials["UNK"]

    def covers(self, text: str) -> bool:
        return all(ch in self.id_of for ch in text)

    def to_json(self) -> Dict[str, Any]:
        return {"format_version": C.CHARSET_FORMAT_VERSION, "symbols": list(self.symbols),
                "specials": dict(self.specials)}

    def fingerprint(self) -> str:
        payload = json.dumps({"symbols": self.symbols, "specials": self.specials},
                             ensure_ascii=False, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "Charset":
        version = data.get("format_version")
        if version != C.CHARSET_FORMAT_VERSION:
            raise ConfigError(f"Unsupported charset format_version {version!r}")
        cs = cls(data["symbols"])
        if data.get("specials") != cs.specials:
            raise ConfigError("Charset file specials do not match the symbol inventory")
        return cs


@dataclass(frozen=True)
class TokenSeq:
    ids: Tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def check(self, cs: Charset) -> None:
        if not self.ids:
            raise ValueError("TokenSeq must hold at least END")
        if self.ids[-1] != cs.end_id or self.ids.count(cs.end_id) != 1:
            raise ValueError("TokenSeq needs exactly one END, at the final position")
        if cs.pad_id in self.ids:
            raise ValueError("TokenSeq must not contain PAD before END")


def build_charset(corpora: List[Corpus], extra_symbols: Iterable[str] = ()) -> Charset:
    if not corpora:
        raise ValueError("build_charset needs at least one corpus")
    chars = set(extra_symbols)
    for corpus in corpora:
        chars |= corpus.characters()
    return Charset(sorted(chars, key=ord))


def encode_transcript(cs: Charset, text: str) -> TokenSeq:
    if not text:
        raise ValueError("encode_transcript needs a non-empty text")
    ids = []
    for ch in text:
        idx = cs.id_of.get(ch)
        if idx is None:
            cs.unk_count += 1
            logger.debug("Mapping %r to UNK", ch)
            idx = cs.unk_id
        ids.append(idx)
    ids.append(cs.end_id)
    return TokenSeq(tuple(ids))


def decode_tokens(cs: Charset, seq: Union[TokenSeq, Iterable[int]]) -> str:
    ids = seq.ids if isinstance(seq, TokenSeq) else seq
    out = []
    for i in ids:
        i = int(i)
        if i == cs.end_id:
            break
        ch = cs.char_of.get(i)
        if ch is not None:
            out.append(ch)
    return "".join(out)


def save_charset(cs: Charset, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cs.to_json(), ensure_ascii=False, indent=2), encoding="utf-8")


def load_charset(path: str) -> Charset:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"Charset file not found: {path}")
    return Charset.from_json(json.loads(p.read_text(encoding="utf-8")))


# -----------------------
# Preprocessing
# -----------------------
def _to_gray_array(img: Union[str, Path, Image.Image, np.ndarray]) -> np.ndarray:
    if isinstance(img, (str, Path)):
        try:
            with Image.open(img) as im:
                im.load()
                return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
            raise DecodeError(f"Cannot decode image {img}: {e}") from e
    if isinstance(img, Image.Image):
        return np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    arr = np.asarray(img)
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[..., :3]
        arr = arr.mean(axis=2)
    if arr.ndim != 2 or arr.size == 0:
        raise DecodeError(f"Cannot interpret array of shape {np.shape(img)} as an image")
    arr = arr.astype(np.float32)
    if np.issubdtype(np.asarray(img).dtype, np.integer) or arr.max() > 1.0:
        arr = arr / 255.0
    return np.clip(arr, 0.0, 1.0)


def preprocess(img: Union[str, Path, Image.Image, np.ndarray],
               canonical_height: int = C.CANONICAL_HEIGHT, transcript: Optional[str] = None,
               domain: Domain = Domain.TARGET, writer_id: Optional[str] = None,
               item_id: Optional[str] = None) -> WordImage:
    """Grayscale, scaled to canonical height with the aspect ratio kept, pixels in [0, 1]."""
    arr = scale_to_height(_to_gray_array(img), canonical_height)
    return WordImage(arr, transcript=transcript, domain=domain, writer_id=writer_id, item_id=item_id)


# -----------------------
# Manifests
# -----------------------
class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class ManifestRecord:
    image_path: str
    transcript: Optional[str] = None
    writer_id: Optional[str] = None
    split: Split = Split.TRAIN
    domain: Optional[Domain] = None

    def to_dict(self) -> Dict[str, Any]:
        out = {"image_path": self.image_path, "transcript": self.transcript,
               "writer_id": self.writer_id, "split": Split(self.split).value}
        if self.domain is not None:
            out["domain"] = Domain(self.domain).value
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ManifestRecord":
        if "image_path" not in data:
            raise ConfigError(f"Manifest record without image_path: {data}")
        domain = data.get("domain")
        return cls(image_path=data["image_path"], transcript=data.get("transcript"),
                   writer_id=data.get("writer_id"), split=Split(data.get("split", "train")),
                   domain=Domain(domain) if domain else None)


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def _with(self, records: List[ManifestRecord]) -> "DatasetManifest":
        return DatasetManifest(records, self.root)

    def select(self, split: Optional[Union[Split, str]]) -> "DatasetManifest":
        if split is None:
            return self
        split = Split(split)
        return self._with([r for r in self.records if r.split == split])

    def for_writer(self, writer_id: str) -> "DatasetManifest":
        return self._with([r for r in self.records if r.writer_id == writer_id])

    def subset(self, n: int, rng_seed: int) -> "DatasetManifest":
        """Deterministic sample of n records, in manifest order."""
        if n >= len(self.records):
            return self
        keep = np.sort(np.random.default_rng(rng_seed).choice(len(self.records), size=n, replace=False))
        return self._with([self.records[i] for i in keep])

    def check_paths(self) -> None:
        missing = [r.image_path for r in self.records if not self.resolve(r).exists()]
        if missing:
            raise ConfigError(f"{len(missing)} manifest paths do not resolve, e.g. {missing[:3]}")

    def unk_stats(self, cs: Charset) -> Tuple[int, int]:
        """(characters outside the charset, total characters) over all transcripts."""
        unk = total = 0
        for r in self.records:
            if r.transcript:
                total += len(r.transcript)
                unk += sum(1 for ch in r.transcript if ch not in cs.id_of)
        return unk, total

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.records],
                            columns=["image_path", "transcript", "writer_id", "split", "domain"])


def load_manifest(path: str, check_paths: bool = True) -> DatasetManifest:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"Manifest not found: {path}")
    records = []
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(ManifestRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, ValueError) as e:
            raise ConfigError(f"{path}:{n}: bad manifest record: {e}") from e
    manifest = DatasetManifest(records, p.parent)
    if check_paths:
        manifest.check_paths()
    return manifest


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.records:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


class ManifestImages(Sequence):
    """Lazy view of a manifest as WordImages of a fixed domain."""

    def __init__(self, manifest: DatasetManifest, domain: Domain,
                 canonical_height: int = C.CANONICAL_HEIGHT):
        self.manifest = manifest
        self.domain = Domain(domain)
        self.canonical_height = canonical_height

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        r = self.manifest.records[index]
        return preprocess(self.manifest.resolve(r), self.canonical_height, transcript=r.transcript,
                          domain=self.domain, writer_id=r.writer_id, item_id=r.image_path)


# -----------------------
# Batches
# -----------------------
@dataclass
class DomainBatch:
    images: np.ndarray           # (B, H, W_max), padded with the background level
    widths: np.ndarray           # (B,) true widths
    domain_labels: np.ndarray    # (B,) 1.0 source, 0.0 target
    labeled: np.ndarray          # (B,) items whose transcripts feed the recognition loss
    token_targets: Optional[np.ndarray] = None   # (B, T) PAD-padded; unlabeled rows all PAD
    item_ids: List[Optional[str]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.widths.shape[0])

    @property
    def n_source(self) -> int:
        return int((self.domain_labels == C.SOURCE_LABEL).sum())

    @property
    def n_target(self) -> int:
        return self.size - self.n_source

    @property
    def is_mixed(self) -> bool:
        return self.n_source > 0 and self.n_target > 0


def pad_images(items: List[WordImage]) -> Tuple[np.ndarray, np.ndarray]:
    heights = {it.height for it in items}
    if len(heights) != 1:
        raise ValueError(f"Batch items must share the canonical height, got {sorted(heights)}")
    widths = np.array([it.width for it in items], dtype=np.int64)
    block = np.full((len(items), heights.pop(), int(widths.max())), C.BACKGROUND_LEVEL, dtype=np.float32)
    for i, it in enumerate(items):
        block[i, :, :it.width] = it.pixels
    return block, widths


def collate(items: List[WordImage], cs: Charset,
            label_domains: FrozenSet[Domain] = frozenset({Domain.SOURCE})) -> DomainBatch:
    """Only items whose domain is in `label_domains` have their transcripts read."""
    block, widths = pad_images(items)
    domain_labels = np.array([C.SOURCE_LABEL if it.domain is Domain.SOURCE else C.TARGET_LABEL
                              for it in items], dtype=np.float32)
    labeled = np.array([it.domain in label_domains and it.has_transcript for it in items], dtype=bool)
    seqs = [encode_transcript(cs, it.transcript).ids if use else None for it, use in zip(items, labeled)]
    targets = None
    if labeled.any():
        t_max = max(len(s) for s in seqs if s is not None)
        targets = np.full((len(items), t_max), cs.pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            if s is not None:
                targets[i, :len(s)] = s
    return DomainBatch(block, widths, domain_labels, labeled, targets, [it.item_id for it in items])


def _as_sequence(stream) -> Sequence:
    return stream if isinstance(stream, Sequence) or hasattr(stream, "__getitem__") else list(stream)


def _cycled(n: int, total: int, rng: np.random.Generator) -> np.ndarray:
    """`total` indices over range(n), each full pass freshly shuffled."""
    passes = [rng.permutation(n) for _ in range(-(-total // n))]
    return np.concatenate(passes)[:total]


def _chunk(order: List[Any], batch_size: int) -> List[List[Any]]:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return chunks


def _augment_seed(rng_seed: int, epoch: int, position: int) -> int:
    return int(np.random.SeedSequence([rng_seed, epoch, position]).generate_state(1)[0])


class DomainBatcher:
    """
    Balanced source/target epochs: each epoch shows max(|S|, |T|) items per
    domain (the smaller side is cycled), shuffled together from (seed, epoch).
    Balance holds over the epoch, not within a batch.
    """

    def __init__(self, source, target, cs: Charset, batch_size: int, rng_seed: int,
                 augment_cfg: Optional[AugmentConfig] = None):
        if batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {batch_size}")
        self.source = _as_sequence(source)
        self.target = _as_sequence(target)
        if len(self.source) == 0 or len(self.target) == 0:
            raise ExhaustedStream(f"Both domains need items (source={len(self.source)}, target={len(self.target)})")
        self.cs = cs
        self.batch_size = batch_size
        self.rng_seed = rng_seed
        self.augment_cfg = augment_cfg
        self.per_domain = max(len(self.source), len(self.target))

    def plan(self, epoch: int) -> List[List[Tuple[int, int, int]]]:
        """Batches of (side, item index, position within side); side 0 = source."""
        rng = np.random.default_rng([self.rng_seed, epoch])
        s_idx = _cycled(len(self.source), self.per_domain, rng)
        t_idx = _cycled(len(self.target), self.per_domain, rng)
        items = [(0, int(i), p) for p, i in enumerate(s_idx)] + [(1, int(j), p) for p, j in enumerate(t_idx)]
        order = [items[k] for k in rng.permutation(len(items))]
        return _chunk(order, self.batch_size)

    def __len__(self) -> int:
        return len(_chunk(list(range(2 * self.per_domain)), self.batch_size))

    def _load(self, side: int, index: int, position: int, epoch: int) -> WordImage:
        if side == 1:
            return self.target[index]
        img = self.source[index]
        if self.augment_cfg is not None:
            img = augment(img, self.augment_cfg, _augment_seed(self.rng_seed, epoch, position))
        return img

    def batches(self, epoch: int, start: int = 0) -> Iterator[DomainBatch]:
        for chunk in self.plan(epoch)[start:]:
            items = [self._load(side, i, p, epoch) for side, i, p in chunk]
            yield collate(items, self.cs)


class LabeledBatcher:
    """Shuffled batches where every item is labeled (supervised adaptation)."""

    def __init__(self, images, cs: Charset, batch_size: int, rng_seed: int,
                 augment_cfg: Optional[AugmentConfig] = None):
        if batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {batch_size}")
        self.images = _as_sequence(images)
        if len(self.images) == 0:
            raise ExhaustedStream("No labeled images to batch")
        self.cs = cs
        self.batch_size = batch_size
        self.rng_seed = rng_seed
        self.augment_cfg = augment_cfg

    def plan(self, epoch: int) -> List[List[int]]:
        order = np.random.default_rng([self.rng_seed, epoch]).permutation(len(self.images)).tolist()
        return _chunk(order, self.batch_size)

    def __len__(self) -> int:
        return len(_chunk(list(range(len(self.images))), self.batch_size))

    def batches(self, epoch: int, start: int = 0) -> Iterator[DomainBatch]:
        for chunk in self.plan(epoch)[start:]:
            items = []
            for i in chunk:
                img = self.images[i]
                if self.augment_cfg is not None:
                    img = augment(img, self.augment_cfg, _augment_seed(self.rng_seed, epoch, i))
                items.append(img)
            yield collate(items, self.cs, label_domains=frozenset(Domain))


def _epochs(batcher, epochs: int) -> Iterator[DomainBatch]:
    for e in range(epochs):
        yield from batcher.batches(e)


def make_batches(source, target, batch_size: int, rng_seed: int, cs: Charset, epochs: int = 1,
                 augment_cfg: Optional[AugmentConfig] = None) -> Iterator[DomainBatch]:
    return _epochs(DomainBatcher(source, target, cs, batch_size, rng_seed, augment_cfg), epochs)


def make_labeled_batches(images, batch_size: int, rng_seed: int, cs: Charset, epochs: int = 1,
                         augment_cfg: Optional[AugmentConfig] = None) -> Iterator[DomainBatch]:
    return _epochs(LabeledBatcher(images, cs, batch_size, rng_seed, augment_cfg), epochs)
