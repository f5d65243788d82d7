# synthgen.py
"""
Synthetic source data: render words from user-supplied outline fonts and
augment them online. Every function here is a pure function of its seed
arguments, so workers can split a stream by sample index.
"""
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Dict, FrozenSet, Iterator, List, Optional, Sequence

import numpy as np
from fontTools.ttLib import TTFont
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

import htr_constants as C
from config import AugmentConfig, SynthConfig
from errors import ConfigError, EmptyFontSet, MissingGlyph

if TYPE_CHECKING:
    from datakit import Charset

logger = logging.getLogger("synth2real-htr.synthgen")

FONT_SUFFIXES = {".ttf", ".otf"}


# -----------------------
# Word images
# -----------------------
class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class LabelAudit:
    """Counts reads of target-domain transcripts while `watching()` is active."""

    def __init__(self):
        self.reads = 0
        self._depth = 0

    @contextmanager
    def watching(self):
        self._depth += 1
        try:
            yield self
        finally:
            self._depth -= 1

    def record(self) -> None:
        if self._depth:
            self.reads += 1

    def reset(self) -> None:
        self.reads = 0


LABEL_AUDIT = LabelAudit()


class WordImage:
    """Grayscale word image in [0, 1] (ink dark) with its provenance."""
    __slots__ = ("pixels", "domain", "writer_id", "item_id", "_transcript")

    def __init__(self, pixels: np.ndarray, transcript: Optional[str] = None,
                 domain: Domain = Domain.SOURCE, writer_id: Optional[str] = None,
                 item_id: Optional[str] = None):
        pixels = np.asarray(pixels, dtype=np.float32)
        if pixels.ndim != 2 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError(f"WordImage needs a non-empty 2-D array, got shape {pixels.shape}")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("WordImage pixels must lie in [0, 1]")
        domain = Domain(domain)
        if domain is Domain.SOURCE and not transcript:
            raise ValueError("source-domain images always carry a transcript")
        self.pixels = pixels
        self.domain = domain
        self.writer_id = writer_id
        self.item_id = item_id
        self._transcript = transcript

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def has_transcript(self) -> bool:
        return self._transcript is not None

    @property
    def transcript(self) -> Optional[str]:
        if self.domain is Domain.TARGET and self._transcript is not None:
            LABEL_AUDIT.record()
        return self._transcript

    def replace(self, pixels: np.ndarray) -> "WordImage":
        return WordImage(pixels, self._transcript, self.domain, self.writer_id, self.item_id)

    def as_domain(self, domain: Domain) -> "WordImage":
        return WordImage(self.pixels, self._transcript, domain, self.writer_id, self.item_id)

    def __repr__(self) -> str:
        return f"WordImage({self.height}x{self.width}, domain={self.domain.value}, item_id={self.item_id!r})"


# -----------------------
# Fonts
# -----------------------
@dataclass(frozen=True)
class FontEntry:
    font_id: str
    path: str
    codepoints: FrozenSet[int]

    def first_missing(self, word: str) -> Optional[str]:
        for ch in word:
            if ord(ch) not in self.codepoints:
                return ch
        return None


class FontSet:
    def __init__(self, entries: Sequence[FontEntry]):
        if not entries:
            raise EmptyFontSet("A FontSet needs at least one font")
        ids = [e.font_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"Duplicate font ids in {ids}")
        self.entries: List[FontEntry] = list(entries)
        self._by_id: Dict[str, FontEntry] = {e.font_id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, font_id: str) -> FontEntry:
        return self._by_id[font_id]

    @property
    def ids(self) -> List[str]:
        return [e.font_id for e in self.entries]


def register_font(path: str, font_id: Optional[str] = None) -> FontEntry:
    """Load one outline font; raises whatever fontTools/Pillow raise on a bad file."""
    with TTFont(path, lazy=True) as tt:
        cmap = tt.getBestCmap()
    if not cmap:
        raise ValueError("font has no unicode cmap")
    ImageFont.truetype(path, 24)
    return FontEntry(font_id or Path(path).name, str(path), frozenset(cmap.keys()))


def load_fonts(dir_path: str) -> FontSet:
    root = Path(dir_path)
    if not root.is_dir():
        raise ConfigError(f"Font directory not found: {dir_path}")
    entries = []
    for f in sorted(root.iterdir()):
        if f.suffix.lower() not in FONT_SUFFIXES:
            continue
        try:
            entries.append(register_font(str(f)))
        except Exception as e:
            logger.warning("Skipping unloadable font %s: %s", f.name, e)
    if not entries:
        raise EmptyFontSet(f"No loadable fonts in {dir_path}")
    logger.info("Loaded %d fonts from %s", len(entries), dir_path)
    return FontSet(entries)


@lru_cache(maxsize=256)
def _pil_font(path: str, size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.truetype(path, size)


# -----------------------
# Corpus
# -----------------------
@dataclass
class Corpus:
    words: List[str]
    language_tags: Optional[List[Optional[str]]] = None

    def __post_init__(self):
        if not self.words:
            raise ConfigError("Corpus is empty")
        if any(not w for w in self.words):
            raise ConfigError("Corpus words must be non-empty")
        if len(set(self.words)) != len(self.words):
            raise ConfigError("Corpus words must be unique")
        if self.language_tags is not None and len(self.language_tags) != len(self.words):
            raise ConfigError("language_tags must align with words")

    def __len__(self) -> int:
        return len(self.words)

    def characters(self) -> FrozenSet[str]:
        return frozenset(ch for w in self.words for ch in w)

    def validate(self, charset: "Charset") -> None:
        for w in self.words:
            for ch in w:
                if ch not in charset.id_of:
                    raise ConfigError(f"Corpus word {w!r} uses {ch!r}, which is not in the charset")


def load_corpus(path: str, charset: Optional["Charset"] = None) -> Corpus:
    """One word per line, optionally `word<TAB>language`."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"Corpus file not found: {path}")
    words: List[str] = []
    tags: List[Optional[str]] = []
    seen = set()
    for line in p.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        word, _, tag = line.partition("\t")
        if word in seen:
            continue
        seen.add(word)
        words.append(word)
        tags.append(tag or None)
    corpus = Corpus(words, tags if any(tags) else None)
    if charset is not None:
        corpus.validate(charset)
    return corpus


# -----------------------
# Rendering
# -----------------------
def scale_to_height(arr: np.ndarray, canonical_height: int) -> np.ndarray:
    h, w = arr.shape
    if h == canonical_height:
        return arr
    new_w = max(1, int(round(w * canonical_height / h)))
    img = Image.fromarray(arr.astype(np.float32))
    img = img.resize((new_w, canonical_height), Image.Resampling.BILINEAR)
    return np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)


def render_word(word: str, font: FontEntry, canonical_height: int = C.CANONICAL_HEIGHT,
                rng_seed: int = 0, synth: Optional[SynthConfig] = None) -> WordImage:
    if not word:
        raise ValueError("render_word needs a non-empty word")
    missing = font.first_missing(word)
    if missing is not None:
        raise MissingGlyph(missing, font.font_id)
    synth = synth or SynthConfig()
    rng = np.random.default_rng(rng_seed)
    size = int(rng.integers(synth.font_size_range[0], synth.font_size_range[1] + 1))
    margin_l, margin_r = (int(m) for m in rng.integers(synth.margin_range_px[0],
                                                       synth.margin_range_px[1] + 1, size=2))
    pil_font = _pil_font(font.path, size)
    ascent, descent = pil_font.getmetrics()
    x0, y0, x1, y1 = pil_font.getbbox(word)
    advance = pil_font.getlength(word)

    left = min(0, x0)
    right = max(int(math.ceil(advance)), x1)
    top = min(0, y0)
    bottom = max(ascent + descent, y1)
    pad_v = max(2, size // 8)
    width = right - left + margin_l + margin_r
    height = bottom - top + 2 * pad_v

    canvas = Image.new("L", (width, height), 255)
    ImageDraw.Draw(canvas).text((margin_l - left, pad_v - top), word, font=pil_font, fill=0)
    arr = np.asarray(canvas, dtype=np.float32) / 255.0
    arr = scale_to_height(arr, canonical_height)
    return WordImage(arr, transcript=word, domain=Domain.SOURCE, item_id=f"{font.font_id}:{word}")


# -----------------------
# Augmentation: geometric -> elastic -> pixel-level -> background
# -----------------------
@dataclass
class _AugmentDraw:
    shear_deg: float
    rotation_deg: float
    scale: float
    blur_sigma: float
    gamma: float
    brightness: float
    contrast: float
    noise_std: float
    texture_strength: float


def _draw_params(cfg: AugmentConfig, rng: np.random.Generator) -> _AugmentDraw:
    g, p, b = cfg.geometric, cfg.pixel, cfg.background
    return _AugmentDraw(
        shear_deg=float(rng.uniform(*g.shear_range_deg)),
        rotation_deg=float(rng.uniform(*g.rotation_range_deg)),
        scale=float(rng.uniform(*g.scale_range)),
        blur_sigma=float(rng.uniform(*p.blur_sigma_range)),
        gamma=float(rng.uniform(*p.gamma_range)),
        brightness=float(rng.uniform(*p.brightness_range)),
        contrast=float(rng.uniform(*p.contrast_range)),
        noise_std=float(rng.uniform(*p.noise_std_range)),
        texture_strength=float(rng.uniform(*b.texture_strength_range)) if b.enabled else 0.0,
    )


def _scale(ink: np.ndarray, s: float) -> np.ndarray:
    h, w = ink.shape
    zoomed = ndimage.zoom(ink, (s, s), order=1, mode="constant", cval=0.0, grid_mode=True)
    zh, zw = zoomed.shape
    if zw < 1:
        zoomed = np.zeros((zh, 1))
    if zh >= h:
        top = (zh - h) // 2
        return zoomed[top:top + h]
    out = np.zeros((h, zoomed.shape[1]))
    top = (h - zh) // 2
    out[top:top + zh] = zoomed
    return out


def _shear(ink: np.ndarray, deg: float) -> np.ndarray:
    h, w = ink.shape
    t = math.tan(math.radians(deg))
    extra = int(math.ceil(abs(t) * h))
    matrix = np.array([[1.0, 0.0], [t, 1.0]])
    offset = np.array([0.0, -t * h / 2.0 - extra / 2.0])
    return ndimage.affine_transform(ink, matrix, offset=offset, output_shape=(h, w + extra),
                                    order=1, mode="constant", cval=0.0)


def _rotate(ink: np.ndarray, deg: float) -> np.ndarray:
    h, w = ink.shape
    a = math.radians(deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - rot @ center
    return ndimage.affine_transform(ink, rot, offset=offset, order=1, mode="constant", cval=0.0)


def _elastic(ink: np.ndarray, alpha: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    shape = ink.shape
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return ndimage.map_coordinates(ink, [rows + dy, cols + dx], order=1, mode="constant", cval=0.0)


def _background(shape, strength: float, rng: np.random.Generator) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.random(shape), sigma=max(2.0, shape[0] / 8.0), mode="reflect")
    lo, hi = field.min(), field.max()
    field = (field - lo) / (hi - lo) if hi > lo else np.zeros(shape)
    return 1.0 - strength * field


def augment(img: WordImage, cfg: AugmentConfig, rng_seed: int) -> WordImage:
    """Seeded augmentation; an all-identity config returns the input pixels untouched."""
    rng = np.random.default_rng(rng_seed)
    d = _draw_params(cfg, rng)
    x = img.pixels.astype(np.float64)

    ink = 1.0 - x
    geometric = False
    if d.scale != 1.0:
        ink, geometric = _scale(ink, d.scale), True
    if d.shear_deg != 0.0:
        ink, geometric = _shear(ink, d.shear_deg), True
    if d.rotation_deg != 0.0:
        ink, geometric = _rotate(ink, d.rotation_deg), True
    if cfg.geometric.elastic.alpha > 0.0:
        ink, geometric = _elastic(ink, cfg.geometric.elastic.alpha, cfg.geometric.elastic.sigma, rng), True
    if geometric:
        x = 1.0 - np.clip(ink, 0.0, 1.0)

    if d.blur_sigma > 0.0:
        x = ndimage.gaussian_filter(x, d.blur_sigma, mode="nearest")
    if d.gamma != 1.0:
        x = np.power(np.clip(x, 0.0, 1.0), d.gamma)
    if d.brightness != 0.0:
        x = x + d.brightness
    if d.contrast != 1.0:
        mean = x.mean()
        x = (x - mean) * d.contrast + mean
    if d.noise_std > 0.0:
        x = x + rng.normal(0.0, d.noise_std, x.shape)
    if d.texture_strength > 0.0:
        x = np.clip(x, 0.0, 1.0) * _background(x.shape, d.texture_strength, rng)

    return img.replace(np.clip(x, 0.0, 1.0).astype(np.float32))


# -----------------------
# Streams
# -----------------------
class SyntheticWords(Sequence):
    """Random-access synthetic stream; element i depends only on (rng_seed, i)."""

    def __init__(self, corpus: Corpus, fonts: FontSet, cfg: AugmentConfig, n: int, rng_seed: int,
                 canonical_height: int = C.CANONICAL_HEIGHT, synth: Optional[SynthConfig] = None):
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        if rng_seed < 0:
            raise ValueError("rng_seed must be non-negative")
        self.corpus = corpus
        self.fonts = fonts
        self.cfg = cfg
        self.n = n
        self.rng_seed = rng_seed
        self.canonical_height = canonical_height
        self.synth = synth or SynthConfig()

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(self.n))]
        if index < 0:
            index += self.n
        if not 0 <= index < self.n:
            raise IndexError(index)
        return generate_item(self.corpus, self.fonts, self.cfg, self.rng_seed, index,
                             self.canonical_height, self.synth)


def generate_item(corpus: Corpus, fonts: FontSet, cfg: AugmentConfig, rng_seed: int, index: int,
                  canonical_height: int = C.CANONICAL_HEIGHT,
                  synth: Optional[SynthConfig] = None) -> WordImage:
    synth = synth or SynthConfig()
    rng = np.random.default_rng([rng_seed, index])
    word = corpus.words[int(rng.integers(len(corpus)))]
    render_seed, augment_seed = (int(s) for s in rng.integers(0, 2 ** 32, size=2))
    last_error: Optional[MissingGlyph] = None
    for _ in range(synth.max_font_retries + 1):
        font = fonts.entries[int(rng.integers(len(fonts)))]
        try:
            img = render_word(word, font, canonical_height, render_seed, synth)
            break
        except MissingGlyph as e:
            last_error = e
            logger.debug("Resampling font for %r: %s", word, e)
    else:
        raise last_error
    img = augment(img, cfg, augment_seed)
    img.item_id = f"synth-{rng_seed}-{index}"
    return img


def generate_stream(corpus: Corpus, fonts: FontSet, cfg: AugmentConfig, n: int, rng_seed: int,
                    canonical_height: int = C.CANONICAL_HEIGHT,
                    synth: Optional[SynthConfig] = None) -> Iterator[WordImage]:
    return iter(SyntheticWords(corpus, fonts, cfg, n, rng_seed, canonical_height, synth))
