# conftest.py
from pathlib import Path

import numpy as np
import pytest
from fontTools.fontBuilder import FontBuilder
from fontTools.pens.ttGlyphPen import TTGlyphPen

from builders import build_synthetic_dataset
from config import AugmentConfig, load_run_config
from datakit import Split, build_charset
from synthgen import Corpus, Domain, load_fonts

HERE = Path(__file__).parent
LETTERS = "abcdefghijklmnopqrstuvwxyz"
WORDS = ["cab", "bad", "face", "dead", "bead", "fade", "ace", "deaf", "cafe", "bed",
         "hem", "him", "jig", "lime", "mild", "gild", "kale", "make", "jam", "leg"]


def _rect(pen, x0, y0, x1, y1):
    pen.moveTo((x0, y0))
    pen.lineTo((x0, y1))
    pen.lineTo((x1, y1))
    pen.lineTo((x1, y0))
    pen.closePath()


def _draw_char(pen, code: int, style: int):
    """Three bars whose heights spell (code + 7 * style) in base 3."""
    pattern = (code + 7 * style) % 27
    for i in range(3):
        x0 = 30 + i * 190
        top = (250, 475, 700)[pattern % 3]
        pattern //= 3
        _rect(pen, x0, 0, x0 + 140 + 10 * style, top)


def build_test_font(path: Path, chars: str, style: int = 0, family: str = "Bars") -> Path:
    names = [".notdef", "space"] + [f"uni{ord(c):04X}" for c in chars]
    fb = FontBuilder(1000, isTTF=True)
    fb.setupGlyphOrder(names)
    cmap = {32: "space"}
    cmap.update({ord(c): f"uni{ord(c):04X}" for c in chars})
    fb.setupCharacterMap(cmap)
    glyphs = {}
    for name in names:
        pen = TTGlyphPen(None)
        if name == ".notdef":
            _rect(pen, 50, 0, 450, 700)
        elif name != "space":
            _draw_char(pen, int(name[3:], 16), style)
        glyphs[name] = pen.glyph()
    fb.setupGlyf(glyphs)
    glyf = fb.font["glyf"]
    fb.setupHorizontalMetrics({n: (600, getattr(glyf[n], "xMin", 0)) for n in names})
    fb.setupHorizontalHeader(ascent=800, descent=-200)
    fb.setupNameTable({"familyName": f"{family}{style}", "styleName": "Regular"})
    fb.setupOS2(sTypoAscender=800, sTypoDescender=-200, usWinAscent=800, usWinDescent=200)
    fb.setupPost()
    fb.save(str(path))
    return path


@pytest.fixture(scope="session")
def font_dir(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("fonts")
    build_test_font(d / "bars0.ttf", LETTERS, style=0)
    build_test_font(d / "bars1.ttf", LETTERS, style=1)
    build_test_font(d / "half.ttf", LETTERS[:6], style=2)
    (d / "broken.ttf").write_bytes(np.random.default_rng(0).bytes(512))
    (d / "README.txt").write_text("not a font")
    return d


@pytest.fixture(scope="session")
def target_font_dir(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("target_fonts")
    build_test_font(d / "bars3.ttf", LETTERS, style=3)
    return d


@pytest.fixture(scope="session")
def fonts(font_dir):
    return load_fonts(str(font_dir))


@pytest.fixture(scope="session")
def corpus() -> Corpus:
    return Corpus(list(WORDS))


@pytest.fixture(scope="session")
def charset(corpus):
    return build_charset([corpus])


@pytest.fixture
def tiny_cfg(tmp_path):
    cfg = load_run_config(str(HERE / "config_tiny.json"))
    return cfg.with_overrides({"paths.out_dir": str(tmp_path / "run")})


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory, corpus, fonts, target_font_dir, charset):
    """Tiny materialized source / target / validation sets sharing one charset."""
    cfg = load_run_config(str(HERE / "config_tiny.json"))
    root = tmp_path_factory.mktemp("toy")
    target_fonts = load_fonts(str(target_font_dir))
    heavy = AugmentConfig.heavy()
    source = build_synthetic_dataset(str(root / "source"), corpus, fonts, AugmentConfig.light(), 24, 1, cfg,
                                     charset=charset)
    target = build_synthetic_dataset(str(root / "target"), corpus, target_fonts, heavy, 16, 2, cfg,
                                     Domain.TARGET, Split.TRAIN, "w1", charset=charset)
    val = build_synthetic_dataset(str(root / "val"), corpus, target_fonts, heavy, 8, 3, cfg,
                                  Domain.TARGET, Split.VAL, "w1", charset=charset)
    return {"root": root, "source": source.manifest_path, "target": target.manifest_path,
            "val": val.manifest_path, "charset": source.charset_path}


@pytest.fixture(autouse=True)
def _isolated_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SYNTH2REAL_OUTPUT_ROOT", str(tmp_path))
    monkeypatch.setenv("SYNTH2REAL_CACHE_DIR", str(tmp_path / "cache"))
