# builders.py
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from PIL import Image

from config import AugmentConfig, RunConfig, save_run_config
from datakit import (Charset, DatasetManifest, ManifestRecord, Split, build_charset, save_charset,
                     save_manifest)
from synthgen import Corpus, Domain, FontSet, generate_item

logger = logging.getLogger("synth2real-htr.builders")


@dataclass
class SyntheticDataset:
    out_dir: str
    manifest_path: str
    charset_path: str
    n_items: int


def save_png(pixels: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(pixels * 255.0).astype(np.uint8)).save(path, format="PNG", optimize=False)


def _render_chunk(corpus: Corpus, fonts: FontSet, augment_cfg: AugmentConfig, rng_seed: int,
                  indices: List[int], cfg: RunConfig, image_dir: Path) -> List[Dict]:
    """Render one block of stream indices to PNG; runs inside a joblib worker."""
    rows = []
    for i in indices:
        img = generate_item(corpus, fonts, augment_cfg, rng_seed, i, cfg.data.canonical_height, cfg.synth)
        name = f"{i:07d}.png"
        save_png(img.pixels, image_dir / name)
        rows.append({"index": i, "image_path": f"{image_dir.name}/{name}", "transcript": img.transcript,
                     "width": img.width})
    return rows


def build_synthetic_dataset(out_dir: str, corpus: Corpus, fonts: FontSet, augment_cfg: AugmentConfig,
                            n: int, rng_seed: int, cfg: Optional[RunConfig] = None,
                            domain: Domain = Domain.SOURCE, split: Split = Split.TRAIN,
                            writer_id: Optional[str] = None, n_jobs: int = 1,
                            charset: Optional[Charset] = None) -> SyntheticDataset:
    """
    Materialize `n` stream items as PNGs plus manifest.jsonl, charset.json and
    run_config.json. Output depends only on the inputs and seed, not on n_jobs.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cfg = cfg or RunConfig()
    out = Path(out_dir)
    image_dir = out / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    blocks = [b.tolist() for b in np.array_split(np.arange(n), max(1, min(n, 4 * max(n_jobs, 1)))) if b.size]
    chunks = Parallel(n_jobs=n_jobs)(
        delayed(_render_chunk)(corpus, fonts, augment_cfg, rng_seed, block, cfg, image_dir)
        for block in blocks
    )
    rows = sorted((r for chunk in chunks for r in chunk), key=lambda r: r["index"])

    records = [ManifestRecord(r["image_path"], r["transcript"], writer_id, split, domain) for r in rows]
    manifest_path = out / "manifest.jsonl"
    save_manifest(DatasetManifest(records, out), str(manifest_path))

    charset = charset or build_charset([corpus], cfg.synth.extra_symbols)
    charset_path = out / "charset.json"
    save_charset(charset, str(charset_path))
    save_run_config(cfg, str(out / "run_config.json"))
    (out / "dataset.json").write_text(json.dumps({
        "n_items": n, "rng_seed": rng_seed, "domain": Domain(domain).value, "split": Split(split).value,
        "writer_id": writer_id, "fonts": fonts.ids, "augment": augment_cfg.model_dump(mode="json"),
    }, indent=2, sort_keys=True), encoding="utf-8")

    summary = pd.DataFrame(rows)
    logger.info("Wrote %d images to %s (mean width %.1f px, %d distinct words)", len(rows), out,
                summary["width"].mean(), summary["transcript"].nunique())
    return SyntheticDataset(str(out), str(manifest_path), str(charset_path), len(rows))


def manifest_summary(manifest: DatasetManifest) -> pd.DataFrame:
    """Counts and mean transcript length per (domain, split, writer)."""
    df = manifest.to_frame()
    if df.empty:
        return pd.DataFrame(columns=["domain", "split", "writer_id", "n_items", "mean_length"])
    df["length"] = df["transcript"].fillna("").str.len()
    df = df.fillna({"domain": "-", "writer_id": "-"})
    grouped = df.groupby(["domain", "split", "writer_id"])
    return grouped.agg(n_items=("image_path", "size"), mean_length=("length", "mean")).reset_index()
