# evalkit.py
"""
CER/WER, gap reduction, per-writer reports and embedding export.
"""
import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import editdistance
import numpy as np
import pandas as pd
import torch

from adversary import TemporalPooling
from config import EvalConfig
from datakit import (Charset, DatasetManifest, ManifestImages, Split, decode_tokens, load_manifest,
                     pad_images)
from errors import ConfigError, EmptyReference, IncompatibleCharset, LengthMismatch, ZeroGap
from ml_utils import Checkpoint, load_checkpoint, load_module_state
from recognizer import WordRecognizer, recognize
from synthgen import Domain, WordImage

logger = logging.getLogger("synth2real-htr.evalkit")


# -----------------------
# Edit distance, CER, WER
# -----------------------
def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs over characters (strings) or tokens (lists)."""
    return int(editdistance.eval(a, b))


def normalize_text(s: str, case_sensitive: bool = True, strip_punctuation: bool = False) -> str:
    if not case_sensitive:
        s = s.lower()
    if strip_punctuation:
        s = s.translate(str.maketrans("", "", string.punctuation))
    return s


def _check_pairs(refs: Sequence[str], hyps: Sequence[str]) -> None:
    if len(refs) != len(hyps):
        raise LengthMismatch(f"{len(refs)} references vs {len(hyps)} hypotheses")
    if not refs or any(not r for r in refs):
        raise EmptyReference("CER/WER need at least one reference and no empty references")


def char_errors(refs: Sequence[str], hyps: Sequence[str]) -> Dict[str, int]:
    _check_pairs(refs, hyps)
    return {"errors": sum(edit_distance(r, h) for r, h in zip(refs, hyps)),
            "length": sum(len(r) for r in refs)}


def word_errors(refs: Sequence[str], hyps: Sequence[str]) -> Dict[str, int]:
    _check_pairs(refs, hyps)
    return {"errors": sum(edit_distance(r.split(), h.split()) for r, h in zip(refs, hyps)),
            "length": sum(len(r.split()) for r in refs)}


def cer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Corpus-level character error rate in percent: 100 * sum(ED) / sum(|ref|)."""
    c = char_errors(refs, hyps)
    return 100.0 * c["errors"] / c["length"]


def wer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    w = word_errors(refs, hyps)
    if w["length"] == 0:
        raise EmptyReference("WER references contain no words")
    return 100.0 * w["errors"] / w["length"]


# -----------------------
# Gap reduction
# -----------------------
@dataclass(frozen=True)
class GapReductionInput:
    err_synth: float
    err_adapted: float
    err_real: float


def gap_reduction(g: GapReductionInput) -> float:
    if g.err_synth == g.err_real:
        raise ZeroGap(f"synthetic and real error are both {g.err_synth}; the gap is zero")
    return 100.0 * (g.err_synth - g.err_adapted) / (g.err_synth - g.err_real)


def gap_reduction_table(rows: Dict[str, Dict[str, GapReductionInput]]) -> pd.DataFrame:
    """
    rows: dataset -> {"CER": GapReductionInput, "WER": GapReductionInput}.
    Returns one column pair per dataset with the three error rows plus gap reduction.
    """
    records = {}
    for dataset, metrics in rows.items():
        for metric, g in metrics.items():
            records[(dataset, metric)] = {
                "Real target only": g.err_real,
                "Synth. source only": g.err_synth,
                "Uns. adaptation": g.err_adapted,
                "Gap reduction (%)": round(gap_reduction(g), 2),
            }
    frame = pd.DataFrame(records)
    frame.columns = pd.MultiIndex.from_tuples(frame.columns)
    return frame


# -----------------------
# Reports
# -----------------------
@dataclass
class MetricsReport:
    cer: float
    wer: float
    n_items: int
    per_writer: Optional[Dict[str, Dict[str, float]]] = None
    unk_rate: float = 0.0
    predictions: List[Dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> Dict[str, Any]:
        out = {"cer": round(self.cer, 4), "wer": round(self.wer, 4), "n_items": self.n_items,
               "unk_rate": round(self.unk_rate, 6)}
        if self.per_writer is not None:
            out["per_writer"] = self.per_writer
        return out

    def per_writer_frame(self) -> pd.DataFrame:
        if not self.per_writer:
            return pd.DataFrame(columns=["writer_id", "n_words", "cer", "wer"])
        frame = pd.DataFrame.from_dict(self.per_writer, orient="index")
        frame.index.name = "writer_id"
        return frame.reset_index()[["writer_id", "n_words", "cer", "wer"]]

    def to_text(self) -> str:
        lines = [f"{'items':<10}{self.n_items:>10}", f"{'CER (%)':<10}{self.cer:>10.2f}",
                 f"{'WER (%)':<10}{self.wer:>10.2f}"]
        if self.per_writer:
            lines += ["", self.per_writer_frame().to_string(index=False, float_format=lambda v: f"{v:.2f}")]
        return "\n".join(lines)


def build_report(refs: List[str], hyps: List[str], writer_ids: Optional[List[Optional[str]]] = None,
                 item_ids: Optional[List[Optional[str]]] = None) -> MetricsReport:
    frame = pd.DataFrame({"ref": refs, "hyp": hyps,
                          "writer_id": writer_ids if writer_ids is not None else [None] * len(refs)})
    frame["char_err"] = [edit_distance(r, h) for r, h in zip(refs, hyps)]
    frame["char_len"] = frame["ref"].str.len()
    frame["word_err"] = [edit_distance(r.split(), h.split()) for r, h in zip(refs, hyps)]
    frame["word_len"] = [len(r.split()) for r in refs]
    report = MetricsReport(cer=cer(refs, hyps), wer=wer(refs, hyps), n_items=len(refs))

    if frame["writer_id"].notna().any():
        grouped = frame.dropna(subset=["writer_id"]).groupby("writer_id")[
            ["char_err", "char_len", "word_err", "word_len"]].sum()
        report.per_writer = {
            str(w): {"cer": 100.0 * row.char_err / row.char_len,
                     "wer": 100.0 * row.word_err / row.word_len,
                     "n_words": int(row.word_len),
                     "n_chars": int(row.char_len)}
            for w, row in grouped.iterrows()
        }
    ids = item_ids if item_ids is not None else [None] * len(refs)
    report.predictions = [{"item_id": i, "ref": r, "hyp": h} for i, r, h in zip(ids, refs, hyps)]
    return report


def compare_writers(synth: MetricsReport, adapted: MetricsReport) -> pd.DataFrame:
    """Per-writer CER before/after adaptation, ranked by Improv.% = 100 (synth - adapt) / synth."""
    if not synth.per_writer or not adapted.per_writer:
        raise ConfigError("writer comparison needs per-writer breakdowns in both reports")
    common = sorted(set(synth.per_writer) & set(adapted.per_writer))
    if not common:
        raise ConfigError("the two reports share no writer ids")
    frame = pd.DataFrame({
        "Writer ID": common,
        "Words": [synth.per_writer[w]["n_words"] for w in common],
        "Synth.": [synth.per_writer[w]["cer"] for w in common],
        "Adapt.": [adapted.per_writer[w]["cer"] for w in common],
    })
    synth_cer = frame["Synth."]
    frame["Improv.(%)"] = (100.0 * (synth_cer - frame["Adapt."]) / synth_cer.replace(0.0, np.nan)).fillna(0.0)
    frame = frame.sort_values("Improv.(%)", ascending=False, kind="mergesort").reset_index(drop=True)
    mean = {"Writer ID": "Mean", "Words": frame["Words"].mean(), "Synth.": frame["Synth."].mean(),
            "Adapt.": frame["Adapt."].mean(), "Improv.(%)": frame["Improv.(%)"].mean()}
    return pd.concat([frame, pd.DataFrame([mean])], ignore_index=True)


# -----------------------
# Model evaluation
# -----------------------
def recognizer_from_checkpoint(ckpt: Checkpoint) -> WordRecognizer:
    model = WordRecognizer(ckpt.charset, ckpt.config.model)
    load_module_state(model, ckpt.recognizer, "recognizer")
    model.to(ckpt.config.train.device)
    model.eval()
    return model


def transcribe(model: WordRecognizer, images: Sequence[WordImage], cs: Charset, t_max: int,
               batch_size: int) -> List[str]:
    return [decode_tokens(cs, seq) for seq in recognize(model, images, t_max, batch_size)]


def _check_charset(cs: Charset, manifest: DatasetManifest, max_unk_rate: float) -> float:
    unk, total = manifest.unk_stats(cs)
    rate = unk / total if total else 0.0
    if unk:
        logger.warning("%d of %d reference characters are outside the checkpoint charset", unk, total)
    if rate > max_unk_rate:
        raise IncompatibleCharset(f"{100 * rate:.1f}% of reference characters are outside the charset "
                                  f"(limit {100 * max_unk_rate:.1f}%)")
    return rate


def evaluate_images(model: WordRecognizer, cs: Charset, images: Sequence[WordImage],
                    cfg: Optional[EvalConfig] = None, t_max: int = 32) -> MetricsReport:
    """Greedy-decode labeled images and score them. Transcripts are read only for scoring."""
    cfg = cfg or EvalConfig()
    items = [images[i] for i in range(len(images))]
    hyps = transcribe(model, items, cs, t_max, cfg.batch_size)
    refs, kept_hyps, writers, ids = [], [], [], []
    for img, h in zip(items, hyps):
        r = img.transcript
        if r is None:
            raise ConfigError(f"item {img.item_id} has no transcript to score against")
        r = normalize_text(r, cfg.case_sensitive, cfg.strip_punctuation)
        if not r:
            logger.warning("Skipping item %s: empty reference after normalization", img.item_id)
            continue
        refs.append(r)
        kept_hyps.append(normalize_text(h, cfg.case_sensitive, cfg.strip_punctuation))
        writers.append(img.writer_id)
        ids.append(img.item_id)
    return build_report(refs, kept_hyps, writers, ids)


def evaluate(checkpoint: Union[str, Checkpoint], manifest: Union[str, DatasetManifest],
             split: Optional[Union[Split, str]] = Split.TEST, cfg: Optional[EvalConfig] = None) -> MetricsReport:
    ckpt = load_checkpoint(checkpoint, use_cache=True) if isinstance(checkpoint, str) else checkpoint
    cfg = cfg or ckpt.config.eval
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    subset = manifest.select(split)
    if len(subset) == 0:
        raise ConfigError(f"manifest has no records in split {split}")
    rate = _check_charset(ckpt.charset, subset, cfg.max_unk_rate)
    model = recognizer_from_checkpoint(ckpt)
    images = ManifestImages(subset, Domain.TARGET, ckpt.config.data.canonical_height)
    report = evaluate_images(model, ckpt.charset, images, cfg, ckpt.config.data.max_transcript_len)
    report.unk_rate = rate
    logger.info("Evaluated %d items: CER %.2f%%, WER %.2f%%", report.n_items, report.cer, report.wer)
    return report


def save_report(report: MetricsReport, out_dir: str, stem: str = "report") -> Dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": str(out / f"{stem}.json"), "text": str(out / f"{stem}.txt")}
    Path(paths["json"]).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True), encoding="utf-8")
    Path(paths["text"]).write_text(report.to_text() + "\n", encoding="utf-8")
    if report.predictions:
        paths["predictions"] = str(out / f"{stem}_predictions.tsv")
        pd.DataFrame(report.predictions).to_csv(paths["predictions"], sep="\t", index=False)
    return paths


# -----------------------
# Embedding export
# -----------------------
@torch.no_grad()
def export_embeddings(checkpoint: Union[str, Checkpoint], manifest: Union[str, DatasetManifest],
                      pooling_strategy: str, out_path: str, split: Optional[Union[Split, str]] = None,
                      batch_size: int = 32) -> str:
    """
    TSV with one row per item: item_id, domain, transcript, f0..f{k-1}.
    Pooling runs the encoder output through the chosen strategy; for the GRU
    strategy the trained discriminator pooling is used when the checkpoint has one.
    """
    ckpt = load_checkpoint(checkpoint, use_cache=True) if isinstance(checkpoint, str) else checkpoint
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    manifest = manifest.select(split)
    model = recognizer_from_checkpoint(ckpt)
    adv_cfg = ckpt.config.adversary.model_copy(update={"pooling": pooling_strategy})
    pool = TemporalPooling(pooling_strategy, adv_cfg, model.encoder.feature_dim, model.encoder.conv_channels)
    if pooling_strategy == "gru":
        trained = ckpt.discriminator if ckpt.config.adversary.pooling == "gru" else None
        if trained:
            pool.load_state_dict({k[len("pool."):]: v for k, v in trained.items() if k.startswith("pool.")})
        else:
            # untrained pooling is still a fixed function of the seed
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(ckpt.config.seed)
                pool.gru.reset_parameters()
    pool.to(model.device, model.dtype).eval()

    rows = []
    records = manifest.records
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images = [ManifestImages(DatasetManifest([r], manifest.root), r.domain or Domain.TARGET,
                                 ckpt.config.data.canonical_height)[0] for r in chunk]
        block, widths = pad_images(images)
        feats = pool(model.encode(block, widths)).cpu().numpy()
        for r, vec in zip(chunk, feats):
            rows.append([r.image_path, Domain(r.domain or Domain.TARGET).value, r.transcript or ""]
                        + [float(v) for v in vec])
    width = len(rows[0]) - 3 if rows else pool.out_dim
    frame = pd.DataFrame(rows, columns=["item_id", "domain", "transcript"] + [f"f{i}" for i in range(width)])
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_path, sep="\t", index=False, float_format="%.6g")
    logger.info("Exported %d embeddings of width %d to %s", len(frame), width, out_path)
    return out_path
