# test_evalkit.py
import random
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import torch

from config import load_run_config
from datakit import DatasetManifest, ManifestRecord, Split, load_manifest
from errors import EmptyReference, IncompatibleCharset, LengthMismatch, ZeroGap
from evalkit import (GapReductionInput, MetricsReport, build_report, cer, compare_writers, edit_distance,
                     evaluate, evaluate_images, export_embeddings, gap_reduction, gap_reduction_table,
                     normalize_text, save_report, wer)
from recognizer import WordRecognizer
from synthgen import Domain, WordImage
from trainer import train_loop

# (synthetic only, adapted, real target only) -> gap reduction
GAP_TABLE = {
    "GW": {"CER": ((26.05, 16.28, 4.56), 45.46), "WER": ((56.79, 39.95, 13.49), 38.89)},
    "IAM": {"CER": ((26.44, 14.05, 6.88), 63.34), "WER": ((54.56, 34.86, 17.45), 53.09)},
    "Rimes": {"CER": ((21.46, 14.39, 2.80), 37.89), "WER": ((52.48, 39.21, 8.51), 30.18)},
    "CVL": {"CER": ((26.30, 19.19, 3.64), 31.38), "WER": ((55.64, 44.29, 7.77), 23.71)},
    "Esposalles": {"CER": ((30.78, 20.96, 0.47), 32.40), "WER": ((66.33, 50.00, 1.68), 25.26)},
}


def _levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@pytest.mark.parametrize("dataset,metric", [(d, m) for d in GAP_TABLE for m in ("CER", "WER")])
def test_gap_reduction_values(dataset, metric):
    (synth, adapted, real), expected = GAP_TABLE[dataset][metric]
    assert gap_reduction(GapReductionInput(synth, adapted, real)) == pytest.approx(expected, abs=0.005)


def test_gap_reduction_zero_gap():
    with pytest.raises(ZeroGap):
        gap_reduction(GapReductionInput(10.0, 5.0, 10.0))


def test_gap_reduction_table_layout():
    rows = {d: {m: GapReductionInput(*v[0]) for m, v in metrics.items()} for d, metrics in GAP_TABLE.items()}
    frame = gap_reduction_table(rows)
    assert frame.loc["Gap reduction (%)", ("IAM", "CER")] == 63.34
    assert frame.loc["Real target only", ("GW", "WER")] == 13.49
    assert frame.shape == (4, 10)


def test_edit_distance_examples():
    assert edit_distance("kitten", "sitting") == 3
    assert edit_distance("", "abc") == 3
    assert edit_distance(["the", "cat"], ["the", "hat"]) == 1


def test_edit_distance_matches_dynamic_programming():
    rng = random.Random(0)
    for _ in range(1000):
        a = "".join(rng.choice("abcd") for _ in range(rng.randint(0, 12)))
        b = "".join(rng.choice("abcd") for _ in range(rng.randint(0, 12)))
        assert edit_distance(a, b) == _levenshtein(a, b)


def test_cer_wer_examples():
    assert cer(["abc"], ["abd"]) == pytest.approx(100 / 3)
    assert cer(["abc"], ["abc"]) == 0.0
    assert cer(["ab"], ["abcdef"]) == pytest.approx(200.0)
    assert wer(["the cat sat"], ["the cat"]) == pytest.approx(100 / 3)
    assert wer(["the cat sat"], ["the cat sat"]) == 0.0


def test_cer_aggregates_over_the_corpus():
    assert cer(["ab", "abcd"], ["ab", "abxd"]) == pytest.approx(16.67, abs=0.005)


def test_metric_input_errors():
    with pytest.raises(LengthMismatch):
        cer(["a", "b"], ["a"])
    with pytest.raises(EmptyReference):
        cer([], [])
    with pytest.raises(EmptyReference):
        cer(["a", ""], ["a", "b"])


def test_normalize_text():
    assert normalize_text("Hello, World!", case_sensitive=False, strip_punctuation=True) == "hello world"
    assert normalize_text("Hello,") == "Hello,"


def test_per_writer_breakdown_is_consistent():
    refs = ["abc", "de", "fgh", "ij"]
    hyps = ["abd", "de", "f", "ij"]
    report = build_report(refs, hyps, ["w1", "w1", "w2", "w2"], ["a", "b", "c", "d"])
    assert report.n_items == 4
    assert report.per_writer["w1"]["cer"] == pytest.approx(20.0)
    assert report.per_writer["w2"]["cer"] == pytest.approx(40.0)
    errors = sum(v["cer"] * v["n_chars"] / 100 for v in report.per_writer.values())
    chars = sum(v["n_chars"] for v in report.per_writer.values())
    assert 100 * errors / chars == pytest.approx(report.cer)
    assert report.predictions[2] == {"item_id": "c", "ref": "fgh", "hyp": "f"}


def test_compare_writers_ranks_by_improvement():
    synth = MetricsReport(0.0, 0.0, 0, per_writer={"ID202": {"cer": 13.65, "n_words": 396},
                                                   "ID521": {"cer": 21.68, "n_words": 48},
                                                   "ID300": {"cer": 10.0, "n_words": 10}})
    adapted = MetricsReport(0.0, 0.0, 0, per_writer={"ID202": {"cer": 3.96, "n_words": 396},
                                                     "ID521": {"cer": 7.39, "n_words": 48},
                                                     "ID300": {"cer": 12.0, "n_words": 10}})
    frame = compare_writers(synth, adapted)
    assert list(frame["Writer ID"]) == ["ID202", "ID521", "ID300", "Mean"]
    assert frame.loc[0, "Improv.(%)"] == pytest.approx(71.0, abs=0.05)
    assert frame.loc[1, "Improv.(%)"] == pytest.approx(65.9, abs=0.05)
    assert frame.loc[2, "Improv.(%)"] == pytest.approx(-20.0)
    assert frame.loc[0, "Words"] == 396


def test_report_text_and_files(tmp_path):
    report = build_report(["ab", "cd"], ["ab", "ce"], ["w1", "w2"])
    paths = save_report(report, str(tmp_path))
    assert "CER (%)" in open(paths["text"]).read()
    assert pd.read_csv(paths["predictions"], sep="\t").shape == (2, 3)


# -----------------------
# Checkpoint-driven evaluation
# -----------------------
@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_data):
    cfg = load_run_config(str(Path(__file__).parent / "config_tiny.json")).with_overrides({
        "paths.source_manifest": toy_data["source"], "paths.val_manifest": toy_data["val"],
        "paths.charset": toy_data["charset"], "paths.out_dir": str(tmp_path_factory.mktemp("trained")),
    })
    return train_loop(cfg).last_checkpoint


def test_evaluate_checkpoint(trained, toy_data):
    report = evaluate(trained, toy_data["val"], split=Split.VAL)
    assert report.n_items == 8
    assert set(report.per_writer) == {"w1"}
    assert report.cer >= 0 and report.wer >= 0
    assert report.unk_rate == 0.0


def test_evaluate_rejects_foreign_charset(trained, toy_data):
    val = load_manifest(toy_data["val"])
    foreign = DatasetManifest([ManifestRecord(r.image_path, "ZZZ", r.writer_id, r.split) for r in val.records],
                              val.root)
    with pytest.raises(IncompatibleCharset):
        evaluate(trained, foreign, split=None)


@pytest.mark.parametrize("strategy,width", [("cmv", 8), ("tpp", 56), ("gru", 8), ("spp", 8 * 21)])
def test_export_embeddings(trained, toy_data, tmp_path, strategy, width):
    out = export_embeddings(trained, toy_data["val"], strategy, str(tmp_path / "emb.tsv"))
    frame = pd.read_csv(out, sep="\t")
    assert len(frame) == 8
    assert list(frame.columns[:3]) == ["item_id", "domain", "transcript"]
    assert frame.shape[1] == 3 + width
    assert set(frame["domain"]) == {"target"}
    again = pd.read_csv(export_embeddings(trained, toy_data["val"], strategy, str(tmp_path / "again.tsv")),
                        sep="\t")
    pd.testing.assert_frame_equal(frame, again)


class _CountingImages:
    def __init__(self, images):
        self.images = images
        self.reads = 0

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        self.reads += 1
        return self.images[index]


def test_evaluate_images_decodes_each_item_once(tiny_cfg, charset):
    torch.manual_seed(0)
    model = WordRecognizer(charset, tiny_cfg.model)
    rng = np.random.default_rng(0)
    words = [WordImage(rng.random((32, 40)).astype(np.float32), w, Domain.TARGET, "w1", f"item{k}")
             for k, w in enumerate(("cab", "bad", "face"))]
    images = _CountingImages(words)
    report = evaluate_images(model, charset, images, t_max=4)
    assert images.reads == 3
    assert report.n_items == 3
    assert [p["item_id"] for p in report.predictions] == ["item0", "item1", "item2"]
