# test_datakit.py
import json

import numpy as np
import pytest
from PIL import Image

from config import AugmentConfig
from datakit import (LABEL_AUDIT, Charset, DatasetManifest, DomainBatcher, LabeledBatcher,
                     ManifestImages, ManifestRecord, Split, TokenSeq, build_charset, collate,
                     decode_tokens, encode_transcript, load_charset, load_manifest, make_batches,
                     pad_images, preprocess, save_charset, save_manifest)
from errors import ConfigError, DecodeError, ExhaustedStream
from synthgen import Corpus, Domain, WordImage


def _img(width, domain=Domain.SOURCE, transcript="ab", value=1.0):
    return WordImage(np.full((32, width), value, dtype=np.float32), transcript=transcript, domain=domain)


def test_build_charset_orders_by_codepoint():
    cs = build_charset([Corpus(["ba", "ca"]), Corpus(["éa"])], extra_symbols=["-"])
    assert cs.symbols == ["-", "a", "b", "c", "é"]
    assert cs.specials == {"END": 5, "PAD": 6, "UNK": 7}
    assert len(cs) == 8
    with pytest.raises(ValueError):
        build_charset([])


def test_encode_decode():
    cs = Charset("abc")
    seq = encode_transcript(cs, "cab")
    assert seq.ids == (2, 0, 1, cs.end_id)
    seq.check(cs)
    assert decode_tokens(cs, seq) == "cab"
    assert decode_tokens(cs, [0, cs.pad_id, 1, cs.end_id, 2]) == "ab"


def test_encode_unknown_maps_to_unk_and_counts():
    cs = Charset("ab")
    seq = encode_transcript(cs, "abz")
    assert seq.ids == (0, 1, cs.unk_id, cs.end_id)
    assert cs.unk_count == 1
    with pytest.raises(ValueError):
        encode_transcript(cs, "")


def test_token_seq_check():
    cs = Charset("ab")
    with pytest.raises(ValueError):
        TokenSeq((0, 1)).check(cs)
    with pytest.raises(ValueError):
        TokenSeq((0, cs.pad_id, cs.end_id)).check(cs)


def test_charset_persistence(tmp_path):
    cs = Charset("xyz")
    path = tmp_path / "charset.json"
    save_charset(cs, str(path))
    loaded = load_charset(str(path))
    assert loaded == cs
    assert loaded.fingerprint() == cs.fingerprint()
    assert Charset("xy").fingerprint() != cs.fingerprint()
    data = json.loads(path.read_text(encoding="utf-8"))
    data["format_version"] = 99
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_charset(str(path))


def test_preprocess_keeps_aspect_ratio(tmp_path):
    arr = np.full((100, 300, 3), 255, dtype=np.uint8)
    arr[40:60, 50:250] = 0
    path = tmp_path / "word.png"
    Image.fromarray(arr).save(path)
    img = preprocess(str(path), 50, transcript="x", writer_id="w9")
    assert (img.height, img.width) == (50, 150)
    assert img.pixels.max() <= 1.0 and img.pixels.min() >= 0.0
    assert img.domain is Domain.TARGET and img.writer_id == "w9"


def test_preprocess_decode_error(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DecodeError):
        preprocess(str(bad), 32)


def test_manifest_roundtrip_and_queries(tmp_path):
    Image.fromarray(np.full((20, 40), 255, dtype=np.uint8)).save(tmp_path / "a.png")
    records = [ManifestRecord("a.png", "ab", "w1", Split.TRAIN),
               ManifestRecord("a.png", "ba", "w2", Split.TEST),
               ManifestRecord("a.png", "zz", "w1", Split.TEST)]
    save_manifest(DatasetManifest(records), str(tmp_path / "m.jsonl"))
    m = load_manifest(str(tmp_path / "m.jsonl"))
    assert len(m) == 3
    assert len(m.select(Split.TEST)) == 2
    assert len(m.for_writer("w1")) == 2
    assert m.unk_stats(Charset("ab")) == (2, 6)
    assert list(m.to_frame()["writer_id"]) == ["w1", "w2", "w1"]
    images = ManifestImages(m, Domain.TARGET, 32)
    assert images[0].height == 32 and images[0].domain is Domain.TARGET


def test_manifest_missing_paths(tmp_path):
    save_manifest(DatasetManifest([ManifestRecord("nope.png", "a")]), str(tmp_path / "m.jsonl"))
    with pytest.raises(ConfigError):
        load_manifest(str(tmp_path / "m.jsonl"))
    assert len(load_manifest(str(tmp_path / "m.jsonl"), check_paths=False)) == 1


def test_subset_is_deterministic():
    m = DatasetManifest([ManifestRecord(f"{i}.png", "a") for i in range(50)])
    a = [r.image_path for r in m.subset(10, 3).records]
    b = [r.image_path for r in m.subset(10, 3).records]
    assert a == b and len(a) == 10


def test_pad_images_uses_background():
    block, widths = pad_images([_img(10, value=0.0), _img(20, value=0.0)])
    assert block.shape == (2, 32, 20)
    assert list(widths) == [10, 20]
    assert np.all(block[0, :, 10:] == 1.0)
    assert np.all(block[0, :, :10] == 0.0)


def test_collate_does_not_read_target_labels():
    cs = Charset("ab")
    items = [_img(16), _img(24, Domain.TARGET, "ba"), _img(8, transcript="a")]
    before = LABEL_AUDIT.reads
    with LABEL_AUDIT.watching():
        batch = collate(items, cs)
    assert LABEL_AUDIT.reads == before
    assert list(batch.domain_labels) == [1.0, 0.0, 1.0]
    assert list(batch.labeled) == [True, False, True]
    assert batch.token_targets.shape == (3, 3)
    assert list(batch.token_targets[1]) == [cs.pad_id] * 3
    assert list(batch.token_targets[2]) == [0, cs.end_id, cs.pad_id]
    assert batch.is_mixed


def test_domain_batcher_balance_and_shuffling():
    cs = Charset("ab")
    source = [_img(16 + i) for i in range(10)]
    target = [_img(16 + i, Domain.TARGET, None) for i in range(4)]
    batcher = DomainBatcher(source, target, cs, batch_size=4, rng_seed=5)
    for epoch in range(2):
        batches = list(batcher.batches(epoch))
        n_source = sum(b.n_source for b in batches)
        n_target = sum(b.n_target for b in batches)
        assert abs(n_source - n_target) <= 4
        assert all(b.size >= 2 for b in batches)
    e0 = [tuple(b.widths) for b in batcher.batches(0)]
    e0_again = [tuple(b.widths) for b in batcher.batches(0)]
    e1 = [tuple(b.widths) for b in batcher.batches(1)]
    assert e0 == e0_again
    assert e0 != e1


def test_domain_batcher_resume_skips_batches():
    cs = Charset("ab")
    source = [_img(16 + i) for i in range(9)]
    target = [_img(16 + i, Domain.TARGET, None) for i in range(9)]
    batcher = DomainBatcher(source, target, cs, 4, 1)
    full = [tuple(b.widths) for b in batcher.batches(0)]
    tail = [tuple(b.widths) for b in batcher.batches(0, start=2)]
    assert tail == full[2:]


def test_trailing_singleton_is_merged():
    cs = Charset("ab")
    batcher = LabeledBatcher([_img(16 + i) for i in range(9)], cs, 4, 0)
    sizes = [b.size for b in batcher.batches(0)]
    assert sizes == [4, 5]
    assert len(batcher) == 2


def test_make_batches_errors():
    cs = Charset("ab")
    with pytest.raises(ExhaustedStream):
        list(make_batches([_img(16)], [], 4, 0, cs))
    with pytest.raises(ValueError):
        list(make_batches([_img(16)], [_img(16, Domain.TARGET, None)], 1, 0, cs))


def test_online_augment_is_seeded():
    cs = Charset("ab")
    source = [WordImage(np.random.default_rng(i).random((32, 40)).astype(np.float32), "ab") for i in range(4)]
    target = [_img(40, Domain.TARGET, None) for _ in range(4)]
    batcher = DomainBatcher(source, target, cs, 4, 2, AugmentConfig.light())
    a = [b.images for b in batcher.batches(0)]
    b = [b.images for b in batcher.batches(0)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
