# test_recognizer.py
import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

import htr_constants as C
from config import ModelConfig
from datakit import Charset, TokenSeq, encode_transcript, pad_images
from errors import WidthTooSmall
from recognizer import (FeatureSequence, WordRecognizer, attention_scores, batch_norm_groups, build_backbone,
                        decode_step, encode, feature_length, forward_teacher_forced, recognize, uniform_alpha)
from synthgen import WordImage

CS = Charset("abcdef")


def _word(width, seed=0, text="cab"):
    pixels = np.random.default_rng(seed).random((32, width)).astype(np.float32)
    return WordImage(pixels, text)


@pytest.fixture
def model(tiny_cfg):
    torch.manual_seed(0)
    m = WordRecognizer(CS, tiny_cfg.model)
    m.eval()
    return m


def _bias_towards(model, token_id):
    with torch.no_grad():
        model.decoder.out.weight.zero_()
        model.decoder.out.bias.fill_(-5.0)
        model.decoder.out.bias[token_id] = 5.0


def test_feature_length():
    assert feature_length(256) == 16
    assert feature_length(16) == 1
    assert feature_length(17) == 2
    assert feature_length(1) == 1
    with pytest.raises(WidthTooSmall):
        feature_length(0)


def test_encoder_lengths_follow_width(model):
    H = encode(model, [_word(256), _word(16, 1), _word(40, 2)])
    assert H.lengths.tolist() == [16, 1, 3]
    assert H.values.shape == (3, 16, model.encoder.feature_dim)
    assert torch.all(H.values[1, 1:] == 0)
    assert H.item(2).shape == (model.encoder.feature_dim, 3)
    assert H.conv_maps[0].shape[-1] == 16


def test_vgg_backbone_downsamples_by_16():
    backbone, channels = build_backbone(ModelConfig(backbone="vgg19bn"))
    backbone.eval()
    with torch.no_grad():
        out = backbone(torch.zeros(1, 1, 32, 64))
    assert channels == 512
    assert out.shape == (1, 512, 2, 4)


def test_encoding_is_padding_invariant(model):
    short, wide = _word(40, 3), _word(200, 4)
    alone = encode(model, short)
    together = encode(model, [short, wide])
    n = int(alone.lengths[0])
    assert int(together.lengths[0]) == n
    assert torch.allclose(alone.values[0, :n], together.values[0, :n], atol=1e-6)


def test_grouped_batch_norm_matches_a_single_pass():
    torch.manual_seed(0)
    x = torch.randn(3, 4, 2, 5)
    grouped, plain = nn.BatchNorm2d(4), nn.BatchNorm2d(4)
    (out,) = batch_norm_groups(grouped, [x])
    assert torch.allclose(out, plain(x), atol=1e-6)
    assert torch.allclose(grouped.running_mean, plain.running_mean, atol=1e-6)
    assert torch.allclose(grouped.running_var, plain.running_var, atol=1e-6)
    assert int(grouped.num_batches_tracked) == 1


def test_grouped_batch_norm_pools_statistics():
    torch.manual_seed(0)
    x, y = torch.randn(3, 4, 2, 5), torch.randn(2, 4, 2, 7) + 1.0
    bn = nn.BatchNorm2d(4)
    parts = batch_norm_groups(bn, [x, y])
    flat = torch.cat([x.transpose(0, 1).reshape(4, -1), y.transpose(0, 1).reshape(4, -1)], dim=1)
    mean, var = flat.mean(dim=1), flat.var(dim=1, unbiased=False)
    expected = (y - mean.view(1, -1, 1, 1)) / torch.sqrt(var.view(1, -1, 1, 1) + bn.eps)
    assert parts[0].shape == x.shape and parts[1].shape == y.shape
    assert torch.allclose(parts[1], expected, atol=1e-5)
    assert torch.allclose(bn.running_mean, 0.1 * mean, atol=1e-6)
    assert int(bn.num_batches_tracked) == 1


def test_train_mode_encoder_updates_running_stats_once_per_batch(model):
    model.train()
    images = [_word(40, 1), _word(40, 2), _word(100, 3)]
    block, widths = pad_images(images)
    model.encode(block, widths)
    conv, bn = model.encoder.backbone[0], model.encoder.backbone[1]
    assert int(bn.num_batches_tracked) == 1
    ink = model.to_ink(block)
    with torch.no_grad():
        outs = []
        for w, idx in ((40, [0, 1]), (100, [2])):
            padded = feature_length(w) * C.DOWNSAMPLE_FACTOR
            x = F.pad(ink[idx, :, :w], (0, padded - w)).unsqueeze(1)
            outs.append(conv(x).transpose(0, 1).reshape(conv.out_channels, -1))
        mean = torch.cat(outs, dim=1).mean(dim=1)
    assert torch.allclose(bn.running_mean, 0.1 * mean, atol=1e-5)


def test_attention_is_a_distribution_over_valid_positions(model):
    H = encode(model, [_word(16), _word(64, 1), _word(100, 2)])
    state = model.decoder.init_state(H)
    alpha = attention_scores(model.decoder.attention, H, state.s[-1], state.alpha)
    assert torch.allclose(alpha.sum(dim=1), torch.ones(3), atol=1e-6)
    assert torch.all(alpha >= 0)
    assert torch.all(alpha[0, 1:] == 0)
    assert torch.all(alpha[1, 4:] == 0)
    assert alpha[0, 0] == 1.0


def test_attention_normalized_for_random_inputs(model):
    att = model.decoder.attention
    g = torch.Generator().manual_seed(0)
    d = model.encoder.feature_dim
    for _ in range(100):
        lengths = torch.randint(1, 12, (3,), generator=g)
        n_max = int(lengths.max())
        mask = torch.arange(n_max).unsqueeze(0) < lengths.unsqueeze(1)
        values = torch.randn(3, n_max, d, generator=g) * mask.unsqueeze(-1)
        H = FeatureSequence(values, lengths, [])
        s_prev = torch.randn(3, model.cfg.decoder_hidden, generator=g)
        alpha_prev = torch.rand(3, n_max, generator=g) * mask
        alpha = attention_scores(att, H, s_prev, alpha_prev)
        assert torch.allclose(alpha.sum(dim=1), torch.ones(3), atol=1e-6)
        assert torch.all(alpha >= 0)
        assert torch.all(alpha[~mask] == 0)


def test_attention_over_greedy_decoding(model):
    images = [_word(16 + 24 * i, i) for i in range(6)]
    H = encode(model, images)
    state = model.decoder.init_state(H)
    mask = H.mask()
    prev = CS.end_id
    for _ in range(6):
        logits, state = decode_step(model.decoder, state, H, prev)
        assert torch.allclose(state.alpha.sum(dim=1), torch.ones(len(images)), atol=1e-6)
        assert torch.all(state.alpha[~mask] == 0)
        prev = logits.argmax(dim=-1)


def test_zero_energies_give_uniform_attention(model):
    with torch.no_grad():
        model.decoder.attention.w.weight.zero_()
    H = encode(model, [_word(64), _word(160, 1)])
    state = model.decoder.init_state(H)
    alpha = attention_scores(model.decoder.attention, H, state.s[-1], state.alpha)
    assert torch.allclose(alpha, uniform_alpha(H))
    assert torch.allclose(alpha[0, :4], torch.full((4,), 0.25))


def test_decode_step_shapes(model):
    H = encode(model, [_word(48), _word(80, 1)])
    state = model.decoder.init_state(H)
    logits, nxt = decode_step(model.decoder, state, H, CS.end_id)
    assert logits.shape == (2, len(CS))
    assert nxt.step == 1
    assert nxt.alpha.shape == (2, H.n_max)


def test_greedy_stops_at_end(model):
    _bias_towards(model, CS.end_id)
    out = model.decode_greedy(encode(model, [_word(48), _word(96, 1)]), 5)
    assert out == [TokenSeq((CS.end_id,)), TokenSeq((CS.end_id,))]


def test_greedy_truncates_and_appends_end(model):
    _bias_towards(model, 0)
    (seq,) = model.decode_greedy(encode(model, _word(48)), 3)
    assert seq.ids == (0, 0, 0, CS.end_id)
    seq.check(CS)


def test_greedy_never_emits_pad(model):
    with torch.no_grad():
        model.decoder.out.weight.zero_()
        model.decoder.out.bias.fill_(-5.0)
        model.decoder.out.bias[CS.pad_id] = 10.0
        model.decoder.out.bias[CS.end_id] = 5.0
    (seq,) = model.decode_greedy(encode(model, _word(48)), 4)
    assert seq.ids == (CS.end_id,)
    with pytest.raises(ValueError):
        model.decode_greedy(encode(model, _word(48)), 0)


def test_recognize_returns_valid_sequences(model):
    images = [_word(16 + 8 * i, i) for i in range(5)]
    out = recognize(model, images, t_max=4, batch_size=2)
    assert len(out) == 5
    for seq in out:
        seq.check(CS)
        assert len(seq) <= 5


def test_teacher_forced_rows(model):
    logits = forward_teacher_forced(model, _word(64), encode_transcript(CS, "cab"))
    assert logits.shape == (1, 4, len(CS))
    batch = forward_teacher_forced(model, [_word(64), _word(32, 1)],
                                   [encode_transcript(CS, "cab"), encode_transcript(CS, "a")])
    assert batch.shape == (2, 4, len(CS))


def test_teacher_forced_matches_stepwise_decoding(model):
    img = _word(64)
    target = encode_transcript(CS, "bed")
    logits = forward_teacher_forced(model, img, target)
    H = encode(model, img)
    state = model.decoder.init_state(H)
    prev = CS.end_id
    for k, tok in enumerate(target.ids):
        step_logits, state = decode_step(model.decoder, state, H, prev)
        assert torch.allclose(step_logits[0], logits[0, k], atol=1e-6)
        prev = tok


def test_gradients_match_finite_differences(tiny_cfg):
    torch.manual_seed(1)
    model = WordRecognizer(CS, tiny_cfg.model).double()
    model.eval()
    block, widths = pad_images([_word(48, 5), _word(32, 6)])
    targets = torch.tensor([list(encode_transcript(CS, "cab").ids),
                            list(encode_transcript(CS, "fe").ids) + [CS.pad_id]])

    def loss():
        H = model.encode(block, widths)
        logits = model.forward_teacher_forced(H, targets)
        return torch.nn.functional.cross_entropy(logits.reshape(-1, len(CS)), targets.reshape(-1),
                                                 ignore_index=CS.pad_id)

    model.zero_grad()
    loss().backward()
    picks = [(model.decoder.out.bias, (0,)), (model.decoder.attention.b, (1,)),
             (model.decoder.attention.F.weight, (0, 0, 1)), (model.encoder.rnn.weight_ih_l0, (2, 3)),
             (model.decoder.embedding.weight, (CS.end_id, 0))]
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(11)
    for k in rng.integers(len(params), size=24):
        param = params[k]
        flat = int(rng.integers(param.numel()))
        picks.append((param, tuple(int(i) for i in np.unravel_index(flat, param.shape))))
    eps = 1e-6
    for param, idx in picks:
        analytic = 0.0 if param.grad is None else param.grad[idx].item()
        with torch.no_grad():
            param[idx] += eps
            up = loss().item()
            param[idx] -= 2 * eps
            down = loss().item()
            param[idx] += eps
        numeric = (up - down) / (2 * eps)
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-6), (param.shape, idx)
