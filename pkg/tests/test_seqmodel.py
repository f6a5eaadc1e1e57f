import math

import numpy as np
import pytest
import torch

from gensar.errors import ConfigError
from gensar.numerics import NumericalError
from gensar.seqmodel import (
    Example,
    Seq2Seq,
    SeqModelConfig,
    Specials,
    evaluate_nll,
    forward,
    load_model,
    make_batch,
    nll_loss,
    save_model,
    train_model,
)
from helpers import scalar_seq2seq_logits

SPECIALS = Specials(pad=0, bos=1, eos=2)


def tiny(vocab=12, **kw):
    base = dict(vocab_size=vocab, dim=8, encoder_layers=1, decoder_layers=1, heads=2, ffn_dim=16, dropout=0.0, max_source_len=16, max_target_len=8, identifier_length=4)
    base.update(kw)
    return SeqModelConfig(**base)


def random_pairs(rng, n, vocab, src_len=(3, 9), tgt_len=(2, 6)):
    return [
        (list(rng.integers(3, vocab, size=int(rng.integers(*src_len)))), list(rng.integers(3, vocab, size=int(rng.integers(*tgt_len)))))
        for _ in range(n)
    ]


def test_config_invariants():
    with pytest.raises(ConfigError):
        SeqModelConfig(vocab_size=10, dim=10, heads=4)
    with pytest.raises(ConfigError):
        SeqModelConfig(vocab_size=10, max_target_len=5, identifier_length=4)


def test_zero_weights_give_uniform_logits():
    torch.manual_seed(0)
    model = Seq2Seq(tiny())
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    batch = make_batch(random_pairs(np.random.default_rng(0), 3, 12), SPECIALS)
    logits = forward(model, batch)
    assert logits.shape == (3, batch.tgt_in.shape[1], 12)
    assert torch.all(logits == logits[..., :1])


def test_decoder_is_causal():
    torch.manual_seed(1)
    model = Seq2Seq(tiny()).eval()
    batch = make_batch([([3, 4, 5, 6], [7, 8, 9, 10, 11])], SPECIALS)
    base = forward(model, batch)
    for t in range(batch.tgt_in.shape[1]):
        changed = batch.tgt_in.clone()
        changed[0, t] = 3 if changed[0, t] != 3 else 4
        logits = model(batch.src, batch.src_mask, changed)
        torch.testing.assert_close(logits[:, :t], base[:, :t], rtol=0, atol=0)
        if t < batch.tgt_in.shape[1] - 1:
            assert not torch.allclose(logits[:, t:], base[:, t:])


def test_source_padding_is_invisible():
    torch.manual_seed(2)
    model = Seq2Seq(tiny()).eval()
    short = make_batch([([3, 4, 5], [6, 7])], SPECIALS)
    padded = make_batch([([3, 4, 5], [6, 7]), ([3] * 9, [6, 7])], SPECIALS)
    torch.testing.assert_close(forward(model, short), forward(model, padded)[:1], rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_scalar_reimplementation(seed):
    torch.manual_seed(seed)
    cfg = tiny(vocab=2, dim=2, heads=1, ffn_dim=3)
    model = Seq2Seq(cfg).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.uniform_(-1.0, 1.0)
    src, tgt_in = [1, 0, 1, 1], [0, 1, 1, 0, 1]
    keep = [True, True, True, False]
    logits = model(torch.tensor([src]), torch.tensor([keep]), torch.tensor([tgt_in]))[0]
    state = {k: v.double().numpy() for k, v in model.state_dict().items()}
    expected = torch.tensor(scalar_seq2seq_logits(state, cfg, src, keep, tgt_in), dtype=torch.float32)
    torch.testing.assert_close(logits, expected, rtol=0, atol=1e-5)


def test_forward_matches_scalar_reimplementation_multihead():
    torch.manual_seed(7)
    cfg = tiny(vocab=9, dim=4, heads=2, ffn_dim=6, encoder_layers=2, decoder_layers=2)
    model = Seq2Seq(cfg).eval()
    src, tgt_in = [3, 5, 8, 2, 4], [1, 6, 7]
    keep = [True] * 5
    logits = model(torch.tensor([src]), torch.tensor([keep]), torch.tensor([tgt_in]))[0]
    state = {k: v.double().numpy() for k, v in model.state_dict().items()}
    expected = torch.tensor(scalar_seq2seq_logits(state, cfg, src, keep, tgt_in), dtype=torch.float32)
    torch.testing.assert_close(logits, expected, rtol=0, atol=1e-5)


def test_length_overflow_and_bad_ids_raise():
    model = Seq2Seq(tiny())
    with pytest.raises(ValueError):
        forward(model, make_batch([([3] * 17, [4])], SPECIALS))
    with pytest.raises(ValueError):
        forward(model, make_batch([([3], [4] * 8)], SPECIALS))
    with pytest.raises(ValueError):
        forward(model, make_batch([([3, 12], [4])], SPECIALS))


def test_perfect_logits_give_near_zero_loss():
    targets = torch.tensor([[3, 1, 4, 0]])
    mask = torch.tensor([[True, True, True, False]])
    logits = torch.zeros(1, 4, 6)
    logits.scatter_(-1, targets.unsqueeze(-1), 20.0)
    assert float(nll_loss(logits, targets, mask)) < 1e-6


@pytest.mark.parametrize("vocab", [2, 7, 50])
def test_uniform_logits_give_log_vocab(vocab):
    targets = torch.randint(0, vocab, (3, 5))
    mask = torch.ones(3, 5, dtype=torch.bool)
    mask[0, 3:] = False
    assert float(nll_loss(torch.zeros(3, 5, vocab), targets, mask)) == pytest.approx(math.log(vocab), rel=1e-6)


def test_loss_matches_direct_recomputation():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((4, 6, 9)) * 3
    targets = rng.integers(0, 9, size=(4, 6))
    mask = rng.random((4, 6)) < 0.7
    mask[0, 0] = True
    total, n = 0.0, 0
    for b in range(4):
        for t in range(6):
            if mask[b, t]:
                row = logits[b, t]
                total -= row[targets[b, t]] - math.log(sum(math.exp(v) for v in row))
                n += 1
    got = nll_loss(torch.tensor(logits), torch.tensor(targets), torch.tensor(mask))
    assert float(got) == pytest.approx(total / n, rel=1e-10)


def test_loss_rejects_all_padding_and_bad_shapes():
    with pytest.raises(ValueError):
        nll_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.long), torch.zeros(1, 2, dtype=torch.bool))
    with pytest.raises(ValueError):
        nll_loss(torch.zeros(1, 3, 3), torch.zeros(1, 2, dtype=torch.long), torch.ones(1, 2, dtype=torch.bool))


def test_batch_teacher_forcing_layout():
    batch = make_batch([([5, 6, 7], [8, 9]), ([5], [10, 11, 3])], SPECIALS)
    assert batch.tgt_in.tolist() == [[1, 8, 9, 0], [1, 10, 11, 3]]
    assert batch.tgt_out.tolist() == [[8, 9, 2, 0], [10, 11, 3, 2]]
    assert batch.tgt_mask.tolist() == [[True, True, True, False], [True] * 4]
    assert batch.src_mask.tolist() == [[True] * 3, [True, False, False]]
    assert batch.src_mask.dtype == torch.bool and batch.src_mask.shape == batch.src.shape


def test_loss_is_sum_over_ground_truth_prefixes():
    """Feeding each reference prefix on its own reproduces the teacher-forced
    loss, so no model sample ever enters the conditioning."""
    torch.manual_seed(3)
    model = Seq2Seq(tiny()).eval()
    batch = make_batch([([3, 4, 5], [6, 7, 8])], SPECIALS)
    total = 0.0
    with torch.no_grad():
        full = nll_loss(forward(model, batch), batch.tgt_out, batch.tgt_mask)
        for t in range(batch.tgt_in.shape[1]):
            logits = model(batch.src, batch.src_mask, batch.tgt_in[:, : t + 1])[0, -1]
            total -= float(logits.log_softmax(-1)[batch.tgt_out[0, t]])
    assert float(full) == pytest.approx(total / batch.tgt_in.shape[1], rel=1e-5)


def test_gradient_matches_finite_differences_on_micro_model():
    torch.manual_seed(5)
    cfg = tiny(vocab=10, dim=8, heads=2, ffn_dim=8)
    model = Seq2Seq(cfg).double().eval()
    batch = make_batch(random_pairs(np.random.default_rng(5), 3, 10), SPECIALS)

    def loss():
        return nll_loss(forward(model, batch), batch.tgt_out, batch.tgt_mask)

    model.zero_grad()
    loss().backward()
    h = 1e-6
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                keep = flat[i].item()
                flat[i] = keep + h
                up = loss().item()
                flat[i] = keep - h
                down = loss().item()
                flat[i] = keep
                nflat[i] = (up - down) / (2 * h)
            analytic = p.grad
            scale = max(analytic.norm().item(), numeric.norm().item(), 1e-8)
            if scale > 1e-7:
                worst = max(worst, (analytic - numeric).norm().item() / scale)
    assert worst < 1e-3


def test_loss_is_invariant_to_order_within_batch():
    torch.manual_seed(6)
    model = Seq2Seq(tiny()).eval()
    pairs = random_pairs(np.random.default_rng(6), 8, 12)
    a = make_batch(pairs, SPECIALS)
    b = make_batch(pairs[::-1], SPECIALS)
    la = nll_loss(forward(model, a), a.tgt_out, a.tgt_mask)
    lb = nll_loss(forward(model, b), b.tgt_out, b.tgt_mask)
    assert la.item() == pytest.approx(lb.item(), rel=1e-6)


def memorization_examples():
    rng = np.random.default_rng(0)
    return [Example("nrip", s, t) for s, t in random_pairs(rng, 32, 40, (5, 12), (5, 6))]


def test_memorizes_a_small_fixed_set():
    cfg = SeqModelConfig(vocab_size=40, epochs=200, batch_size=32, dropout=0.0)
    result = train_model(cfg, memorization_examples(), SPECIALS)
    assert len(result.curve) == 200
    assert result.curve[-1]["train_nll"] < 0.05


def test_training_is_seed_deterministic(tmp_path):
    cfg = tiny(vocab=40, epochs=3, batch_size=8, dropout=0.1)
    ex = memorization_examples()
    a = train_model(cfg, ex, SPECIALS, valid=ex[:4], checkpoint=tmp_path / "a.gsnm", log_path=tmp_path / "a.csv")
    b = train_model(cfg, ex, SPECIALS, valid=ex[:4], checkpoint=tmp_path / "b.gsnm")
    assert [(r["train_nll"], r["valid_nll"]) for r in a.curve] == [(r["train_nll"], r["valid_nll"]) for r in b.curve]
    assert (tmp_path / "a.gsnm").read_bytes() == (tmp_path / "b.gsnm").read_bytes()
    header, *rows = (tmp_path / "a.csv").read_text().splitlines()
    assert header == "epoch,train_nll,valid_nll,wall_seconds" and len(rows) == 3


def test_alignment_groups_are_subsampled_per_epoch():
    ex = [Example("desc2id", [3, 4], [5], group=g) for g in range(4) for _ in range(2)]
    ex += [Example("nrip", [6], [7])]
    cfg = tiny(vocab=10, epochs=1, batch_size=2, alignment_per_item=1)
    from gensar.seqmodel import _epoch_examples

    drawn = _epoch_examples(ex, cfg.alignment_per_item, np.random.default_rng(0))
    assert len(drawn) == 5
    assert sorted(e.group for e in drawn if e.group is not None) == [0, 1, 2, 3]


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(8)
    model = Seq2Seq(tiny()).eval()
    save_model(tmp_path / "m.gsnm", model)
    back = load_model(tmp_path / "m.gsnm")
    assert back.cfg == model.cfg
    batch = make_batch(random_pairs(np.random.default_rng(8), 4, 12), SPECIALS)
    torch.testing.assert_close(forward(back, batch), forward(model, batch), rtol=0, atol=0)
    ex = [Example("nrip", s, t) for s, t in random_pairs(np.random.default_rng(9), 5, 12)]
    assert evaluate_nll(back, ex, SPECIALS) == evaluate_nll(model, ex, SPECIALS)


def test_divergence_aborts_with_last_good_checkpoint(tmp_path):
    cfg = tiny(vocab=40, epochs=3, batch_size=8, lr=1e30)
    with pytest.raises(NumericalError):
        train_model(cfg, memorization_examples(), SPECIALS, checkpoint=tmp_path / "m.gsnm")
    back = load_model(tmp_path / "m.gsnm")
    assert all(torch.isfinite(p).all() for p in back.parameters())


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_model(tiny(), [], SPECIALS)
