"""Small pre-norm transformer encoder-decoder trained with next-token
prediction over instruction/response pairs."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .numerics import NumericalError, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

NEG_INF = -1e9


@dataclass
class SeqModelConfig:
    vocab_size: int
    dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_source_len: int = 128
    max_target_len: int = 16
    dropout: float = 0.1
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    alignment_per_item: int = 1  # alignment examples drawn per item per epoch
    identifier_length: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"model dim {self.dim} is not divisible by {self.heads} heads")
        if self.max_target_len < self.identifier_length + 2:
            raise ConfigError("max_target_len must fit behavior token + identifier + end token")
        if self.vocab_size < 2 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("vocab_size >= 2, epochs >= 0 and batch_size >= 1 required")


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``mask`` is boolean, broadcastable to (batch, query, key); True keeps."""
        b, t, d = x.shape
        s = memory.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(b, t, h, dh).transpose(1, 2)
        k = self.k(memory).view(b, s, h, dh).transpose(1, 2)
        v = self.v(memory).view(b, s, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        scores = scores.masked_fill(~mask.unsqueeze(1), NEG_INF)
        attn = self.drop(scores.softmax(dim=-1))
        return self.out((attn @ v).transpose(1, 2).reshape(b, t, d))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: SeqModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, mask))
        return x + self.drop(self.ffn(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: SeqModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.self_attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.cross_attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_mask, cross_mask):
        h = self.ln1(y)
        y = y + self.drop(self.self_attn(h, h, self_mask))
        y = y + self.drop(self.cross_attn(self.ln2(y), memory, cross_mask))
        return y + self.drop(self.ffn(self.ln3(y)))


class Seq2Seq(nn.Module):
    def __init__(self, cfg: SeqModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.src_pos = nn.Embedding(cfg.max_source_len, cfg.dim)
        self.tgt_pos = nn.Embedding(cfg.max_target_len, cfg.dim)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.enc_norm = nn.LayerNorm(cfg.dim)
        self.dec_norm = nn.LayerNorm(cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.vocab_size)
        self.drop = nn.Dropout(cfg.dropout)
        nn.init.normal_(self.embed.weight, std=0.05)
        nn.init.normal_(self.src_pos.weight, std=0.05)
        nn.init.normal_(self.tgt_pos.weight, std=0.05)

    def _check(self, ids: torch.Tensor, limit: int, what: str) -> None:
        if ids.shape[1] > limit:
            raise ValueError(f"{what} length {ids.shape[1]} exceeds maximum {limit}")
        if ids.numel() and (int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0):
            raise ValueError(f"{what} contains token ids outside [0, {self.cfg.vocab_size})")

    def encode(self, src: torch.Tensor, src_mask: torch.Tensor) -> torch.Tensor:
        self._check(src, self.cfg.max_source_len, "source")
        pos = torch.arange(src.shape[1])
        x = self.drop(self.embed(src) + self.src_pos(pos))
        mask = src_mask[:, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x)

    def decode(self, memory: torch.Tensor, src_mask: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        self._check(tgt_in, self.cfg.max_target_len, "target")
        t = tgt_in.shape[1]
        pos = torch.arange(t)
        y = self.drop(self.embed(tgt_in) + self.tgt_pos(pos))
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool))[None]
        cross = src_mask[:, None, :]
        for layer in self.decoder:
            y = layer(y, memory, causal, cross)
        return self.proj(self.dec_norm(y))

    def forward(self, src, src_mask, tgt_in):
        """Logits of shape (batch, target length, vocab); position ``t``
        predicts the token that follows ``tgt_in[:, :t+1]``."""
        return self.decode(self.encode(src, src_mask), src_mask, tgt_in)


@dataclass
class Batch:
    src: torch.Tensor
    src_mask: torch.Tensor
    tgt_in: torch.Tensor
    tgt_out: torch.Tensor
    tgt_mask: torch.Tensor

    def __len__(self) -> int:
        return self.src.shape[0]


@dataclass(frozen=True)
class Specials:
    pad: int
    bos: int
    eos: int


def make_batch(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]], specials: Specials) -> Batch:
    """Pad instruction/response id pairs. The decoder reads ``<bos> + y`` and
    is trained to emit ``y + <eos>``."""
    s_len = max(len(src) for src, _ in pairs)
    t_len = max(len(tgt) for _, tgt in pairs) + 1
    n = len(pairs)
    src = torch.full((n, s_len), specials.pad, dtype=torch.long)
    tgt_in = torch.full((n, t_len), specials.pad, dtype=torch.long)
    tgt_out = torch.full((n, t_len), specials.pad, dtype=torch.long)
    tgt_mask = torch.zeros((n, t_len), dtype=torch.bool)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        tgt_in[i, : len(t) + 1] = torch.as_tensor([specials.bos, *t], dtype=torch.long)
        tgt_out[i, : len(t) + 1] = torch.as_tensor([*t, specials.eos], dtype=torch.long)
        tgt_mask[i, : len(t) + 1] = True
    return Batch(src, src != specials.pad, tgt_in, tgt_out, tgt_mask)


def forward(model: Seq2Seq, batch: Batch) -> torch.Tensor:
    return model(batch.src, batch.src_mask, batch.tgt_in)


def nll_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over unmasked target positions."""
    if logits.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, mask {tuple(mask.shape)}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("every target position is padding")
    logp = logits.log_softmax(dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(logp * mask).sum() / n


@dataclass
class Example:
    """Token-id training pair; ``group`` ties alignment examples of one item."""

    task: str
    instruction: List[int]
    response: List[int]
    group: Optional[int] = None


@dataclass
class TrainResult:
    model: Seq2Seq
    curve: List[Dict[str, float]] = field(default_factory=list)


def _epoch_examples(examples: Sequence[Example], per_item: int, rng: np.random.Generator) -> List[Example]:
    plain = [ex for ex in examples if ex.group is None]
    groups: Dict[int, List[Example]] = {}
    for ex in examples:
        if ex.group is not None:
            groups.setdefault(ex.group, []).append(ex)
    for key in sorted(groups):
        members = groups[key]
        take = min(per_item, len(members))
        plain += [members[i] for i in sorted(rng.choice(len(members), size=take, replace=False))]
    return plain


def _batches(examples: Sequence[Example], batch_size: int, rng: Optional[np.random.Generator]) -> List[List[Example]]:
    """Shuffle (when ``rng`` is given), then sort inside windows of 20 batches
    by instruction length to limit padding."""
    order = rng.permutation(len(examples)) if rng is not None else np.arange(len(examples))
    window = batch_size * 20
    out = []
    for start in range(0, len(order), window):
        chunk = sorted(order[start : start + window], key=lambda i: (len(examples[i].instruction), i))
        out += [[examples[i] for i in chunk[j : j + batch_size]] for j in range(0, len(chunk), batch_size)]
    if rng is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


@torch.no_grad()
def evaluate_nll(model: Seq2Seq, examples: Sequence[Example], specials: Specials, batch_size: int = 128) -> float:
    if not examples:
        return float("nan")
    model.eval()
    total, count = 0.0, 0
    for chunk in _batches(examples, batch_size, None):
        batch = make_batch([(e.instruction, e.response) for e in chunk], specials)
        n = int(batch.tgt_mask.sum())
        total += float(nll_loss(forward(model, batch), batch.tgt_out, batch.tgt_mask)) * n
        count += n
    return total / count


def train_model(
    cfg: SeqModelConfig,
    examples: Sequence[Example],
    specials: Specials,
    *,
    valid: Sequence[Example] = (),
    checkpoint=None,
    log_path=None,
) -> TrainResult:
    """Teacher-forced training. Aborts with :class:`NumericalError` on a
    non-finite loss after writing the last good parameters to ``checkpoint``."""
    if not examples:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(cfg.seed)
    model = Seq2Seq(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    result = TrainResult(model)
    last_good = copy.deepcopy(model.state_dict())
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total, count = 0.0, 0
        for chunk in _batches(_epoch_examples(examples, cfg.alignment_per_item, rng), cfg.batch_size, rng):
            batch = make_batch([(e.instruction, e.response) for e in chunk], specials)
            loss = nll_loss(forward(model, batch), batch.tgt_out, batch.tgt_mask)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                if checkpoint is not None:
                    save_model(checkpoint, model)
                raise NumericalError(f"non-finite training loss at epoch {epoch}; last good parameters kept")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = int(batch.tgt_mask.sum())
            total += loss.item() * n
            count += n
        last_good = copy.deepcopy(model.state_dict())
        row = {
            "epoch": epoch,
            "train_nll": total / count,
            "valid_nll": evaluate_nll(model, valid, specials),
            "wall_seconds": time.perf_counter() - start,
        }
        result.curve.append(row)
        log.info("epoch %d train %.4f valid %.4f (%.0fs)", epoch, row["train_nll"], row["valid_nll"], row["wall_seconds"])
    model.eval()
    if checkpoint is not None:
        save_model(checkpoint, model)
    if log_path is not None:
        write_training_log(log_path, result.curve)
    return result


def write_training_log(path, curve: Sequence[Dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_nll", "valid_nll", "wall_seconds"])
        writer.writeheader()
        for row in curve:
            writer.writerow(row)


def save_model(path, model: Seq2Seq) -> None:
    save_checkpoint(path, {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})
    Path(f"{path}.config.json").write_text(json.dumps(asdict(model.cfg), indent=2, sort_keys=True))


def load_model(path) -> Seq2Seq:
    cfg = SeqModelConfig(**json.loads(Path(f"{path}.config.json").read_text()))
    model = Seq2Seq(cfg)
    tensors = load_checkpoint(path)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    model.eval()
    return model
