"""Joint semantic/collaborative residual-quantized autoencoder.

Both embeddings are encoded to ``d``-dim latents, concatenated, and quantized
through ``shared_levels`` codebooks of width ``2d``. The remaining residual is
split in halves; each half runs through its own ``specific_levels`` codebooks
of width ``d``. Decoders reconstruct both inputs from the summed code
embeddings.

Gradients are analytic. The decoder input uses a straight-through estimator
(value of the quantized latent, gradient routed to the encoder latent); the
codebooks learn only from the quantization loss.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import ConfigError
from .identifier import ItemIdentifier
from .numerics import (
    FLOAT,
    Adam,
    DimensionError,
    Mlp,
    NumericalError,
    as_float,
    check_dim,
    check_finite,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

FAMILIES = ("shared", "semantic", "collab")


@dataclass
class RqvaeConfig:
    semantic_dim: int
    collab_dim: int
    latent_dim: int = 16
    shared_levels: int = 2
    specific_levels: int = 2
    codebook_size: int = 256
    commitment_weight: float = 0.25
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    final_lr: Optional[float] = None  # cosine decay towards this; None keeps lr constant
    seed: int = 0

    def __post_init__(self):
        if self.shared_levels < 1 or self.specific_levels < 1:
            raise ConfigError("shared_levels and specific_levels must both be >= 1")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if min(self.latent_dim, self.semantic_dim, self.collab_dim) < 1:
            raise ConfigError("dimensions must be >= 1")
        if not self.commitment_weight > 0:
            raise ConfigError("commitment_weight must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or (self.final_lr is not None and not self.final_lr > 0):
            raise ConfigError("lr and final_lr must be > 0")


@dataclass
class CodebookStack:
    shared: List[np.ndarray]
    semantic: List[np.ndarray]
    collab: List[np.ndarray]
    usage: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        self.shared = [as_float(c) for c in self.shared]
        self.semantic = [as_float(c) for c in self.semantic]
        self.collab = [as_float(c) for c in self.collab]
        if not self.shared:
            raise DimensionError("at least one shared codebook is required")
        two_d = self.shared[0].shape[1]
        if two_d % 2:
            raise DimensionError(f"shared code width {two_d} is not even")
        d = two_d // 2
        for name, books, width in (("shared", self.shared, two_d), ("semantic", self.semantic, d), ("collab", self.collab, d)):
            for i, c in enumerate(books):
                if c.ndim != 2 or c.shape[1] != width:
                    raise DimensionError(f"{name} codebook {i} has shape {c.shape}, expected (K, {width})")
        if len(self.semantic) != len(self.collab):
            raise DimensionError("semantic and collaborative specific stacks differ in depth")
        self.reset_usage()

    @classmethod
    def init(cls, cfg: RqvaeConfig, rng: np.random.Generator, scale: float = 0.1) -> "CodebookStack":
        k, d = cfg.codebook_size, cfg.latent_dim

        def book(width):
            return (scale * rng.standard_normal((k, width))).astype(FLOAT)

        return cls(
            [book(2 * d) for _ in range(cfg.shared_levels)],
            [book(d) for _ in range(cfg.specific_levels)],
            [book(d) for _ in range(cfg.specific_levels)],
        )

    @property
    def latent_dim(self) -> int:
        return self.shared[0].shape[1] // 2

    def books(self, family: str) -> List[np.ndarray]:
        return getattr(self, family)

    def reset_usage(self) -> None:
        self.usage = {f: [np.zeros(len(c), dtype=np.int64) for c in self.books(f)] for f in FAMILIES}

    def tensors(self) -> Dict[str, np.ndarray]:
        return {f"codebook.{f}.{i}": c for f in FAMILIES for i, c in enumerate(self.books(f))}


@dataclass
class QuantizationTrace:
    shared_codes: np.ndarray
    semantic_codes: np.ndarray
    collab_codes: np.ndarray
    shared_residuals: List[np.ndarray]  # r_0 .. r_L, each (..., 2d)
    semantic_residuals: List[np.ndarray]  # (..., d)
    collab_residuals: List[np.ndarray]
    z_s_hat: Optional[np.ndarray] = None
    z_c_hat: Optional[np.ndarray] = None

    def codes(self, family: str) -> np.ndarray:
        return getattr(self, f"{family}_codes")

    def residuals(self, family: str) -> List[np.ndarray]:
        return getattr(self, f"{family}_residuals")


@dataclass
class Losses:
    recon: float
    rq_shared: float
    rq_semantic: float
    rq_collab: float

    @property
    def rq(self) -> float:
        return self.rq_shared + self.rq_semantic + self.rq_collab

    @property
    def total(self) -> float:
        return self.recon + self.rq

    def as_dict(self) -> Dict[str, float]:
        return {**asdict(self), "rq": self.rq, "total": self.total}


def encode(encoders: Tuple[Mlp, Mlp], v_s, v_c) -> Tuple[np.ndarray, np.ndarray]:
    enc_s, enc_c = encoders
    z_s, z_c = enc_s.forward(v_s), enc_c.forward(v_c)
    if z_s.shape[-1] != z_c.shape[-1]:
        raise DimensionError(f"encoders disagree on latent dim: {z_s.shape[-1]} vs {z_c.shape[-1]}")
    return z_s, z_c


def quantize_level(residual, codebook) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest code by squared distance (lowest index on ties) and the new
    residual. Accepts one vector or a batch of row vectors."""
    codebook = as_float(codebook)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError("codebook must be a non-empty (K, dim) matrix")
    residual = as_float(residual)
    check_dim("residual", residual, codebook.shape[1])
    r = np.atleast_2d(residual)
    codes = np.empty(len(r), dtype=np.int64)
    for start in range(0, len(r), 512):
        chunk = r[start : start + 512]
        dist = np.square(chunk[:, None, :] - codebook[None, :, :]).sum(axis=2)
        codes[start : start + 512] = dist.argmin(axis=1)
    new = r - codebook[codes]
    if residual.ndim == 1:
        return codes[0], new[0]
    return codes, new


def _quantize_path(r0: np.ndarray, books: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[np.ndarray]]:
    residuals = [r0]
    codes = []
    for book in books:
        c, r = quantize_level(residuals[-1], book)
        codes.append(c)
        residuals.append(r)
    return np.stack(codes, axis=-1), residuals


def quantize_item(stack: CodebookStack, z_s, z_c) -> QuantizationTrace:
    """Shared levels on ``[z_s; z_c]``, then specific levels on the two halves
    of the shared residual."""
    z_s, z_c = as_float(z_s), as_float(z_c)
    d = stack.latent_dim
    check_dim("z_s", z_s, d)
    check_dim("z_c", z_c, d)
    r0 = np.concatenate([z_s, z_c], axis=-1)
    shared_codes, shared_res = _quantize_path(r0, stack.shared)
    last = shared_res[-1]
    sem_codes, sem_res = _quantize_path(last[..., :d], stack.semantic)
    col_codes, col_res = _quantize_path(last[..., d:], stack.collab)
    trace = QuantizationTrace(shared_codes, sem_codes, col_codes, shared_res, sem_res, col_res)
    trace.z_s_hat, trace.z_c_hat = assemble_quantized(stack, trace)
    return trace


def assemble_quantized(stack: CodebookStack, trace: QuantizationTrace) -> Tuple[np.ndarray, np.ndarray]:
    d = stack.latent_dim
    shared_sum = sum(book[trace.shared_codes[..., i]] for i, book in enumerate(stack.shared))
    z_s_hat = shared_sum[..., :d] + sum(book[trace.semantic_codes[..., i]] for i, book in enumerate(stack.semantic))
    z_c_hat = shared_sum[..., d:] + sum(book[trace.collab_codes[..., i]] for i, book in enumerate(stack.collab))
    return z_s_hat, z_c_hat


def _path_loss(residuals: List[np.ndarray], codes: np.ndarray, books: Sequence[np.ndarray], alpha: float) -> float:
    """Mean over the batch of sum_i ||sg[r] - e||^2 + alpha ||r - sg[e]||^2."""
    total = 0.0
    for i, book in enumerate(books):
        diff = (residuals[i] - book[codes[:, i]]).astype(np.float64)
        total += (1.0 + alpha) * float(np.sum(diff * diff))
    return total / len(codes)


def _path_backward(
    residuals: List[np.ndarray],
    codes: np.ndarray,
    books: Sequence[np.ndarray],
    alpha: float,
    grad_out: np.ndarray,
    book_grads: List[np.ndarray],
) -> np.ndarray:
    """Backprop the quantization loss along one residual chain.

    ``grad_out`` is the gradient already flowing into the final residual.
    Residuals are differentiable functions of the latent and of earlier code
    embeddings (``r_i = r_{i-1} - e_i``); only the terms marked ``sg`` are cut.
    Returns the gradient with respect to the chain's input residual.
    """
    n = len(codes)
    g_r = grad_out
    for i in range(len(books) - 1, -1, -1):
        e = books[i][codes[:, i]]
        diff = residuals[i] - e
        g_e = (2.0 / n) * diff * -1.0 - g_r  # codebook term plus chain r_i = r_{i-1} - e_i
        np.add.at(book_grads[i], codes[:, i], g_e)
        g_r = g_r + (2.0 * alpha / n) * diff
    return g_r


def _kmeans_book(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if len(data) < k:
        idx = rng.choice(len(data), size=k, replace=True)
        jitter = 1e-3 * rng.standard_normal((k, data.shape[1]))
        return (data[idx] + jitter).astype(FLOAT)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        centroids, _ = kmeans2(data, k, iter=20, minit="++", rng=rng)
    return centroids.astype(FLOAT)


class _TrainableMixin:
    """Training hooks shared by the joint and single-source autoencoders."""

    cfg: RqvaeConfig
    initialized: bool

    def parameters(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def _book_families(self) -> Dict[str, List[np.ndarray]]:
        raise NotImplementedError

    def reseed_dead_codes(self, residuals: Dict[str, List[np.ndarray]], usage: Dict[str, List[np.ndarray]], rng, optimizer=None) -> int:
        """Move every code with zero usage onto a random residual drawn from
        that level's most recent batch input."""
        reseeded = 0
        for family, books in self._book_families().items():
            for level, book in enumerate(books):
                dead = np.flatnonzero(usage[family][level] == 0)
                if not len(dead):
                    continue
                pool = residuals[family][level]
                book[dead] = pool[rng.integers(0, len(pool), size=len(dead))]
                if optimizer is not None:
                    optimizer.reset_rows(f"codebook.{family}.{level}", dead)
                reseeded += len(dead)
        return reseeded

    def save(self, path) -> None:
        save_checkpoint(path, self.parameters())

    def load(self, path) -> None:
        tensors = load_checkpoint(path)
        for name, p in self.parameters().items():
            if tensors[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint {tensors[name].shape} vs model {p.shape}")
            p[...] = tensors[name]


def _mlp_sizes(d_in: int, d_out: int, hidden: int) -> List[int]:
    return [d_in, hidden, hidden, d_out]


class RqVae(_TrainableMixin):
    """Encoders, decoders and the codebook stack for joint identifiers."""

    def __init__(self, cfg: RqvaeConfig, encoders: Tuple[Mlp, Mlp], decoders: Tuple[Mlp, Mlp], stack: CodebookStack):
        self.cfg = cfg
        self.encoder_s, self.encoder_c = encoders
        self.decoder_s, self.decoder_c = decoders
        self.stack = stack
        self.initialized = False
        d = cfg.latent_dim
        if stack.latent_dim != d:
            raise DimensionError(f"codebooks are for latent dim {stack.latent_dim}, config says {d}")
        if len(stack.shared) != cfg.shared_levels or len(stack.semantic) != cfg.specific_levels:
            raise DimensionError("codebook stack depth does not match config")
        for name, mlp, i, o in (
            ("encoder_s", self.encoder_s, cfg.semantic_dim, d),
            ("encoder_c", self.encoder_c, cfg.collab_dim, d),
            ("decoder_s", self.decoder_s, d, cfg.semantic_dim),
            ("decoder_c", self.decoder_c, d, cfg.collab_dim),
        ):
            if (mlp.input_dim, mlp.output_dim) != (i, o):
                raise DimensionError(f"{name} maps {mlp.input_dim}->{mlp.output_dim}, expected {i}->{o}")

    @classmethod
    def init(cls, cfg: RqvaeConfig, rng: Optional[np.random.Generator] = None) -> "RqVae":
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        d, h = cfg.latent_dim, 2 * cfg.latent_dim
        enc = (Mlp.init(_mlp_sizes(cfg.semantic_dim, d, h), rng), Mlp.init(_mlp_sizes(cfg.collab_dim, d, h), rng))
        dec = (Mlp.init(_mlp_sizes(d, cfg.semantic_dim, h), rng), Mlp.init(_mlp_sizes(d, cfg.collab_dim, h), rng))
        return cls(cfg, enc, dec, CodebookStack.init(cfg, rng))

    @property
    def encoders(self) -> Tuple[Mlp, Mlp]:
        return self.encoder_s, self.encoder_c

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for name, mlp in (("enc_s", self.encoder_s), ("enc_c", self.encoder_c), ("dec_s", self.decoder_s), ("dec_c", self.decoder_c)):
            params.update(mlp.parameters(f"{name}."))
        params.update(self.stack.tensors())
        return params

    def _book_families(self):
        return {f: self.stack.books(f) for f in FAMILIES}

    def quantize(self, v_s, v_c) -> QuantizationTrace:
        z_s, z_c = encode(self.encoders, v_s, v_c)
        return quantize_item(self.stack, z_s, z_c)

    def _forward(self, v_s, v_c):
        v_s, v_c = np.atleast_2d(as_float(v_s)), np.atleast_2d(as_float(v_c))
        check_dim("v_s", v_s, self.cfg.semantic_dim)
        check_dim("v_c", v_c, self.cfg.collab_dim)
        trace = self.quantize(v_s, v_c)
        v_s_hat = self.decoder_s.forward(trace.z_s_hat)
        v_c_hat = self.decoder_c.forward(trace.z_c_hat)
        return v_s, v_c, trace, v_s_hat, v_c_hat

    def _losses(self, v_s, v_c, trace, v_s_hat, v_c_hat) -> Losses:
        n = len(v_s)
        recon = (
            float(np.sum(np.square((v_s - v_s_hat).astype(np.float64))))
            + float(np.sum(np.square((v_c - v_c_hat).astype(np.float64))))
        ) / n
        a = self.cfg.commitment_weight
        losses = Losses(
            recon,
            _path_loss(trace.shared_residuals, trace.shared_codes, self.stack.shared, a),
            _path_loss(trace.semantic_residuals, trace.semantic_codes, self.stack.semantic, a),
            _path_loss(trace.collab_residuals, trace.collab_codes, self.stack.collab, a),
        )
        _check_losses(losses)
        return losses

    def losses(self, v_s, v_c) -> Losses:
        return self._losses(*self._forward(v_s, v_c))

    def loss_and_grads(self, v_s, v_c) -> Tuple[Losses, Dict[str, np.ndarray], QuantizationTrace]:
        v_s, v_c, trace, v_s_hat, v_c_hat = self._forward(v_s, v_c)
        losses = self._losses(v_s, v_c, trace, v_s_hat, v_c_hat)
        n, d, a = len(v_s), self.cfg.latent_dim, self.cfg.commitment_weight

        # straight-through: d(loss)/d(z_hat) is routed unchanged to z
        g_zs = self.decoder_s.backward(-2.0 / n * (v_s - v_s_hat))
        g_zc = self.decoder_c.backward(-2.0 / n * (v_c - v_c_hat))

        book_grads = {f: [np.zeros_like(b) for b in self.stack.books(f)] for f in FAMILIES}
        zero = np.zeros((n, d), dtype=FLOAT)
        g_rs = _path_backward(trace.semantic_residuals, trace.semantic_codes, self.stack.semantic, a, zero, book_grads["semantic"])
        g_rc = _path_backward(trace.collab_residuals, trace.collab_codes, self.stack.collab, a, zero, book_grads["collab"])
        g_r0 = _path_backward(
            trace.shared_residuals, trace.shared_codes, self.stack.shared, a,
            np.concatenate([g_rs, g_rc], axis=1), book_grads["shared"],
        )
        self.encoder_s.backward(g_zs + g_r0[:, :d])
        self.encoder_c.backward(g_zc + g_r0[:, d:])

        grads = {}
        for name, mlp in (("enc_s", self.encoder_s), ("enc_c", self.encoder_c), ("dec_s", self.decoder_s), ("dec_c", self.decoder_c)):
            grads.update(mlp.gradients(f"{name}."))
        for f in FAMILIES:
            for i, g in enumerate(book_grads[f]):
                grads[f"codebook.{f}.{i}"] = g.astype(FLOAT)
        return losses, grads, trace

    def kmeans_init(self, v_s, v_c, rng: np.random.Generator) -> None:
        """Level-by-level k-means on the residuals of one batch."""
        z_s, z_c = encode(self.encoders, np.atleast_2d(v_s), np.atleast_2d(v_c))
        k, d = self.cfg.codebook_size, self.cfg.latent_dim
        r = np.concatenate([z_s, z_c], axis=1)
        for book in self.stack.shared:
            book[...] = _kmeans_book(r, k, rng)
            _, r = quantize_level(r, book)
        for family, part in (("semantic", r[:, :d]), ("collab", r[:, d:])):
            for book in self.stack.books(family):
                book[...] = _kmeans_book(part, k, rng)
                _, part = quantize_level(part, book)
        self.initialized = True

    def level_inputs(self, trace: QuantizationTrace) -> Dict[str, List[np.ndarray]]:
        return {f: trace.residuals(f)[:-1] for f in FAMILIES}

    def record_usage(self, usage, trace: QuantizationTrace) -> None:
        for f in FAMILIES:
            codes = trace.codes(f)
            for level, counts in enumerate(usage[f]):
                counts += np.bincount(codes[:, level], minlength=len(counts))

    def reconstruct(self, v_s, v_c) -> Tuple[np.ndarray, np.ndarray]:
        return self._forward(v_s, v_c)[3:]


class SingleRqVae(_TrainableMixin):
    """Plain residual-quantized autoencoder over one embedding source.

    Used as the semantic-only / collaborative-only identifier baseline: one
    encoder, ``shared_levels + specific_levels`` codebooks of width ``d``.
    """

    def __init__(self, cfg: RqvaeConfig, input_dim: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.input_dim = input_dim
        d, h = cfg.latent_dim, 2 * cfg.latent_dim
        self.encoder = Mlp.init(_mlp_sizes(input_dim, d, h), rng)
        self.decoder = Mlp.init(_mlp_sizes(d, input_dim, h), rng)
        levels = cfg.shared_levels + cfg.specific_levels
        self.books = [(0.1 * rng.standard_normal((cfg.codebook_size, d))).astype(FLOAT) for _ in range(levels)]
        self.initialized = False

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {**self.encoder.parameters("enc."), **self.decoder.parameters("dec.")}
        params.update({f"codebook.single.{i}": b for i, b in enumerate(self.books)})
        return params

    def _book_families(self):
        return {"single": self.books}

    def codes(self, v) -> np.ndarray:
        codes, _ = _quantize_path(self.encoder.forward(np.atleast_2d(as_float(v))), self.books)
        return codes

    def loss_and_grads(self, v, _unused=None):
        v = np.atleast_2d(as_float(v))
        check_dim("input", v, self.input_dim)
        n, a = len(v), self.cfg.commitment_weight
        z = self.encoder.forward(v)
        codes, residuals = _quantize_path(z, self.books)
        z_hat = sum(book[codes[:, i]] for i, book in enumerate(self.books))
        v_hat = self.decoder.forward(z_hat)
        recon = float(np.sum(np.square((v - v_hat).astype(np.float64)))) / n
        losses = Losses(recon, _path_loss(residuals, codes, self.books, a), 0.0, 0.0)
        _check_losses(losses)
        g_z = self.decoder.backward(-2.0 / n * (v - v_hat))
        book_grads = [np.zeros_like(b) for b in self.books]
        g_z = g_z + _path_backward(residuals, codes, self.books, a, np.zeros_like(z), book_grads)
        self.encoder.backward(g_z)
        grads = {**self.encoder.gradients("enc."), **self.decoder.gradients("dec.")}
        grads.update({f"codebook.single.{i}": g.astype(FLOAT) for i, g in enumerate(book_grads)})
        trace = {"codes": codes, "residuals": residuals}
        return losses, grads, trace

    def losses(self, v, _unused=None) -> Losses:
        return self.loss_and_grads(v)[0]

    def kmeans_init(self, v, _unused, rng) -> None:
        r = self.encoder.forward(np.atleast_2d(as_float(v)))
        for book in self.books:
            book[...] = _kmeans_book(r, self.cfg.codebook_size, rng)
            _, r = quantize_level(r, book)
        self.initialized = True

    def level_inputs(self, trace) -> Dict[str, List[np.ndarray]]:
        return {"single": trace["residuals"][:-1]}

    def record_usage(self, usage, trace) -> None:
        for level, counts in enumerate(usage["single"]):
            counts += np.bincount(trace["codes"][:, level], minlength=len(counts))


def _check_losses(losses: Losses) -> None:
    if not np.isfinite([losses.recon, losses.rq_shared, losses.rq_semantic, losses.rq_collab]).all():
        raise NumericalError(f"non-finite RQ-VAE loss: {losses.as_dict()}")


def compute_losses(model: RqVae, v_s, v_c) -> Losses:
    return model.losses(v_s, v_c)


@dataclass
class TrainResult:
    model: object
    history: List[Dict[str, float]]


def _evaluate(model, a, b, batch: int = 1024) -> Dict[str, float]:
    n = len(a)
    totals = {"recon": 0.0, "rq": 0.0, "total": 0.0}
    for start in range(0, n, batch):
        sl = slice(start, start + batch)
        losses = model.losses(a[sl], None if b is None else b[sl])
        m = len(a[sl])
        totals["recon"] += losses.recon * m
        totals["rq"] += losses.rq * m
        totals["total"] += losses.total * m
    return {k: v / n for k, v in totals.items()}


def scheduled_lr(cfg: RqvaeConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: cosine from ``lr`` at the first
    epoch down to ``final_lr`` at the last, or constant without ``final_lr``."""
    if cfg.final_lr is None or cfg.epochs <= 1:
        return cfg.lr
    frac = (epoch - 1) / (cfg.epochs - 1)
    return cfg.final_lr + 0.5 * (cfg.lr - cfg.final_lr) * (1 + math.cos(math.pi * frac))


def _fit(model, a: np.ndarray, b: Optional[np.ndarray], cfg: RqvaeConfig, rng: np.random.Generator) -> List[Dict[str, float]]:
    n = len(a)
    history = [{"epoch": 0, **_evaluate(model, a, b), "reseeded": 0}]
    if cfg.epochs == 0:
        return history
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    families = model._book_families()
    for epoch in range(1, cfg.epochs + 1):
        optimizer.lr = scheduled_lr(cfg, epoch)
        usage = {f: [np.zeros(len(book), dtype=np.int64) for book in books] for f, books in families.items()}
        order = rng.permutation(n)
        last_inputs = None
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xa = a[idx]
            xb = None if b is None else b[idx]
            if not model.initialized:
                model.kmeans_init(xa, xb, rng)
            losses, grads, trace = model.loss_and_grads(xa, xb)
            for name, g in grads.items():
                check_finite(f"gradient {name}", g)
            optimizer.step(grads)
            model.record_usage(usage, trace)
            last_inputs = model.level_inputs(trace)
        reseeded = model.reseed_dead_codes(last_inputs, usage, rng, optimizer)
        if isinstance(model, RqVae):
            model.stack.usage = usage
        record = {"epoch": epoch, **_evaluate(model, a, b), "reseeded": reseeded}
        history.append(record)
        log.debug("rqvae epoch %d: %s", epoch, record)
    return history


def _validate_inputs(*arrays) -> None:
    for arr in arrays:
        if arr is None:
            continue
        check_finite("embeddings", arr)
        if len(arr) > 1 and np.all(arr == arr[0]):
            warnings.warn("all embeddings are identical; identifiers will collide", RuntimeWarning, stacklevel=3)


def train(cfg: RqvaeConfig, v_s, v_c, *, checkpoint=None) -> TrainResult:
    """Fit the joint autoencoder. ``history[0]`` is the evaluation before any
    update; one further record per epoch follows."""
    v_s, v_c = as_float(v_s), as_float(v_c)
    if len(v_s) != len(v_c):
        raise DimensionError("semantic and collaborative embeddings disagree on item count")
    _validate_inputs(v_s, v_c)
    if len(v_s) < cfg.codebook_size:
        log.warning("fewer items (%d) than codes per level (%d)", len(v_s), cfg.codebook_size)
    rng = np.random.default_rng(cfg.seed)
    model = RqVae.init(cfg, rng)
    history = _fit(model, v_s, v_c, cfg, rng)
    if checkpoint is not None:
        model.save(checkpoint)
    return TrainResult(model, history)


def train_single(cfg: RqvaeConfig, v) -> TrainResult:
    v = as_float(v)
    _validate_inputs(v)
    rng = np.random.default_rng(cfg.seed)
    model = SingleRqVae(cfg, v.shape[1], rng)
    history = _fit(model, v, None, cfg, rng)
    return TrainResult(model, history)


def export_identifiers(model: RqVae, item_ids: Sequence[int], v_s, v_c) -> List[ItemIdentifier]:
    trace = model.quantize(np.atleast_2d(as_float(v_s)), np.atleast_2d(as_float(v_c)))
    return [
        ItemIdentifier(
            int(item),
            tuple(int(c) for c in trace.shared_codes[i]),
            tuple(int(c) for c in trace.semantic_codes[i]),
            tuple(int(c) for c in trace.collab_codes[i]),
        )
        for i, item in enumerate(item_ids)
    ]


def codebook_utilization(model: RqVae, v_s, v_c) -> Dict[str, List[float]]:
    """Fraction of codes per level selected by at least one item."""
    trace = model.quantize(np.atleast_2d(as_float(v_s)), np.atleast_2d(as_float(v_c)))
    k = model.cfg.codebook_size
    return {f: [len(np.unique(trace.codes(f)[:, i])) / k for i in range(trace.codes(f).shape[1])] for f in FAMILIES}


# --- embedding file -------------------------------------------------------

def write_embeddings(path, item_ids: Sequence[int], v_s, v_c) -> None:
    v_s, v_c = as_float(v_s), as_float(v_c)
    n, ds = v_s.shape
    dc = v_c.shape[1]
    rec = np.dtype([("item", "<u8"), ("s", "<f4", (ds,)), ("c", "<f4", (dc,))])
    arr = np.empty(n, dtype=rec)
    arr["item"] = np.asarray(item_ids, dtype=np.uint64)
    arr["s"] = v_s
    arr["c"] = v_c
    with open(path, "wb") as fh:
        fh.write(f"GSEB v1 {n} {ds} {dc}\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_embeddings(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 5 or header[:2] != ["GSEB", "v1"]:
            raise ValueError(f"{path}: bad embedding header {header}")
        n, ds, dc = (int(x) for x in header[2:])
        rec = np.dtype([("item", "<u8"), ("s", "<f4", (ds,)), ("c", "<f4", (dc,))])
        arr = np.frombuffer(fh.read(), dtype=rec)
    if len(arr) != n:
        raise ValueError(f"{path}: header promises {n} records, found {len(arr)}")
    return arr["item"].astype(np.int64), arr["s"].astype(FLOAT), arr["c"].astype(FLOAT)
