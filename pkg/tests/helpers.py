"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import math
from typing import Callable, Dict

import numpy as np


def mlp_forward64(weights, biases, x):
    """Float64 re-implementation of the affine/ReLU stack."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ np.asarray(w, dtype=np.float64).T + np.asarray(b, dtype=np.float64)
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
    return h


def central_differences(loss: Callable[[Dict[str, np.ndarray]], float], params: Dict[str, np.ndarray], h: float = 1e-3):
    """Central finite differences of ``loss`` over every entry of ``params``
    (float64 copies are perturbed; the caller's arrays are untouched)."""
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in p64.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + h
            up = loss(p64)
            arr[idx] = keep - h
            down = loss(p64)
            arr[idx] = keep
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / scale)


def brute_rank(scores: Dict[int, float], target: int) -> int:
    """Rank by counting strictly better candidates plus equal-score
    candidates with a smaller id."""
    s = scores[target]
    return 1 + sum(1 for i, v in scores.items() if v > s or (v == s and i < target))


# ---- scalar encoder-decoder, loops over Python floats only ----

def _vec(t):
    return [float(v) for v in t]


def _affine(w, b, x):
    return [sum(wi * xi for wi, xi in zip(row, x)) + bi for row, bi in zip(w, b)]


def _layer_norm(g, b, x, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(x, g, b)]


def _attend(p, prefix, heads, xs, mem, keep):
    """``keep(i, j)`` says whether query ``i`` may look at key ``j``;
    disallowed keys are skipped outright rather than masked."""
    q = [_affine(p[prefix + "q.weight"], p[prefix + "q.bias"], x) for x in xs]
    k = [_affine(p[prefix + "k.weight"], p[prefix + "k.bias"], m) for m in mem]
    v = [_affine(p[prefix + "v.weight"], p[prefix + "v.bias"], m) for m in mem]
    d = len(xs[0])
    dh = d // heads
    out = []
    for i in range(len(xs)):
        joined = [0.0] * d
        for h in range(heads):
            lo = h * dh
            js = [j for j in range(len(mem)) if keep(i, j)]
            s = [sum(q[i][lo + c] * k[j][lo + c] for c in range(dh)) / math.sqrt(dh) for j in js]
            top = max(s)
            e = [math.exp(x - top) for x in s]
            z = sum(e)
            for c in range(dh):
                joined[lo + c] = sum(e[n] / z * v[j][lo + c] for n, j in enumerate(js))
        out.append(_affine(p[prefix + "out.weight"], p[prefix + "out.bias"], joined))
    return out


def _ffn(p, prefix, x):
    h = [max(v, 0.0) for v in _affine(p[prefix + "fc1.weight"], p[prefix + "fc1.bias"], x)]
    return _affine(p[prefix + "fc2.weight"], p[prefix + "fc2.bias"], h)


def _add(a, b):
    return [x + y for x, y in zip(a, b)]


def scalar_seq2seq_logits(state, cfg, src, src_keep, tgt_in):
    """Logits for one example from a pre-norm encoder-decoder whose
    parameters are given as a name -> array mapping."""
    p = {k: (v.tolist() if hasattr(v, "tolist") else v) for k, v in state.items()}
    x = [_add(p["embed.weight"][t], p["src_pos.weight"][i]) for i, t in enumerate(src)]
    for n in range(cfg.encoder_layers):
        pre = f"encoder.{n}."
        h = [_layer_norm(p[pre + "ln1.weight"], p[pre + "ln1.bias"], r) for r in x]
        a = _attend(p, pre + "attn.", cfg.heads, h, h, lambda i, j: src_keep[j])
        x = [_add(r, s) for r, s in zip(x, a)]
        f = [_ffn(p, pre + "ffn.", _layer_norm(p[pre + "ln2.weight"], p[pre + "ln2.bias"], r)) for r in x]
        x = [_add(r, s) for r, s in zip(x, f)]
    mem = [_layer_norm(p["enc_norm.weight"], p["enc_norm.bias"], r) for r in x]
    y = [_add(p["embed.weight"][t], p["tgt_pos.weight"][i]) for i, t in enumerate(tgt_in)]
    for n in range(cfg.decoder_layers):
        pre = f"decoder.{n}."
        h = [_layer_norm(p[pre + "ln1.weight"], p[pre + "ln1.bias"], r) for r in y]
        a = _attend(p, pre + "self_attn.", cfg.heads, h, h, lambda i, j: j <= i)
        y = [_add(r, s) for r, s in zip(y, a)]
        h = [_layer_norm(p[pre + "ln2.weight"], p[pre + "ln2.bias"], r) for r in y]
        a = _attend(p, pre + "cross_attn.", cfg.heads, h, mem, lambda i, j: src_keep[j])
        y = [_add(r, s) for r, s in zip(y, a)]
        f = [_ffn(p, pre + "ffn.", _layer_norm(p[pre + "ln3.weight"], p[pre + "ln3.bias"], r)) for r in y]
        y = [_add(r, s) for r, s in zip(y, f)]
    y = [_layer_norm(p["dec_norm.weight"], p["dec_norm.bias"], r) for r in y]
    return [_affine(p["proj.weight"], p["proj.bias"], r) for r in y]
