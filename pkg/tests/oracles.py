"""Independent NumPy reference implementations used as test oracles.

Nothing here imports the package's numerics; the decoder reference reads
raw arrays from a state dict and recomputes a forward pass from scratch.
"""

from __future__ import annotations

import math

import numpy as np


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets):
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-lp[np.arange(len(targets)), targets].mean())


def contrastive_from_similarity(sim):
    sim = np.asarray(sim, dtype=np.float64)
    b = sim.shape[0]
    rows = -np.diag(log_softmax(sim, axis=1)).sum()
    cols = -np.diag(log_softmax(sim, axis=0)).sum()
    return float((rows + cols) / b)


def cosine_matrix(a, b):
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def rms_norm(x, scale, eps=1e-6):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * scale


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def decoder_forward(state, n_heads, inputs, mode="causal", stage=None, alpha=1.0):
    """Final hidden states and logits for one unpadded sequence ``[T, d]``."""
    st = {k: v.detach().double().numpy() for k, v in state.items()}
    x = np.asarray(inputs, dtype=np.float64)
    t, d = x.shape
    x = x + st["embed_pos"][:t]
    n_layers = len({k.split(".")[1] for k in st if k.startswith("layers.")})
    mask = np.tril(np.ones((t, t), bool)) if mode == "causal" else np.ones((t, t), bool)

    def lin(h, layer, name):
        y = h @ st[f"layers.{layer}.{name}"]
        if stage is not None:
            key = f"lora.sets.{stage}.adapters.layers_{layer}_{name}"
            if key + ".A" in st:
                y = y + alpha * (h @ st[key + ".B"]) @ st[key + ".A"]
        return y

    dh = d // n_heads
    for i in range(n_layers):
        h = rms_norm(x, st[f"layers.{i}.norm1"])
        q, k, v = (lin(h, i, w).reshape(t, n_heads, dh).transpose(1, 0, 2) for w in ("wq", "wk", "wv"))
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
        scores = np.where(mask, scores, -np.inf)
        ctx = (softmax(scores) @ v).transpose(1, 0, 2).reshape(t, d)
        x = x + lin(ctx, i, "wo")
        h = rms_norm(x, st[f"layers.{i}.norm2"])
        x = x + lin(gelu(lin(h, i, "w1")), i, "w2")
    hidden = rms_norm(x, st["final_norm"])
    return hidden, hidden @ st["head"]
