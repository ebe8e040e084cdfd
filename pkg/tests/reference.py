"""Plain-numpy forward pass of the HST classifier, used as an oracle."""

import numpy as np
from scipy.special import erf


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _attn(x, p, mask, scale=True):
    n, d = x.shape
    h = p["heads"]
    dh = d // h
    q = x @ p["w_q"] + p["b_q"]
    k = x @ p["w_k"] + p["b_k"]
    v = x @ p["w_v"] + p["b_v"]
    out = np.zeros_like(x)
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / (np.sqrt(dh) if scale else 1.0)
        s = np.where(mask, s, -np.inf)
        e = np.exp(s - s.max(-1, keepdims=True))
        out[:, sl] = e / e.sum(-1, keepdims=True) @ v[:, sl]
    return out


def _gelu(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def _params(att):
    p = {k: v.data for k, v in att.tensors().items()}
    p["heads"] = att.heads
    return p


def reference_logits(model, ids, mask, rep_positions, hierarchical, pooling="mean"):
    """Logits for one sequence ``ids`` under a fixed boolean ``mask``."""
    cfg = model.config
    H = model.tok_emb.data[ids] + model.pos_emb.data[: len(ids)]
    reps = list(rep_positions)
    for layer in model.layers:
        b = layer.block
        a = _attn(_ln(H, b.ln1_g.data, b.ln1_b.data), _params(b.attn), mask, cfg.scale_scores)
        H = H + a @ b.w_o.data + b.b_o.data
        x = _ln(H, b.ln2_g.data, b.ln2_b.data)
        H = H + _gelu(x @ b.w_1.data + b.b_1.data) @ b.w_2.data + b.b_2.data
        if hierarchical:
            R = _attn(H[reps], _params(layer.hier), np.ones((len(reps), len(reps)), bool), cfg.scale_scores)
            H = H.copy()
            H[reps] = R
    if pooling == "cls_g_only":
        pooled = _ln(H[0], model.ln_f_g.data, model.ln_f_b.data)
    else:
        R = _ln(H[reps], model.ln_f_g.data, model.ln_f_b.data)
        pooled = R.mean(0) if pooling == "mean" else R.max(0)
    return pooled @ model.w_out.data
