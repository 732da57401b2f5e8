"""Straight-line numpy reference implementations used to replay module
forwards independently of the autodiff engine."""

import math

import numpy as np


def conv_np(x, w, b=None, stride=1, padding=0, groups=1):
    cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    per_group = cout // groups
    for co in range(cout):
        g = co // per_group
        xg = xp[g * cin_g : (g + 1) * cin_g]
        for i in range(ho):
            for j in range(wo):
                patch = xg[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[co, i, j] = np.sum(patch * w[co])
    if b is not None:
        out += b[:, None, None]
    return out


def layer_norm_np(x, gamma, beta, axis, eps=1e-5):
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    shape = [1] * x.ndim
    shape[axis % x.ndim] = x.shape[axis]
    return gamma.reshape(shape) * (x - mu) / np.sqrt(var + eps) + beta.reshape(shape)


def gelu_np(x):
    return np.vectorize(lambda v: v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def softmax_np(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def linear_np(x, w, b=None):
    out = x @ w
    if b is not None:
        out = out + b
    return out


def pool_np(x, oh, ow):
    c, h, w = x.shape
    out = np.zeros((c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            hs, he = (i * h) // oh, ((i + 1) * h) // oh
            ws, we = (j * w) // ow, ((j + 1) * w) // ow
            out[:, i, j] = x[:, hs:he, ws:we].mean(axis=(1, 2))
    return out


def conv_block_np(x, p, prefix, groups):
    y = conv_np(x, p[f"{prefix}.dw.w"], p[f"{prefix}.dw.b"], 1, p[f"{prefix}.dw.w"].shape[-1] // 2, groups)
    y = layer_norm_np(y, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"], axis=0)
    y = conv_np(y, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"])
    y = gelu_np(y)
    y = conv_np(y, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])
    return x + y


def ppm_tokens_np(x, p, prefix, ratios):
    c = x.shape[0]
    groups = []
    for r in ratios:
        pooled = pool_np(x, r, r)
        groups.append(pooled.reshape(c, r * r).T)
    tokens = np.concatenate(groups, axis=0)
    return linear_np(tokens, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"])


def attention_np(queries, memory, p, prefix, heads):
    n, c = queries.shape
    m = memory.shape[0]
    d = c // heads
    q = linear_np(queries, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"]).reshape(n, heads, d)
    k = linear_np(memory, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"]).reshape(m, heads, d)
    v = linear_np(memory, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"]).reshape(m, heads, d)
    out = np.zeros((n, heads, d))
    for h in range(heads):
        logits = (q[:, h] @ k[:, h].T) / math.sqrt(d)
        out[:, h] = softmax_np(logits, axis=-1) @ v[:, h]
    return linear_np(out.reshape(n, c), p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])


def attention_stage_np(x, p, prefix, ratios, heads, memory_map=None, infusion=None):
    """Replay AttentionStage: embed, optional infusion, pooled-token attention,
    post-norm, inverted-bottleneck FFN.  memory_map defaults to self."""
    stride = {8: 4, 4: 2}[p[f"{prefix}.embed.w"].shape[-1]]
    padding = {8: 2, 4: 1}[p[f"{prefix}.embed.w"].shape[-1]]
    x = conv_np(x, p[f"{prefix}.embed.w"], p[f"{prefix}.embed.b"], stride, padding)
    if infusion is not None:
        x = x + conv_np(infusion, p[f"{prefix}.infuse.w"], p[f"{prefix}.infuse.b"])
    mem_map = x if memory_map is None else memory_map
    mem_tokens = ppm_tokens_np(mem_map, p, f"{prefix}.pool_tokens", ratios)
    c, h, w = x.shape
    tokens = x.reshape(c, h * w).T
    tokens = tokens + attention_np(tokens, mem_tokens, p, f"{prefix}.attn", heads)
    tokens = layer_norm_np(tokens, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"], axis=-1)
    mixed = tokens.T.reshape(c, h, w)
    hidden = conv_np(mixed, p[f"{prefix}.ffn.expand.w"], p[f"{prefix}.ffn.expand.b"])
    hidden = conv_np(
        hidden,
        p[f"{prefix}.ffn.dw.w"],
        p[f"{prefix}.ffn.dw.b"],
        1,
        p[f"{prefix}.ffn.dw.w"].shape[-1] // 2,
        hidden.shape[0],
    )
    hidden = gelu_np(hidden)
    return mixed + conv_np(hidden, p[f"{prefix}.ffn.project.w"], p[f"{prefix}.ffn.project.b"])


def embedded_map_np(x, p, prefix, infusion=None):
    """Just the embed + infusion part of a stage (for cross-attention memory)."""
    stride = {8: 4, 4: 2}[p[f"{prefix}.embed.w"].shape[-1]]
    padding = {8: 2, 4: 1}[p[f"{prefix}.embed.w"].shape[-1]]
    x = conv_np(x, p[f"{prefix}.embed.w"], p[f"{prefix}.embed.b"], stride, padding)
    if infusion is not None:
        x = x + conv_np(infusion, p[f"{prefix}.infuse.w"], p[f"{prefix}.infuse.b"])
    return x
