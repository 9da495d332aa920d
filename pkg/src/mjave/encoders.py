"""Toy text transformer and image-feature pass-through.

The text encoder stands in for a pretrained BERT: it maps
``[CLS] x_1 .. x_N [SEP] [PAD]..`` to one hidden row per position, row 0
being the [CLS] summary.  Image features arrive precomputed; the image
encoder only validates shapes and optionally applies a learned projection.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor


def init_text_encoder(rng: np.random.Generator, vocab_size: int, positions: int, d: int,
                      layers: int, ff: int, dtype=np.float64) -> dict[str, Tensor]:
    def w(*shape, std=None):
        std = std if std is not None else 1.0 / math.sqrt(shape[0])
        return rng.normal(scale=std, size=shape).astype(dtype)

    p = {
        "enc.tok_emb": w(vocab_size, d, std=0.5),
        "enc.pos_emb": w(positions, d, std=0.1),
    }
    for i in range(layers):
        pre = f"enc.l{i}."
        p.update({
            pre + "ln1.g": np.ones(d, dtype), pre + "ln1.b": np.zeros(d, dtype),
            pre + "attn.q": w(d, d), pre + "attn.k": w(d, d), pre + "attn.v": w(d, d),
            pre + "attn.o": w(d, d, std=0.5 / math.sqrt(d)),
            pre + "ln2.g": np.ones(d, dtype), pre + "ln2.b": np.zeros(d, dtype),
            pre + "ff.w1": w(d, ff), pre + "ff.b1": np.zeros(ff, dtype),
            pre + "ff.w2": w(ff, d, std=0.5 / math.sqrt(ff)), pre + "ff.b2": np.zeros(d, dtype),
        })
    if layers:
        p["enc.lnf.g"] = np.ones(d, dtype)
        p["enc.lnf.b"] = np.zeros(d, dtype)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def text_encode(ids: np.ndarray, mask: np.ndarray, params: dict[str, Tensor], layers: int) -> Tensor:
    """Hidden states ``[B, T, d]`` for id matrix ``ids`` ``[B, T]``.

    ``mask`` marks real positions (tokens plus [CLS]/[SEP]); [PAD] keys are
    excluded from self-attention so padding never reaches a real row.
    """
    ids = np.atleast_2d(ids)
    mask = np.atleast_2d(mask)
    table = params["enc.pos_emb"]
    if ids.shape[1] > table.shape[0]:
        raise ValueError(f"sequence of {ids.shape[1]} positions exceeds positional table of {table.shape[0]}")
    x = nx.embedding(params["enc.tok_emb"], ids) + nx.index(table, slice(0, ids.shape[1]))
    if layers == 0:
        return x
    d = x.shape[-1]
    key_mask = mask[:, None, :]
    for i in range(layers):
        pre = f"enc.l{i}."
        a = nx.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = a @ params[pre + "attn.q"]
        k = a @ params[pre + "attn.k"]
        v = a @ params[pre + "attn.v"]
        att = nx.masked_softmax(nx.scale(q @ k.T, 1.0 / math.sqrt(d)), key_mask)
        x = x + (att @ v) @ params[pre + "attn.o"]
        f = nx.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        hidden = nx.gelu(f @ params[pre + "ff.w1"] + params[pre + "ff.b1"])
        x = x + hidden @ params[pre + "ff.w2"] + params[pre + "ff.b2"]
    return nx.layer_norm(x, params["enc.lnf.g"], params["enc.lnf.b"])


def image_encode(global_vec: np.ndarray, regions: np.ndarray, k: int, d_v: int,
                 projection: Tensor | None = None, dtype=np.float64) -> tuple[Tensor, Tensor]:
    """Return ``(v_G, V)`` as tensors, checking K and d_v against the manifest."""
    global_vec = np.asarray(global_vec)
    regions = np.asarray(regions)
    if regions.shape[-2] != k or regions.shape[-1] != d_v or global_vec.shape[-1] != d_v:
        raise ValueError(
            f"image features have K={regions.shape[-2]}, d_v={regions.shape[-1]}; expected K={k}, d_v={d_v}"
        )
    vg = Tensor(global_vec.astype(dtype, copy=False))
    v = Tensor(regions.astype(dtype, copy=False))
    if projection is None:
        return vg, v
    return vg @ projection if vg.ndim > 1 else nx.reshape(nx.reshape(vg, (1, -1)) @ projection, (-1,)), v @ projection
