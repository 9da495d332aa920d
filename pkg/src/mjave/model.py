"""Global-gated cross-modality fusion, attribute head and regional-gated value head.

Weights are stored input-major (``[in, out]``) and applied as ``x @ W``.
All operations are batched over a leading instance axis.

Shapes used below: B instances, T positions (including [CLS]/[SEP] and
padding), d text hidden size, d_a attention size, K regions, d_v region
size, L attribute labels, 2L+1 tags.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataio import DataError, Instance, TagScheme, Vocabulary, encode
from .encoders import image_encode, init_text_encoder, text_encode
from .numerics import Tensor


@dataclass
class AblationConfig:
    use_visual: bool = True
    use_global_gate: bool = True
    use_regional_gate: bool = True
    use_attr_feed: bool = True
    use_mtl: bool = True
    use_kl: bool = True
    teacher_force_attributes: bool = False
    teacher_force_values: bool = False

    def __post_init__(self):
        if not self.use_visual and (self.use_global_gate or self.use_regional_gate):
            # gates are meaningless without the visual pathway
            self.use_global_gate = False
            self.use_regional_gate = False

    @classmethod
    def jave(cls, **kw) -> AblationConfig:
        return cls(use_visual=False, **kw)

    def replace(self, **kw) -> AblationConfig:
        d = asdict(self)
        d.update(kw)
        return AblationConfig(**d)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ModelConfig:
    labels: list[str]
    vocab_size: int
    max_len: int = 46
    d: int = 64
    layers: int = 2
    ff: int = 128
    d_a: int = 200
    d_v: int = 32
    k: int = 9
    image_proj: int | None = None
    untie_visual_value: bool = False
    include_special_in_sum: bool = False
    dtype: str = "float32"
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def num_tags(self) -> int:
        return 2 * len(self.labels) + 1

    @property
    def visual_dim(self) -> int:
        return self.image_proj or self.d_v

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        obj = dict(obj)
        obj["ablation"] = AblationConfig(**obj.get("ablation", {}))
        return cls(**obj)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Batch:
    ids: np.ndarray  # [B, T] int
    mask: np.ndarray  # [B, T] real positions incl. [CLS]/[SEP]
    content: np.ndarray  # [B, T] real tokens only
    tag_ids: np.ndarray  # [B, T] gold tag index (0 where not content)
    gold_attr: np.ndarray  # [B, L]
    gold_mapped: np.ndarray  # [B, L] value->attribute mapping of the gold tags
    global_vec: np.ndarray  # [B, d_v]
    regions: np.ndarray  # [B, K, d_v]
    n_tokens: list[int]

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass
class ForwardOutput:
    attr: Tensor  # [B, L]
    values: Tensor  # [B, T, 2L+1]
    g_global: Tensor  # [B, T, 1]
    g_regional: Tensor  # [B, K, 1]
    alpha_t: Tensor  # [B, T, T]
    alpha_v: Tensor  # [B, T, K]
    hidden: Tensor  # [B, T, d]
    fused: Tensor  # [B, T, d_a]


def make_batch(instances: Sequence[Instance], vocab: Vocabulary, scheme: TagScheme, max_len: int,
               trim: bool = True) -> Batch:
    """Encode and stack instances; ``trim`` drops columns that are [PAD] everywhere."""
    if not instances:
        raise ValueError("cannot batch zero instances")
    encs = [encode(inst, vocab, max_len) for inst in instances]
    width = max(e.n_tokens for e in encs) + 2 if trim else max_len + 2
    b = len(encs)
    ids = np.stack([e.ids[:width] for e in encs])
    mask = np.stack([e.mask[:width] for e in encs])
    content = mask.copy()
    content[:, 0] = False
    for row, e in enumerate(encs):
        content[row, e.n_tokens + 1] = False
    tag_ids = np.zeros((b, width), dtype=np.int64)
    gold_attr = np.zeros((b, len(scheme)))
    gold_mapped = np.zeros((b, len(scheme)))
    for row, (inst, e) in enumerate(zip(instances, encs)):
        tag_ids[row, 1:e.n_tokens + 1] = scheme.encode_tags(e.tags)
        gold_attr[row] = scheme.attribute_vector(inst.attributes)
        for lab in scheme.labels:
            has_b = f"B-{lab}" in e.tags
            has_i = f"I-{lab}" in e.tags
            gold_mapped[row, scheme.label_index[lab]] = 0.5 * (has_b + has_i)
    missing = [inst.id for inst in instances if inst.image is None]
    if missing:
        raise DataError(f"instances without image features: {missing[:5]}")
    global_vec = np.stack([inst.image.global_vec for inst in instances])
    regions = np.stack([inst.image.regions for inst in instances])
    return Batch(ids, mask, content, tag_ids, gold_attr, gold_mapped, global_vec, regions,
                 [e.n_tokens for e in encs])


class MJAVE:
    """Parameters plus the forward computation of the joint model."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.scheme = TagScheme(config.labels)
        self.vocab = vocab
        if config.vocab_size != len(vocab):
            raise ValueError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    @property
    def ablation(self) -> AblationConfig:
        return self.config.ablation

    def batch(self, instances: Sequence[Instance], trim: bool = True) -> Batch:
        return make_batch(instances, self.vocab, self.scheme, self.config.max_len, trim=trim)

    def forward(self, batch: Batch, ablation: AblationConfig | None = None,
                gate_override: dict[str, float] | None = None) -> ForwardOutput:
        return forward(batch, self.params, self.config, ablation or self.config.ablation, gate_override)

    def trainable(self) -> dict[str, Tensor]:
        return self.params


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    dt = np.dtype(config.dtype)
    params = init_text_encoder(rng, config.vocab_size, config.max_len + 2, config.d, config.layers,
                               config.ff, dt)
    d, da, dv, n_lab, n_tag = config.d, config.d_a, config.visual_dim, len(config.labels), config.num_tags

    def w(*shape, std=None):
        std = std if std is not None else 1.0 / math.sqrt(shape[0])
        return rng.normal(scale=std, size=shape).astype(dt)

    raw = {
        "fusion.W_Qt": w(d, da), "fusion.W_Kt": w(d, da), "fusion.W_Vt": w(d, da),
        "fusion.W_Qv": w(d, da), "fusion.W_Kv": w(dv, da), "fusion.W_Vv": w(dv, da),
        "fusion.W_1": w(d, 1), "fusion.W_2": w(dv, 1), "fusion.b": np.zeros(1, dt),
        "head.W_3": w(d, n_lab, std=0.1 / math.sqrt(d)), "head.W_4": w(da, n_lab, std=0.1 / math.sqrt(da)),
        "head.W_5": w(d, n_lab),
        "head.W_6": w(d, n_tag), "head.W_7": w(da, n_tag), "head.W_8": w(n_lab, n_tag),
        "head.W_9": w(n_lab, 1), "head.W_10": w(dv, 1),
    }
    if config.untie_visual_value:
        raw["head.W_Vv_tag"] = w(dv, n_tag)
    else:
        raw["head.P_tag"] = w(da, n_tag)
    if config.image_proj:
        raw["img.proj"] = w(config.d_v, config.image_proj)
    params.update({k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()})
    return params


# ---------------------------------------------------------------------------
# the pieces of the forward pass


def cross_modality_attention(h: Tensor, v: Tensor, params: dict[str, Tensor], mask: np.ndarray):
    """Token-token and token-region attention maps, scaled by 1/sqrt(d_a).

    Returns ``(alpha_t [B,T,T], alpha_v [B,T,K])``; [PAD] key columns of
    ``alpha_t`` are exactly 0.
    """
    da = params["fusion.W_Qt"].shape[1]
    inv = 1.0 / math.sqrt(da)
    qt = h @ params["fusion.W_Qt"]
    kt = h @ params["fusion.W_Kt"]
    alpha_t = nx.masked_softmax(nx.scale(qt @ kt.T, inv), np.asarray(mask, dtype=bool)[..., None, :])
    qv = h @ params["fusion.W_Qv"]
    kv = v @ params["fusion.W_Kv"]
    alpha_v = nx.softmax(nx.scale(qv @ kv.T, inv))
    return alpha_t, alpha_v


def global_gate(h: Tensor, v_g: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-token scalar gate sigma(h_i W_1 + v_G W_2 + b), shape ``[B, T, 1]``."""
    img = nx.expand_dims(v_g @ params["fusion.W_2"], -2)
    return nx.sigmoid(h @ params["fusion.W_1"] + img + params["fusion.b"])


def fuse(h: Tensor, v: Tensor, alpha_t: Tensor, alpha_v: Tensor, g_global: Tensor | None,
         params: dict[str, Tensor], ablation: AblationConfig) -> Tensor:
    """Text attention output plus the gated visual attention output.

    ``g_global=None`` drops the gate factor (the "without global gate" variant).
    """
    text = alpha_t @ (h @ params["fusion.W_Vt"])
    if not ablation.use_visual:
        return text
    visual = alpha_v @ (v @ params["fusion.W_Vv"])
    if g_global is not None:
        visual = visual * g_global
    return text + visual


def _sum_mask(batch_mask: np.ndarray, dtype) -> np.ndarray:
    return batch_mask.astype(dtype)[..., None]


def predict_attributes(h: Tensor, fused: Tensor, params: dict[str, Tensor], sum_mask: np.ndarray) -> Tensor:
    """sigma(W_3 sum_i h_i + W_4 sum_i h'_i + W_5 h_0); sums run over ``sum_mask`` rows."""
    w = _sum_mask(sum_mask, h.dtype)
    sum_h = nx.sum(h * w, axis=-2)
    sum_f = nx.sum(fused * w, axis=-2)
    h0 = nx.index(h, (Ellipsis, 0, slice(None)))
    return nx.sigmoid(sum_h @ params["head.W_3"] + sum_f @ params["head.W_4"] + h0 @ params["head.W_5"])


def regional_gate(attr: Tensor, v: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-region scalar gate sigma(W_9 y^a + W_10 v_k), shape ``[B, K, 1]``."""
    return nx.sigmoid(nx.expand_dims(attr @ params["head.W_9"], -2) + v @ params["head.W_10"])


def extract_values(h: Tensor, fused: Tensor, attr: Tensor, v: Tensor, alpha_v: Tensor,
                   g_regional: Tensor | None, params: dict[str, Tensor], ablation: AblationConfig) -> Tensor:
    """Per-token tag distribution ``[B, T, 2L+1]``.

    The visual term re-uses the fusion layer's ``alpha_v`` and ``W_Vv``, then
    maps the d_a-dimensional result to tag space with ``P_tag``; with untied
    weights ``W_Vv_tag`` maps regions straight to tag space.
    """
    logits = h @ params["head.W_6"] + fused @ params["head.W_7"]
    if ablation.use_attr_feed:
        logits = logits + nx.expand_dims(attr @ params["head.W_8"], -2)
    if ablation.use_visual:
        if "head.W_Vv_tag" in params:
            vv = v @ params["head.W_Vv_tag"]
        else:
            vv = v @ params["fusion.W_Vv"]
        if g_regional is not None:
            vv = vv * g_regional
        visual = alpha_v @ vv
        if "head.P_tag" in params:
            visual = visual @ params["head.P_tag"]
        logits = logits + visual
    return nx.softmax(logits)


def _const_gate(like: Tensor, value: float) -> Tensor:
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def forward(batch: Batch, params: dict[str, Tensor], config: ModelConfig, ablation: AblationConfig,
            gate_override: dict[str, float] | None = None) -> ForwardOutput:
    """Text encoder -> fusion -> attribute head -> regional gate -> value head.

    ``gate_override`` pins ``"global"`` and/or ``"regional"`` gates to a
    constant (a test hook for the zero-gate identities).
    """
    gate_override = gate_override or {}
    dt = np.dtype(config.dtype)
    h = text_encode(batch.ids, batch.mask, params, config.layers)
    v_g, v = image_encode(batch.global_vec, batch.regions, config.k, config.d_v, params.get("img.proj"), dt)

    alpha_t, alpha_v = cross_modality_attention(h, v, params, batch.mask)
    g_global = global_gate(h, v_g, params)
    if "global" in gate_override:
        g_global = _const_gate(g_global, gate_override["global"])
    fused = fuse(h, v, alpha_t, alpha_v, g_global if ablation.use_global_gate else None, params, ablation)

    sum_mask = batch.mask if config.include_special_in_sum else batch.content
    attr = predict_attributes(h, fused, params, sum_mask)
    feed = Tensor(batch.gold_attr.astype(dt)) if ablation.teacher_force_attributes else attr

    g_regional = regional_gate(feed, v, params)
    if "regional" in gate_override:
        g_regional = _const_gate(g_regional, gate_override["regional"])
    values = extract_values(h, fused, feed, v, alpha_v, g_regional if ablation.use_regional_gate else None,
                            params, ablation)
    return ForwardOutput(attr, values, g_global, g_regional, alpha_t, alpha_v, h, fused)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest (name, shape, offset) + little-endian float32 payload

MANIFEST = "manifest.json"
PAYLOAD = "weights.bin"


def save_checkpoint(path: str | Path, model: MJAVE, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    meta = {
        "format": "mjave-checkpoint/1",
        "config": model.config.to_json(),
        "config_hash": model.config.digest(),
        "labels": model.scheme.labels,
        "vocab": model.vocab.itos,
        "tensors": entries,
    }
    if extra:
        meta["extra"] = extra
    (path / PAYLOAD).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(meta, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> MJAVE | SeparateModels:
    path = Path(path)
    if (path / "attr" / MANIFEST).exists() and (path / "value" / MANIFEST).exists():
        return SeparateModels(load_checkpoint(path / "attr"), load_checkpoint(path / "value"))
    try:
        meta = json.loads((path / MANIFEST).read_text())
        payload = np.frombuffer((path / PAYLOAD).read_bytes(), dtype="<f4")
    except OSError as exc:
        raise DataError(f"cannot read checkpoint at {path}: {exc}") from None
    config = ModelConfig.from_json(meta["config"])
    if config.digest() != meta["config_hash"]:
        raise DataError(f"{path}: config hash mismatch")
    if list(meta["labels"]) != list(config.labels):
        raise DataError(f"{path}: tag scheme does not match config labels")
    dt = np.dtype(config.dtype)
    params = {}
    for e in meta["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = payload[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(dt)
        params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    return MJAVE(config, Vocabulary.from_list(meta["vocab"]), params)


def save_separate(path: str | Path, models: SeparateModels, extra: dict | None = None) -> None:
    save_checkpoint(Path(path) / "attr", models.attr_model, extra)
    save_checkpoint(Path(path) / "value", models.value_model, extra)


class SeparateModels:
    """Two independently trained models: one read for attributes, one for values.

    Used when multitask learning is ablated away.
    """

    def __init__(self, attr_model: MJAVE, value_model: MJAVE):
        self.attr_model = attr_model
        self.value_model = value_model
        if attr_model.scheme != value_model.scheme or attr_model.vocab.itos != value_model.vocab.itos:
            raise DataError("attribute and value models disagree on the tag scheme or vocabulary")
        self.scheme = attr_model.scheme
        self.config = value_model.config

    @property
    def ablation(self) -> AblationConfig:
        return self.value_model.config.ablation

    def batch(self, instances, trim: bool = True) -> Batch:
        return self.value_model.batch(instances, trim)

    def forward(self, batch: Batch, ablation: AblationConfig | None = None,
                gate_override: dict[str, float] | None = None) -> ForwardOutput:
        a = self.attr_model.forward(batch, ablation, gate_override)
        out = self.value_model.forward(batch, ablation, gate_override)
        out.attr = a.attr
        return out
