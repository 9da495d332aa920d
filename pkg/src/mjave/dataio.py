"""Instances, BIO tag scheme, span codec, vocabulary and the synthetic generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
DEFAULT_MAX_LEN = 46
DEFAULT_LABELS = ("Color", "Material", "Pattern", "Style", "Collar", "Sleeve", "Length", "Fit")


class DataError(ValueError):
    """Input data violates the instance or manifest contract."""


Span = tuple[int, int, str]


# ---------------------------------------------------------------------------
# domain types


@dataclass
class ImageFeatures:
    global_vec: np.ndarray  # [d_v]
    regions: np.ndarray  # [K, d_v]

    def __post_init__(self):
        self.global_vec = np.asarray(self.global_vec, dtype=np.float64)
        self.regions = np.asarray(self.regions, dtype=np.float64)
        if self.global_vec.ndim != 1 or self.regions.ndim != 2:
            raise DataError("image features need a global vector and a K x d_v region matrix")
        if self.regions.shape[1] != self.global_vec.shape[0]:
            raise DataError(
                f"region dimension {self.regions.shape[1]} != global dimension {self.global_vec.shape[0]}"
            )

    @property
    def k(self) -> int:
        return self.regions.shape[0]

    @property
    def d_v(self) -> int:
        return self.global_vec.shape[0]

    def to_json(self) -> dict:
        return {
            "global": [round(float(x), 5) for x in self.global_vec],
            "regions": [[round(float(x), 5) for x in row] for row in self.regions],
        }

    def to_bytes(self) -> bytes:
        """Little-endian float32, global vector first, then the regions."""
        flat = np.concatenate([self.global_vec, self.regions.reshape(-1)])
        return flat.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, d_v: int, k: int) -> ImageFeatures:
        flat = np.frombuffer(raw, dtype="<f4")
        if flat.size != d_v * (k + 1):
            raise DataError(f"feature file holds {flat.size} floats, expected d_v*(K+1) = {d_v * (k + 1)}")
        flat = flat.astype(np.float64)
        return cls(flat[:d_v], flat[d_v:].reshape(k, d_v))


@dataclass
class Instance:
    id: str
    tokens: list[str]
    attributes: list[str]
    tags: list[str]
    image: ImageFeatures | None = None

    def to_json(self) -> dict:
        out = {"id": self.id, "tokens": self.tokens, "attributes": sorted(self.attributes), "tags": self.tags}
        if self.image is not None:
            out["image"] = self.image.to_json()
        return out


class TagScheme:
    """Bijection between L attribute labels and the 2L+1 BIO tags."""

    def __init__(self, labels: Sequence[str]):
        labels = list(labels)
        if len(set(labels)) != len(labels):
            raise DataError("duplicate attribute labels in scheme")
        self.labels = labels
        self.tags = ["O"] + [f"{p}-{lab}" for lab in labels for p in ("B", "I")]
        self.label_index = {lab: i for i, lab in enumerate(labels)}
        self.tag_index = {t: i for i, t in enumerate(self.tags)}

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, TagScheme) and self.labels == other.labels

    @property
    def num_tags(self) -> int:
        return len(self.tags)

    def b_index(self, label: str) -> int:
        return 1 + 2 * self.label_index[label]

    def i_index(self, label: str) -> int:
        return 2 + 2 * self.label_index[label]

    def encode_tags(self, tags: Sequence[str]) -> np.ndarray:
        return np.array([self.tag_index[t] for t in tags], dtype=np.int64)

    def decode_tags(self, ids: Iterable[int]) -> list[str]:
        return [self.tags[int(i)] for i in ids]

    def attribute_vector(self, attributes: Iterable[str]) -> np.ndarray:
        y = np.zeros(len(self.labels))
        for a in attributes:
            y[self.label_index[a]] = 1.0
        return y


class Vocabulary:
    """Token/id bijection with [PAD], [UNK], [CLS], [SEP] at ids 0-3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, 1)

    @classmethod
    def build(cls, instances: Iterable[Instance]) -> Vocabulary:
        vocab = cls()
        for inst in instances:
            for t in inst.tokens:
                vocab.add(t)
        return vocab

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> Vocabulary:
        if tuple(itos[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        return cls(itos[4:])


@dataclass
class Manifest:
    labels: list[str]
    d_v: int
    k: int
    max_len: int = DEFAULT_MAX_LEN
    splits: dict[str, str] = field(default_factory=dict)
    generator: dict | None = None
    root: Path | None = None

    @property
    def scheme(self) -> TagScheme:
        return TagScheme(self.labels)

    def to_json(self) -> dict:
        out = {"labels": self.labels, "d_v": self.d_v, "K": self.k, "max_len": self.max_len, "splits": self.splits}
        if self.generator is not None:
            out["generator"] = self.generator
        return out

    def split_path(self, name: str) -> Path:
        if name not in self.splits:
            raise DataError(f"manifest has no split {name!r}; available: {sorted(self.splits)}")
        return (self.root or Path(".")) / self.splits[name]


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        raw = json.loads(path.read_text())
        m = Manifest(
            labels=list(raw["labels"]),
            d_v=int(raw["d_v"]),
            k=int(raw["K"]),
            max_len=int(raw.get("max_len", DEFAULT_MAX_LEN)),
            splits=dict(raw.get("splits", {})),
            generator=raw.get("generator"),
            root=path.parent,
        )
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from None
    if m.k < 1 or m.d_v < 1:
        raise DataError(f"{path}: K and d_v must be positive")
    return m


def save_manifest(path: str | Path, manifest: Manifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# JSONL instances


def _parse_image(obj, base: Path, manifest: Manifest | None, where: str) -> ImageFeatures:
    if "ref" in obj:
        if manifest is None:
            raise DataError(f"{where}: feature-file reference needs a manifest for d_v and K")
        ref = Path(obj["ref"])
        ref = ref if ref.is_absolute() else base / ref
        try:
            return ImageFeatures.from_bytes(ref.read_bytes(), manifest.d_v, manifest.k)
        except OSError as exc:
            raise DataError(f"{where}: cannot read feature file {ref}: {exc}") from None
    return ImageFeatures(obj["global"], obj["regions"])


def parse_instance(obj: dict, scheme: TagScheme | None = None, *, require_gold: bool = True,
                   base: Path = Path("."), manifest: Manifest | None = None, where: str = "") -> Instance:
    try:
        tokens = [str(t) for t in obj["tokens"]]
        inst_id = str(obj.get("id", where))
        tags = [str(t) for t in obj["tags"]] if require_gold else [str(t) for t in obj.get("tags", ["O"] * len(tokens))]
        attributes = [str(a) for a in obj["attributes"]] if require_gold else [str(a) for a in obj.get("attributes", [])]
        image = _parse_image(obj["image"], base, manifest, where) if "image" in obj else None
    except KeyError as exc:
        raise DataError(f"{where}: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise DataError(f"{where}: {exc}") from None
        raise DataError(f"{where}: malformed instance ({exc})") from None
    if not tokens:
        raise DataError(f"{where}: empty token list")
    if len(tags) != len(tokens):
        raise DataError(f"{where}: {len(tags)} tags for {len(tokens)} tokens")
    if scheme is not None:
        for a in attributes:
            if a not in scheme.label_index:
                raise DataError(f"{where}: unknown attribute label {a!r}")
        for t in tags:
            if t not in scheme.tag_index:
                raise DataError(f"{where}: unknown tag {t!r}")
    if not derive_attributes(tags) <= set(attributes):
        extra = sorted(derive_attributes(tags) - set(attributes))
        raise DataError(f"{where}: tagged labels {extra} missing from attributes")
    if manifest is not None and image is not None and (image.k != manifest.k or image.d_v != manifest.d_v):
        raise DataError(
            f"{where}: image has K={image.k}, d_v={image.d_v}; manifest declares K={manifest.k}, d_v={manifest.d_v}"
        )
    return Instance(inst_id, tokens, attributes, tags, image)


def load_instances(path: str | Path, scheme: TagScheme | None = None, manifest: Manifest | None = None,
                   require_gold: bool = True) -> list[Instance]:
    """Read a JSONL file of instances, validating each line."""
    path = Path(path)
    if scheme is None and manifest is not None:
        scheme = manifest.scheme
    out = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{path.name}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"{where}: expected a JSON object")
        out.append(parse_instance(obj, scheme, require_gold=require_gold, base=path.parent,
                                  manifest=manifest, where=where))
    return out


def save_instances(path: str | Path, instances: Iterable[Instance]) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# encoding and the span codec


@dataclass
class Encoded:
    ids: np.ndarray  # [max_len + 2]
    mask: np.ndarray  # real positions including [CLS]/[SEP]
    n_tokens: int  # tokens kept after truncation
    tags: list[str]  # gold tags for the kept tokens


def encode(instance: Instance, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> Encoded:
    """[CLS] t1..tn [SEP] [PAD]...; always max_len + 2 ids long."""
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    if not instance.tokens:
        raise DataError(f"instance {instance.id}: empty token list")
    toks = instance.tokens[:max_len]
    n = len(toks)
    ids = np.zeros(max_len + 2, dtype=np.int64)
    ids[0] = vocab[CLS]
    ids[1:n + 1] = [vocab[t] for t in toks]
    ids[n + 1] = vocab[SEP]
    mask = np.zeros(max_len + 2, dtype=bool)
    mask[:n + 2] = True
    return Encoded(ids, mask, n, list(instance.tags[:max_len]))


def _split_tag(tag: str) -> tuple[str, str | None]:
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
        return tag[0], tag[2:]
    return "O", None


def tags_to_spans(tags: Sequence[str]) -> set[Span]:
    """Maximal BIO spans as (start, end_exclusive, label).

    An I- tag that does not continue a span of the same label opens a new
    span, as if it were a B- tag.  Unknown tag strings read as O.
    """
    spans = set()
    start, label = None, None
    for i, tag in enumerate(tags):
        prefix, lab = _split_tag(tag)
        if prefix == "I" and label == lab:
            continue
        if label is not None:
            spans.add((start, i, label))
        start, label = (i, lab) if prefix != "O" else (None, None)
    if label is not None:
        spans.add((start, len(tags), label))
    return spans


def spans_to_tags(spans: Iterable[Span], length: int) -> list[str]:
    tags = ["O"] * length
    taken = [False] * length
    for start, end, label in sorted(spans):
        if not 0 <= start < end <= length:
            raise ValueError(f"span {(start, end, label)} outside [0, {length})")
        if any(taken[start:end]):
            raise ValueError(f"span {(start, end, label)} overlaps another span")
        tags[start] = f"B-{label}"
        for i in range(start + 1, end):
            tags[i] = f"I-{label}"
        taken[start:end] = [True] * (end - start)
    return tags


def derive_attributes(tags: Sequence[str]) -> set[str]:
    return {label for _, _, label in tags_to_spans(tags)}


# ---------------------------------------------------------------------------
# synthetic data

_OPENERS = ["this", "the", "our", "a", "new", "classic"]
_NOUNS = ["shirt", "dress", "coat", "jacket", "skirt", "pants", "bag", "shoes", "boots", "sweater"]
_CONNECTORS = ["with", "in", "featuring", "and", "plus", "of", "has"]
_FILLERS = ["for", "daily", "wear", "nice", "soft", "style", "sale", "hot", "season", "fit", "look", "great"]
_SYLLABLES = ["ka", "lo", "mi", "ren", "tu", "sa", "vel", "dor", "pi", "qua", "zen", "bo", "lu", "mar", "ti",
              "nox", "ge", "ra", "fen", "sul", "o", "pra", "ki", "del"]


@dataclass
class SynthConfig:
    labels: int = 8
    values_per_label: int = 6
    ambiguity: float = 0.3
    ambiguous_phrases: int = 4
    d_v: int = 32
    k: int = 9
    noise: float = 0.1
    background: float = 0.5
    min_values: int = 1
    max_values: int = 3
    max_len: int = DEFAULT_MAX_LEN
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def label_names(self) -> list[str]:
        names = list(DEFAULT_LABELS[: self.labels])
        names += [f"Attr{i}" for i in range(len(names), self.labels)]
        return names

    def validate(self) -> None:
        if self.labels < 2:
            raise DataError("synthetic data needs at least 2 labels")
        if self.k < 1 or self.d_v < 1:
            raise DataError(f"K and d_v must be positive (K={self.k}, d_v={self.d_v})")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise DataError(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        if not 1 <= self.min_values <= self.max_values:
            raise DataError("need 1 <= min_values <= max_values")
        if self.values_per_label < 2:
            raise DataError("values_per_label must be >= 2")


@dataclass
class Lexicon:
    """Value phrases per label, ambiguous phrases, and image prototypes."""

    values: dict[str, list[tuple[str, ...]]]
    ambiguous: list[tuple[tuple[str, ...], tuple[str, str]]]
    prototypes: dict[tuple[str, tuple[str, ...]], np.ndarray]


def _make_lexicon(cfg: SynthConfig, rng: np.random.Generator) -> Lexicon:
    used = set(_OPENERS + _NOUNS + _CONNECTORS + _FILLERS)

    def word():
        while True:
            w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))
            if w not in used:
                used.add(w)
                return w

    def phrase():
        return tuple(word() for _ in range(int(rng.integers(2, 4))))

    labels = cfg.label_names()
    values = {lab: [phrase() for _ in range(cfg.values_per_label)] for lab in labels}
    ambiguous = []
    if cfg.ambiguity > 0:
        for _ in range(cfg.ambiguous_phrases):
            pair = tuple(str(x) for x in rng.choice(labels, size=2, replace=False))
            ambiguous.append((phrase(), pair))
    protos = {}
    for lab in labels:
        for ph in values[lab]:
            protos[(lab, ph)] = rng.normal(size=cfg.d_v)
    for ph, pair in ambiguous:
        for lab in pair:
            protos[(lab, ph)] = rng.normal(size=cfg.d_v)
    return Lexicon(values, ambiguous, protos)


def _noise(rng, scale_of: np.ndarray, rel: float) -> np.ndarray:
    d = scale_of.shape[-1]
    return rng.normal(scale=rel * np.linalg.norm(scale_of) / np.sqrt(d), size=d)


def _generate_one(idx: str, cfg: SynthConfig, lex: Lexicon, rng: np.random.Generator) -> Instance:
    labels = cfg.label_names()
    n_values = int(rng.integers(cfg.min_values, min(cfg.max_values, cfg.k, len(labels)) + 1))
    chosen = [str(x) for x in rng.choice(labels, size=n_values, replace=False)]
    mentions = []  # (phrase, label or None for a distractor)
    for lab in chosen:
        mentions.append((lex.values[lab][int(rng.integers(len(lex.values[lab])))], lab))

    if lex.ambiguous and rng.random() < cfg.ambiguity:
        ph, pair = lex.ambiguous[int(rng.integers(len(lex.ambiguous)))]
        lab = pair[int(rng.integers(2))]
        # the ambiguous phrase is this instance's value for `lab`
        mentions = [m for m in mentions if m[1] != lab]
        mentions.append((ph, lab))
        if len(mentions) > min(cfg.max_values, cfg.k):
            mentions.pop(0)

    real = list(mentions)
    if rng.random() < cfg.ambiguity / 2:
        taken = {m[0] for m in mentions}
        while True:
            lab = labels[int(rng.integers(len(labels)))]
            ph = lex.values[lab][int(rng.integers(len(lex.values[lab])))]
            if ph not in taken:
                break
        mentions.append((ph, None))

    order = rng.permutation(len(mentions))
    tokens = [_OPENERS[int(rng.integers(len(_OPENERS)))], _NOUNS[int(rng.integers(len(_NOUNS)))]]
    tags = ["O", "O"]
    for j in order:
        ph, lab = mentions[j]
        tokens.append(_CONNECTORS[int(rng.integers(len(_CONNECTORS)))])
        tags.append("O")
        tokens.extend(ph)
        if lab is None:
            tags.extend(["O"] * len(ph))
        else:
            tags.extend([f"B-{lab}"] + [f"I-{lab}"] * (len(ph) - 1))
    for _ in range(int(rng.integers(0, 3))):
        tokens.append(_FILLERS[int(rng.integers(len(_FILLERS)))])
        tags.append("O")

    regions = rng.normal(scale=cfg.background, size=(cfg.k, cfg.d_v))
    slots = rng.choice(cfg.k, size=len(real), replace=False)
    for slot, (ph, lab) in zip(slots, real):
        p = lex.prototypes[(lab, ph)]
        regions[slot] = p + _noise(rng, p, cfg.noise)
    g = regions.mean(axis=0)
    g = g + _noise(rng, g, cfg.noise)
    attributes = sorted({lab for _, lab in real})
    return Instance(idx, tokens, attributes, tags, ImageFeatures(g, regions))


def generate_synthetic(n: int, seed: int, config: SynthConfig | None = None):
    """Build (train, valid, test) lists of vision-dependent product instances.

    A fraction ``ambiguity`` of instances carry a phrase shared by two labels
    whose image prototype alone says which label applies; half that fraction
    carry a distractor value phrase whose prototype is absent from the image
    and whose gold tag is O.
    """
    cfg = config or SynthConfig()
    cfg.validate()
    if n < 10:
        raise DataError(f"n={n} is too small to split into train/valid/test (need >= 10)")
    lex = _make_lexicon(cfg, np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 1])
    instances = [_generate_one(f"syn{seed}-{i:05d}", cfg, lex, rng) for i in range(n)]
    n_train = int(round(cfg.split[0] * n))
    n_valid = int(round(cfg.split[1] * n))
    if min(n_train, n_valid, n - n_train - n_valid) < 1:
        raise DataError(f"n={n} leaves an empty split")
    return instances[:n_train], instances[n_train:n_train + n_valid], instances[n_train + n_valid:]


def write_synthetic(out_dir: str | Path, n: int, seed: int, config: SynthConfig | None = None) -> Manifest:
    cfg = config or SynthConfig()
    train, valid, test = generate_synthetic(n, seed, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        save_instances(out / f"{name}.jsonl", part)
        splits[name] = f"{name}.jsonl"
    gen = asdict(cfg)
    gen["split"] = list(cfg.split)
    gen.update(n=n, seed=seed)
    manifest = Manifest(cfg.label_names(), cfg.d_v, cfg.k, cfg.max_len, splits, gen, out)
    save_manifest(out / "manifest.json", manifest)
    return manifest
