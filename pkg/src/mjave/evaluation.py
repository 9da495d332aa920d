"""Span and attribute F1, image-awareness evaluation, upper bounds and gate dumps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .dataio import Instance, tags_to_spans
from .model import AblationConfig

THRESHOLD = 0.5
UPPER_BOUND_MODES = ("attr_given_gold_values", "value_given_gold_attrs")


def _prf(tp: int, fp: int, fn: int) -> dict:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f, "tp": tp, "fp": fp, "fn": fn}


def _micro(pred_sets: Sequence[set], gold_sets: Sequence[set], label_of) -> dict:
    tp = fp = fn = 0
    per: dict[str, list[int]] = {}
    for pred, gold in zip(pred_sets, gold_sets):
        for item in pred | gold:
            c = per.setdefault(label_of(item), [0, 0, 0])
            if item in pred and item in gold:
                tp += 1
                c[0] += 1
            elif item in pred:
                fp += 1
                c[1] += 1
            else:
                fn += 1
                c[2] += 1
    out = _prf(tp, fp, fn)
    out["per_label"] = {lab: _prf(*per[lab]) for lab in sorted(per)}
    return out


def f1_attributes(pred_sets: Sequence[Iterable[str]], gold_sets: Sequence[Iterable[str]]) -> dict:
    """Micro P/R/F1 over (instance, label) positives."""
    if not gold_sets:
        raise ValueError("f1_attributes: empty dataset")
    if len(pred_sets) != len(gold_sets):
        raise ValueError(f"{len(pred_sets)} predictions for {len(gold_sets)} gold instances")
    return _micro([set(p) for p in pred_sets], [set(g) for g in gold_sets], lambda x: x)


def f1_values(pred_tags: Sequence[Sequence[str]], gold_tags: Sequence[Sequence[str]]) -> dict:
    """Exact-match span micro P/R/F1; a span scores only if start, end and label agree."""
    if len(pred_tags) != len(gold_tags):
        raise ValueError(f"{len(pred_tags)} predicted sequences for {len(gold_tags)} gold sequences")
    for i, (p, g) in enumerate(zip(pred_tags, gold_tags)):
        if len(p) != len(g):
            raise ValueError(f"sequence {i}: {len(p)} predicted tags for {len(g)} gold tags")
    return _micro([tags_to_spans(p) for p in pred_tags], [tags_to_spans(g) for g in gold_tags], lambda s: s[2])


def instance_f1(pred: set, gold: set) -> float:
    """F1 of one instance; an instance with nothing to find and nothing found scores 1."""
    if not pred and not gold:
        return 1.0
    return _prf(len(pred & gold), len(pred - gold), len(gold - pred))["f1"]


# ---------------------------------------------------------------------------
# running a model


@dataclass
class Predictions:
    attr_probs: np.ndarray  # [n, L]
    attributes: list[set[str]]
    tags: list[list[str]]
    g_global: list[np.ndarray] = field(default_factory=list)
    g_regional: list[np.ndarray] = field(default_factory=list)
    alpha_v: list[np.ndarray] = field(default_factory=list)


def predict(model, instances: Sequence[Instance], ablation: AblationConfig | None = None,
            batch_size: int = 64, gate_override: dict | None = None, keep_maps: bool = False) -> Predictions:
    """Threshold attributes at 0.5 and argmax-decode tags for every instance.

    Tokens cut off by ``max_len`` are predicted as O.
    """
    scheme = model.scheme
    probs, attrs, tags = [], [], []
    gg, gr, av = [], [], []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        batch = model.batch(chunk)
        out = model.forward(batch, ablation, gate_override)
        p = out.attr.data.astype(np.float64)
        best = out.values.data.argmax(axis=-1)
        for row, inst in enumerate(chunk):
            n = batch.n_tokens[row]
            probs.append(p[row])
            attrs.append({lab for lab, q in zip(scheme.labels, p[row]) if q > THRESHOLD})
            tags.append(scheme.decode_tags(best[row, 1:n + 1]) + ["O"] * (len(inst.tokens) - n))
            if keep_maps:
                gg.append(out.g_global.data[row, :n + 2, 0].copy())
                gr.append(out.g_regional.data[row, :, 0].copy())
                av.append(out.alpha_v.data[row, :n + 2].copy())
    return Predictions(np.array(probs).reshape(len(instances), len(scheme)), attrs, tags, gg, gr, av)


@dataclass
class MetricsReport:
    attribute: dict
    value: dict
    n: int
    mode: str = "standard"

    def to_json(self) -> dict:
        return asdict(self)


def report_from(preds: Predictions, instances: Sequence[Instance], mode: str = "standard") -> MetricsReport:
    return MetricsReport(
        attribute=f1_attributes(preds.attributes, [set(i.attributes) for i in instances]),
        value=f1_values(preds.tags, [i.tags for i in instances]),
        n=len(instances),
        mode=mode,
    )


def evaluate(model, instances: Sequence[Instance], ablation: AblationConfig | None = None) -> MetricsReport:
    return report_from(predict(model, instances, ablation), instances)


def upper_bound_eval(model, instances: Sequence[Instance], mode: str) -> MetricsReport:
    """Feed one task's gold labels into the cross-task pathway; score the other.

    ``value_given_gold_attrs`` replaces the predicted attribute vector by the
    gold one wherever the value head consumes it; attributes then score 1.0.
    ``attr_given_gold_values`` reads values as gold (score 1.0) and reports
    the model's attribute prediction, which at inference time does not
    depend on the value->attribute mapping (that pathway acts through the
    training loss; train with ``teacher_force_values`` for the full bound).
    """
    if mode not in UPPER_BOUND_MODES:
        raise ValueError(f"unknown upper-bound mode {mode!r}; choose from {UPPER_BOUND_MODES}")
    gold_attrs = [set(i.attributes) for i in instances]
    gold_tags = [i.tags for i in instances]
    if mode == "value_given_gold_attrs":
        preds = predict(model, instances, model.ablation.replace(teacher_force_attributes=True))
        return MetricsReport(f1_attributes(gold_attrs, gold_attrs), f1_values(preds.tags, gold_tags),
                             len(instances), mode)
    preds = predict(model, instances)
    return MetricsReport(f1_attributes(preds.attributes, gold_attrs), f1_values(gold_tags, gold_tags),
                         len(instances), mode)


# ---------------------------------------------------------------------------
# image awareness


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of range(n) with no fixed point (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 elements")
    while True:
        perm = rng.permutation(n)
        if not (perm == np.arange(n)).any():
            return perm


def with_images_from(instances: Sequence[Instance], perm: Sequence[int]) -> list[Instance]:
    return [Instance(inst.id, inst.tokens, inst.attributes, inst.tags, instances[j].image)
            for inst, j in zip(instances, perm)]


@dataclass
class AwarenessReport:
    permutations: int
    congruent: dict  # corpus-level F1 per subtask
    incongruent: dict  # per subtask: per-permutation F1 list, mean, std
    delta: dict  # per subtask: per-permutation delta list, mean, std
    significance: dict  # per subtask: per-permutation p values, Fisher chi2, combined p

    def to_json(self) -> dict:
        return asdict(self)


def _paired_p(congruent: np.ndarray, incongruent: np.ndarray, rng: np.random.Generator,
              n_resamples: int) -> float:
    diff = congruent - incongruent
    if not diff.any():
        return 1.0
    res = stats.permutation_test((diff,), np.mean, permutation_type="samples", alternative="greater",
                                 n_resamples=n_resamples, vectorized=True, random_state=rng)
    return float(res.pvalue)


def awareness(model, instances: Sequence[Instance], permutations: int = 8, seed: int = 0,
              n_resamples: int = 9999, perm_hook=None) -> AwarenessReport:
    """Per-instance F1 drop when each image is swapped for another instance's.

    Each of ``permutations`` runs draws a seeded derangement of the images
    (``perm_hook(n, rng)`` may replace it, e.g. with the identity in tests).
    Per run, a one-sided paired sign-flip permutation test compares
    congruent and incongruent per-instance F1; the run p values are combined
    with Fisher's method.
    """
    if len(instances) < 2:
        raise ValueError("awareness needs at least 2 instances to swap images")
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    rng = np.random.default_rng([seed, 29])
    make_perm = perm_hook or derangement

    gold_attrs = [set(i.attributes) for i in instances]
    gold_spans = [tags_to_spans(i.tags) for i in instances]
    base = predict(model, instances)

    def per_instance(preds: Predictions):
        a = np.array([instance_f1(p, g) for p, g in zip(preds.attributes, gold_attrs)])
        v = np.array([instance_f1(tags_to_spans(t), g) for t, g in zip(preds.tags, gold_spans)])
        return {"attribute": a, "value": v}

    c_inst = per_instance(base)
    congruent = {"attribute": f1_attributes(base.attributes, gold_attrs)["f1"],
                 "value": f1_values(base.tags, [i.tags for i in instances])["f1"]}
    inc_f1 = {"attribute": [], "value": []}
    deltas = {"attribute": [], "value": []}
    pvals = {"attribute": [], "value": []}
    for _ in range(permutations):
        perm = make_perm(len(instances), rng)
        preds = predict(model, with_images_from(instances, perm))
        i_inst = per_instance(preds)
        inc_f1["attribute"].append(f1_attributes(preds.attributes, gold_attrs)["f1"])
        inc_f1["value"].append(f1_values(preds.tags, [i.tags for i in instances])["f1"])
        for task in ("attribute", "value"):
            deltas[task].append(float(np.mean(c_inst[task] - i_inst[task])))
            pvals[task].append(_paired_p(c_inst[task], i_inst[task], rng, n_resamples))

    def summary(xs):
        arr = np.array(xs)
        return {"runs": xs, "mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if len(xs) > 1 else 0.0}

    significance = {}
    for task in ("attribute", "value"):
        chi2, p = stats.combine_pvalues(pvals[task], method="fisher")
        significance[task] = {"p_values": pvals[task], "fisher_chi2": float(chi2), "p": float(p)}
    return AwarenessReport(
        permutations=permutations,
        congruent=congruent,
        incongruent={t: summary(inc_f1[t]) for t in inc_f1},
        delta={t: summary(deltas[t]) for t in deltas},
        significance=significance,
    )


# ---------------------------------------------------------------------------
# gate inspection


@dataclass
class GateDump:
    instance_id: str
    tokens: list[str]  # including [CLS] and [SEP]
    g_global: list[float]
    g_regional: list[float]
    alpha_v: list[list[float]]

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "global_gates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["token", "g_global"])
            w.writerows(zip(self.tokens, (repr(g) for g in self.g_global)))
        with open(out / "regional_gates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region", "g_regional"])
            w.writerows((k, repr(g)) for k, g in enumerate(self.g_regional))
        (out / "gates.json").write_text(json.dumps(self.to_json(), indent=1) + "\n")


def inspect_gates(model, instance: Instance) -> GateDump:
    preds = predict(model, [instance], keep_maps=True)
    n = len(preds.g_global[0]) - 2
    tokens = ["[CLS]"] + list(instance.tokens[:n]) + ["[SEP]"]
    return GateDump(instance.id, tokens, [float(x) for x in preds.g_global[0]],
                    [float(x) for x in preds.g_regional[0]], preds.alpha_v[0].tolist())
