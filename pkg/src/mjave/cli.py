"""Command-line entry point: ``mjave {synth,train,eval,awareness,predict,inspect}``.

Exit codes: 0 success, 2 usage error, 3 data or contract error, 4 numeric
divergence during training.  Set ``MJAVE_LOG`` (e.g. ``DEBUG``) for more
logging on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dataio import DataError, Manifest, SynthConfig, load_instances, load_manifest, tags_to_spans, write_synthetic
from .evaluation import UPPER_BOUND_MODES, awareness, evaluate, inspect_gates, predict, upper_bound_eval
from .model import AblationConfig, MJAVE, SeparateModels, load_checkpoint, save_checkpoint, save_separate
from .numerics import NumericalError
from .training import TrainConfig, train

log = logging.getLogger("mjave")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class UsageError(Exception):
    pass


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def parse_ablation(text: str | None) -> dict[str, bool]:
    """Parse ``key=val,...`` into ablation switches; unknown keys list the valid ones."""
    if not text:
        return {}
    valid = AblationConfig.keys()
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        key, sep, val = item.partition("=")
        key = key.strip()
        if not sep or key not in valid:
            raise UsageError(f"invalid ablation entry {item!r}; valid keys: {', '.join(valid)}")
        val = val.strip().lower()
        if val not in ("true", "false", "1", "0"):
            raise UsageError(f"ablation {key} must be true or false, got {val!r}")
        out[key] = val in ("true", "1")
    return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = SynthConfig(labels=args.labels, ambiguity=args.ambiguity, d_v=args.dv, k=args.k)
    manifest = write_synthetic(args.out, args.n, args.seed, cfg)
    log.info("wrote %d instances to %s", args.n, args.out)
    print(json.dumps({"out": str(args.out), "splits": manifest.splits, "labels": manifest.labels}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TRAIN_FLAGS = {
    "lam": float, "lr": float, "batch_size": int, "epochs": int, "seed": int, "train_fraction": float,
    "d": int, "layers": int, "ff": int, "d_a": int, "dtype": str, "patience": int,
}


def resolve_train_config(args) -> TrainConfig:
    """Merge the optional config file with flags; flags win."""
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(_existing(args.config, "config file").read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: malformed JSON ({exc.msg})") from None
        raw = dict(raw.get("train", raw))
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; valid keys: {', '.join(sorted(known))}")
    for name in _TRAIN_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            raw[name] = val
    ablation = dict(raw.get("ablation") or {})
    bad = sorted(set(ablation) - set(AblationConfig.keys()))
    if bad:
        raise UsageError(f"unknown ablation keys {bad}; valid keys: {', '.join(AblationConfig.keys())}")
    ablation.update(parse_ablation(args.ablation))
    raw["ablation"] = AblationConfig(**ablation)
    try:
        return TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _save_model(path: Path, model, extra: dict) -> None:
    if isinstance(model, SeparateModels):
        save_separate(path, model, extra)
    else:
        save_checkpoint(path, model, extra)


def cmd_train(args) -> int:
    manifest = load_manifest(_existing(args.data, "dataset"))
    cfg = resolve_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"data": str(Path(args.data).resolve()), "seeds": args.seeds, "train": cfg.to_json()}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    scheme = manifest.scheme
    train_set = load_instances(manifest.split_path("train"), scheme, manifest)
    valid_set = load_instances(manifest.split_path("valid"), scheme, manifest) if "valid" in manifest.splits else []
    test_set = load_instances(manifest.split_path("test"), scheme, manifest) if "test" in manifest.splits else []

    runs = []
    for i in range(args.seeds):
        seed = cfg.seed + i
        run_cfg = TrainConfig(**{**cfg.to_json(), "seed": seed, "ablation": cfg.ablation})
        run_dir = out if args.seeds == 1 else out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        log.info("training seed %d into %s", seed, run_dir)
        result = train(train_set, valid_set, manifest, run_cfg, log_path=run_dir / "metrics.jsonl")
        _save_model(run_dir / "checkpoint", result.model, {"seed": seed, "best_epoch": result.best_epoch})
        entry = {"seed": seed, "best_epoch": result.best_epoch}
        if test_set:
            rep = evaluate(result.model, test_set)
            entry["test"] = rep.to_json()
            _write_json(rep.to_json(), str(run_dir / "report.json"))
        runs.append(entry)

    summary: dict = {"runs": runs}
    if test_set:
        for task in ("attribute", "value"):
            f1s = np.array([r["test"][task]["f1"] for r in runs])
            summary[f"{task}_f1"] = {"mean": float(f1s.mean()),
                                     "std": float(f1s.std(ddof=1)) if len(f1s) > 1 else 0.0}
    _write_json(summary, str(out / "summary.json"))
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluation commands


def _load_model(path: str):
    return load_checkpoint(_existing(path, "checkpoint"))


def _load_split(data: str, split: str, model) -> list:
    """Read a split from a dataset directory/manifest, or a JSONL file directly."""
    p = _existing(data, "dataset")
    if p.suffix == ".jsonl":
        cfg = model.config
        manifest = Manifest(list(cfg.labels), cfg.d_v, cfg.k, cfg.max_len, root=p.parent)
        return load_instances(p, manifest.scheme, manifest)
    manifest = load_manifest(p)
    if list(manifest.labels) != list(model.scheme.labels):
        raise DataError(f"checkpoint labels {model.scheme.labels} do not match dataset labels {manifest.labels}")
    if manifest.k != model.config.k or manifest.d_v != model.config.d_v:
        raise DataError(f"checkpoint expects K={model.config.k}, d_v={model.config.d_v}; "
                        f"dataset has K={manifest.k}, d_v={manifest.d_v}")
    return load_instances(manifest.split_path(split), manifest.scheme, manifest)


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_split(args.data, args.split, model)
    if not data:
        raise DataError("evaluation set is empty")
    if args.upper_bound:
        rep = upper_bound_eval(model, data, args.upper_bound)
        obj = {"standard": evaluate(model, data).to_json(), "upper_bound": rep.to_json()}
    else:
        obj = evaluate(model, data).to_json()
    _write_json(obj, args.out)
    return EXIT_OK


def cmd_awareness(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_split(args.data, args.split, model)
    rep = awareness(model, data, permutations=args.permutations, seed=args.seed)
    _write_json(rep.to_json(), args.out)
    return EXIT_OK


def prediction_records(model, instances) -> list[dict]:
    """One JSON-ready record per instance: scored attributes and value spans."""
    if not instances:
        return []
    preds = predict(model, instances)
    labels = model.scheme.labels
    out = []
    for inst, probs, attrs, tags in zip(instances, preds.attr_probs, preds.attributes, preds.tags):
        spans = sorted(tags_to_spans(tags))
        out.append({
            "id": inst.id,
            "attributes": [{"label": lab, "score": float(p)} for lab, p in zip(labels, probs) if lab in attrs],
            "scores": {lab: float(p) for lab, p in zip(labels, probs)},
            "values": [{"label": lab, "start": s, "end": e, "text": " ".join(inst.tokens[s:e])}
                       for s, e, lab in spans],
            "tags": tags,
        })
    return out


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    src = _existing(args.input, "input file")
    cfg = model.config
    manifest = Manifest(list(cfg.labels), cfg.d_v, cfg.k, cfg.max_len, root=src.parent)
    instances = load_instances(src, manifest.scheme, manifest, require_gold=False)
    missing = [i.id for i in instances if i.image is None]
    if missing:
        raise DataError(f"instances without image features: {missing[:5]}")
    lines = [json.dumps(r, separators=(",", ":")) for r in prediction_records(model, instances)]
    text = "".join(line + "\n" for line in lines)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_split(args.data, args.split, model)
    found = [i for i in data if i.id == args.instance_id]
    if not found:
        raise DataError(f"instance {args.instance_id!r} not in {args.data}")
    dump = inspect_gates(model, found[0])
    dump.write(args.out)
    print(json.dumps({"out": str(args.out), "tokens": len(dump.tokens), "regions": len(dump.g_regional)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _positive(kind):
    def check(text):
        val = kind(text)
        if val < 1:
            raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
        return val
    return check


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mjave", description="Multimodal attribute and value extraction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic vision-dependent dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", type=_positive(int), default=8)
    p.add_argument("--ambiguity", type=float, default=0.3)
    p.add_argument("--dv", type=_positive(int), default=32)
    p.add_argument("--k", type=_positive(int), default=9)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint, metrics and resolved config")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of training settings; flags override it")
    p.add_argument("--ablation", help=f"comma list of key=true|false over: {', '.join(AblationConfig.keys())}")
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--seeds", type=_positive(int), default=1, help="number of consecutive seeds to run")
    for name, kind in _TRAIN_FLAGS.items():
        if name != "train_fraction":
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    p.set_defaults(func=cmd_train)

    def eval_common(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="dataset directory, manifest.json, or JSONL file")
        p.add_argument("--split", default="test")
        p.add_argument("--out", help="output path (default stdout)")

    p = sub.add_parser("eval", help="F1 report for a checkpoint")
    eval_common(p)
    p.add_argument("--upper-bound", dest="upper_bound", choices=UPPER_BOUND_MODES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("awareness", help="F1 drop under mismatched images")
    eval_common(p)
    p.add_argument("--permutations", type=_positive(int), default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_awareness)

    p = sub.add_parser("predict", help="predict attributes and value spans for unlabeled JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="output JSONL (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="dump gate values for one instance as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--instance-id", dest="instance_id", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("MJAVE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mjave: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"mjave: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ValueError) as exc:
        print(f"mjave: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
