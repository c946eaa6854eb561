"""``harmnet`` command line: gen-synth, train, eval, predict, gradcheck."""

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (Report, Vocabulary, build_vocab, checksum, encode_batch, encode_tokens, gen_synthetic,
                   get_schema, load_jsonl, map_label, profile, save_jsonl, tokenize)
from .data.synthetic import PROFILES
from .errors import ConfigError, DataError, HarmnetError, IncompatibleModelError, InputError
from .io_utils import atomic_write_text
from .metrics import evaluate, per_category_report
from .model import VARIANTS, ModelConfig, build, load_checkpoint, save_checkpoint
from .model import loss as nll_loss
from .training import EncodedSet, TrainConfig, split_dataset, train

log = logging.getLogger("harmnet")

OUTPUT_ROOT_ENV = "HARMNET_OUTPUT_ROOT"
CONFIG_FILE = "config.txt"
VOCAB_FILE = "vocab.json"
CHECKPOINT_FILE = "model.ckpt"
HISTORY_FILE = "history.jsonl"
EVAL_FILE = "eval.json"

# run-level keys that belong to neither ModelConfig nor TrainConfig
_RUN_DEFAULTS = {
    "schema": "binary",
    "split_seed": 0,
    "stratify": True,
    "min_count": 1,
}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"vocab_size", "num_classes"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return json.loads(raw)
    except ValueError:
        pass
    if "," in raw:
        return [_parse_value(p) for p in raw.split(",") if p.strip()]
    return raw


def parse_config_text(text: str, source="<config>"):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def default_run_config():
    cfg = dict(_RUN_DEFAULTS)
    cfg.update({k: v for k, v in ModelConfig().to_dict().items() if k in _MODEL_KEYS})
    cfg.update(TrainConfig().to_dict())
    return cfg


def merge_run_config(file_values=None, overrides=None):
    """Defaults, then file values, then command-line overrides. Unknown keys are rejected."""
    cfg = default_run_config()
    for layer in (file_values or {}, overrides or {}):
        for k, v in layer.items():
            if k not in cfg:
                raise ConfigError(f"unknown config key {k!r}; valid keys: {', '.join(sorted(cfg))}")
            cfg[k] = v
    if isinstance(cfg["filter_widths"], int):
        cfg["filter_widths"] = [cfg["filter_widths"]]
    return cfg


def format_run_config(cfg) -> str:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


class _StagedDir:
    """Collect files in a sibling temp dir and move them into place only on success."""

    def __init__(self, target: Path):
        self.target = Path(target)

    def __enter__(self):
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.target.mkdir(parents=True, exist_ok=True)
                for f in sorted(self.tmp.iterdir()):
                    os.replace(f, self.target / f.name)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args):
    reports = gen_synthetic(profile(args.profile), args.count, args.seed)
    try:
        save_jsonl(reports, args.out)
    except OSError as e:
        raise DataError(f"cannot write {args.out}: {e.strerror or e}") from e
    counts = {}
    for r in reports:
        counts[r.severity] = counts.get(r.severity, 0) + 1
    harm = sum(counts.get(c, 0) for c in ("E", "F", "G", "H", "I"))
    summary = " ".join(f"{k}={counts[k]}" for k in sorted(counts))
    print(f"wrote {len(reports)} reports to {args.out} ({summary}; harm fraction {harm / max(1, len(reports)):.3f})")
    return 0


def _load_run_config(args):
    file_values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_values = parse_config_text(fh.read(), args.config)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = _parse_value(v)
    for key in ("variant", "schema", "seed", "max_epochs", "precision"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    return merge_run_config(file_values, overrides)


def cmd_train(args):
    cfg = _load_run_config(args)
    reports = load_jsonl(args.data)
    schema = get_schema(cfg["schema"])
    labels = [map_label(r.severity, schema) if r.severity is not None else None for r in reports]
    if any(l is None for l in labels):
        raise DataError(f"{args.data}: every training report needs a severity")
    if len(set(labels)) < 2:
        raise DataError(f"{args.data}: need at least 2 classes under schema {schema.name}")
    mcfg = ModelConfig.from_dict({k: cfg[k] for k in _MODEL_KEYS})
    tcfg = TrainConfig.from_dict({k: cfg[k] for k in _TRAIN_KEYS})
    tcfg.validate()

    tr, va, te = split_dataset(reports, seed=int(cfg["split_seed"]), stratify_by_label=bool(cfg["stratify"]),
                               labels=labels)
    vocab = build_vocab(tr, min_count=int(cfg["min_count"]))
    mcfg.vocab_size = len(vocab)
    mcfg.num_classes = schema.num_classes
    mcfg.validate()
    sets = [EncodedSet(*encode_batch(s, vocab, mcfg.n_max, schema)) for s in (tr, va, te)]

    out = Path(args.out) if args.out else _output_root() / f"{mcfg.variant}-seed{mcfg.seed}"
    model = build(mcfg)
    model, history = train(model, sets[0], sets[1], tcfg)

    pos = "harm" if "harm" in schema.class_names else None
    report = None
    if len(sets[2]):
        probs = model.predict_proba(sets[2].ids, sets[2].mask)
        report = evaluate(probs.argmax(axis=1), sets[2].labels, list(schema.class_names), probs, pos)

    echo = dict(cfg)
    echo["data"] = str(args.data)
    echo["data_checksum"] = checksum(reports)
    with _StagedDir(out) as stage:
        atomic_write_text(stage / CONFIG_FILE, format_run_config(echo))
        vocab.save(stage / VOCAB_FILE)
        save_checkpoint(model, stage / CHECKPOINT_FILE, vocab.content_hash, {"schema": schema.name})
        history.save(stage / HISTORY_FILE)
        if report is not None:
            atomic_write_text(stage / EVAL_FILE, report.to_json() + "\n")

    print(f"trained {mcfg.variant} for {len(history.epochs)} epochs "
          f"(chosen epoch {history.chosen_epoch}); split {len(tr)}/{len(va)}/{len(te)}; run dir {out}")
    if report is not None:
        print(report.to_table("test"))
    return 0


def _load_run(model_dir):
    d = Path(model_dir)
    ckpt = d / CHECKPOINT_FILE
    if not ckpt.exists():
        raise InputError(f"no checkpoint at {ckpt}")
    model, meta = load_checkpoint(ckpt)
    vocab = Vocabulary.load(d / VOCAB_FILE)
    if meta.get("vocab_hash") and meta["vocab_hash"] != vocab.content_hash:
        raise IncompatibleModelError(
            f"vocabulary hash {vocab.content_hash[:12]} does not match the checkpoint's "
            f"{meta['vocab_hash'][:12]}; the model cannot read this encoding")
    schema = get_schema(meta.get("extra", {}).get("schema", "binary"))
    if schema.num_classes != model.config.num_classes:
        raise IncompatibleModelError(
            f"schema {schema.name} has {schema.num_classes} classes but the model has {model.config.num_classes}")
    return model, vocab, schema


def cmd_eval(args):
    model, vocab, schema = _load_run(args.model)
    reports = load_jsonl(args.data)
    if not reports:
        raise DataError(f"{args.data} holds no reports")
    ids, mask, labels = encode_batch(reports, vocab, model.config.n_max, schema)
    probs = model.predict_proba(ids, mask)
    pred = probs.argmax(axis=1)
    names = list(schema.class_names)
    pos = "harm" if "harm" in names else None
    report = evaluate(pred, labels, names, probs, pos)
    if args.by_category:
        report.by_category = per_category_report([r.category for r in reports], pred, labels, names, probs, pos)
    if args.json_out:
        atomic_write_text(args.json_out, report.to_json() + "\n")
    if args.json:
        print(report.to_json())
    else:
        print(report.to_table())
    return 0


def token_attention(alpha_pooled, n_tokens, window):
    """Spread each pooled position's weight evenly over the real tokens it covers."""
    out = np.zeros(n_tokens)
    for j, a in enumerate(np.asarray(alpha_pooled)):
        lo, hi = j * window, min((j + 1) * window, n_tokens)
        if hi > lo:
            out[lo:hi] = a / (hi - lo)
    return out


def cmd_predict(args):
    model, vocab, schema = _load_run(args.model)
    if args.text is not None:
        reports = [Report(args.text)]
    else:
        reports = load_jsonl(args.data)
    cfg = model.config
    results = []
    for i, r in enumerate(reports):
        toks = tokenize(r.text)
        if not toks:
            raise InputError(f"input {i} is empty after tokenization")
        ids, mask = encode_tokens(toks, vocab, cfg.n_max)
        pred = model.predict(ids[None, :], mask[None, :])[0]
        kept = toks[:cfg.n_max]
        item = {
            "label": schema.class_names[pred.label],
            "probs": {n: float(p) for n, p in zip(schema.class_names, pred.probs)},
        }
        if pred.attention is not None:
            window = cfg.pool_window if cfg.uses_cnn else 1
            alpha = token_attention(pred.attention, len(kept), window)
            item["attention"] = [[t, float(a)] for t, a in zip(kept, alpha)]
        results.append(item)
    if args.json:
        print(json.dumps(results if args.data else results[0], indent=2))
        return 0
    for item in results:
        probs = " ".join(f"{n}={p!r}" for n, p in item["probs"].items())
        print(f"{item['label']}\t{probs}")
        if "attention" in item:
            print("  " + " ".join(f"{t}:{a!r}" for t, a in item["attention"]))
    return 0


def gradcheck_variant(variant: str, seed: int = 0, epsilon: float = 1e-4):
    """Return ``(max rel err, per-parameter errors)`` on the tiny 64-bit config."""
    cfg = ModelConfig(variant=variant, vocab_size=30, num_classes=3, embed_dim=8, n_max=12,
                      filter_widths=[2, 3], channels=4, hidden_size=8, dropout_rate=0.0,
                      seed=seed, precision="float64")
    model = build(cfg).eval()
    rng = np.random.default_rng([seed, 7])
    # zero-initialised biases put padded positions exactly on the ReLU kink,
    # where a central difference sees half a slope; probe a generic point
    for name, p in sorted(model.parameters().items()):
        if name.split(".")[-1].startswith("b"):
            p.data += rng.uniform(-0.05, 0.05, size=p.shape)
    ids = rng.integers(2, cfg.vocab_size, size=(2, cfg.n_max))
    ids[1, 7:] = 0  # second report is short
    mask = ids != 0
    labels = rng.integers(0, cfg.num_classes, size=2)
    errs = ad.finite_diff_errors(lambda: nll_loss(model.forward(ids, mask), labels), model.parameters(),
                                 epsilon, model.frozen_coordinates())
    return max(errs.values()), errs


def cmd_gradcheck(args):
    variants = VARIANTS if args.variant == "all" else [args.variant]
    failed = False
    for v in variants:
        worst, errs = gradcheck_variant(v, args.seed, args.epsilon)
        name = max(errs, key=errs.get)
        ok = worst < args.threshold
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {v}: max relative error {worst:.3e} (worst parameter {name})")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="harmnet", description="Harm-event classifiers for incident narratives.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic JSONL corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--profile", choices=PROFILES, default="ds1_like")
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="split, train with early stopping, evaluate on the test split")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--schema", choices=("binary", "four_level", "full"))
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--out", help=f"run directory (default ${OUTPUT_ROOT_ENV}/<variant>-seed<seed>)")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--precision", choices=("float32", "float64"))
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a trained run on a labeled JSONL file")
    e.add_argument("--model", required=True, help="run directory")
    e.add_argument("--data", required=True)
    e.add_argument("--by-category", action="store_true")
    e.add_argument("--json", action="store_true", help="print JSON instead of a table")
    e.add_argument("--json-out", help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="classify text, with attention weights for att_* variants")
    pr.add_argument("--model", required=True, help="run directory")
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--text")
    src.add_argument("--data")
    pr.add_argument("--json", action="store_true")
    pr.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference check of a tiny 64-bit model")
    gc.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--epsilon", type=float, default=1e-4)
    gc.add_argument("--threshold", type=float, default=1e-3)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (HarmnetError, OSError, json.JSONDecodeError) as e:
        mod = getattr(type(e), "__module__", "harmnet")
        if not mod.startswith("harmnet"):
            mod = "harmnet"
        where = _error_origin(e) or mod
        print(f"{where}: error: {e}", file=sys.stderr)
        return 2


def _error_origin(exc):
    """Module of the innermost harmnet frame that raised ``exc``."""
    tb = exc.__traceback__
    origin = None
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("harmnet"):
            origin = name
        tb = tb.tb_next
    return origin


if __name__ == "__main__":
    sys.exit(main())
