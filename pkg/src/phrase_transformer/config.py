"""``key = value`` run configuration: key inventory, parsing and validation.

Every key is also a ``--kebab-case`` command-line flag of ``prt train``;
flags override file values.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean (true/false), got {text!r}")


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: object
    help: str
    choices: tuple = ()

    def parse(self, text):
        if self.kind is bool:
            value = parse_bool(text)
        elif self.kind is str:
            value = str(text).strip()
        else:
            value = self.kind(str(text).strip())
        if self.choices and value not in self.choices:
            raise ValueError(f"expected one of {', '.join(map(str, self.choices))}, got {value!r}")
        return value

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


KEYS = [
    # data
    Key("train_src", str, "", "source side of the training corpus (one tokenized sentence per line)"),
    Key("train_tgt", str, "", "target side of the training corpus, line-aligned with train_src"),
    Key("train_trees", str, "", "bracketed parse trees of train_src, one per line (tree segmentation)"),
    Key("max_len", int, 256, "drop pairs with a side longer than this many tokens"),
    Key("src_vocab_size", int, 0, "cap on the source vocabulary incl. reserved tokens (0: no cap)"),
    Key("tgt_vocab_size", int, 0, "cap on the target vocabulary incl. reserved tokens (0: no cap)"),
    # model
    Key("d_model", int, 64, "model width"),
    Key("d_ffn", int, 256, "feed-forward inner width"),
    Key("n_heads", int, 4, "attention heads (d_model must be divisible)"),
    Key("enc_layers", int, 2, "encoder depth"),
    Key("dec_layers", int, 2, "decoder depth"),
    Key("dropout", float, 0.1, "residual, embedding and feed-forward dropout"),
    Key("attention_dropout", float, 0.0, "dropout on attention weights"),
    Key("max_positions", int, 260, "longest sequence the position table covers"),
    Key("pr", bool, True, "insert phrase representations (false: baseline Transformer)"),
    Key("phrase_attention", bool, True, "attentive token weighting inside phrases (false: pooled summary only)"),
    Key("ta", bool, True, "mix phrase levels per decoder layer (false: last encoder level only)"),
    Key("glance", str, "max", "pooling that summarizes a phrase", ("mean", "max")),
    Key("segmentation", str, "ngram", "phrase segmentation", ("ngram", "tree")),
    Key("strict_budget", bool, False, "tree extraction restarts the token budget after the first subtree"),
    Key("tie_classifier", bool, True, "share the target embedding with the output classifier"),
    Key("learned_positions", bool, False, "trainable position table instead of sinusoids"),
    Key("scorer_hidden", int, 0, "inner width of the phrase token scorer (0: d_model)"),
    Key("ta_levels", str, "io", "phrase levels: embedding plus every layer output (io) or layer inputs only", ("io", "inputs")),
    # optimization
    Key("warmup", int, 400, "learning-rate warm-up steps"),
    Key("lr_scale", float, 1.0, "multiplier on the inverse-square-root schedule"),
    Key("tokens_per_batch", int, 1024, "minimum target tokens per optimizer update"),
    Key("accumulation", int, 1, "micro-batches per update (micro-batch holds tokens_per_batch/accumulation)"),
    Key("label_smoothing", float, 0.1, "label smoothing"),
    Key("steps", int, 2000, "optimizer updates"),
    Key("checkpoint_interval", int, 500, "save a checkpoint every this many steps"),
    Key("seed", int, 1, "seed for initialization, shuffling and dropout"),
    Key("log_interval", int, 50, "log metrics every this many steps (0: never)"),
    Key("deterministic", bool, False, "serial batch preparation"),
    Key("out_dir", str, "run", "directory for checkpoints, metrics.csv and manifest.json"),
]
KEY_BY_NAME = {k.name: k for k in KEYS}


def defaults():
    return {k.name: k.default for k in KEYS}


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment. Collects every error."""
    values, errors = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        name, value = (s.strip() for s in line.split("=", 1))
        key = KEY_BY_NAME.get(name)
        if key is None:
            errors.append(f"{source}:{lineno}: unknown key {name!r}")
            continue
        try:
            values[name] = key.parse(value)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: {name}: {exc}")
    if errors:
        raise ConfigError(errors)
    return values


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    return parse_config_text(text, str(path))


def resolve(file_values, overrides):
    """Defaults, then file values, then overrides (already typed)."""
    out = defaults()
    out.update(file_values)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def model_config(values, src_vocab, tgt_vocab):
    return ModelConfig(
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        d_model=values["d_model"],
        d_ffn=values["d_ffn"],
        n_heads=values["n_heads"],
        enc_layers=values["enc_layers"],
        dec_layers=values["dec_layers"],
        dropout=values["dropout"],
        attention_dropout=values["attention_dropout"],
        max_positions=values["max_positions"],
        phrase_representation=values["pr"],
        phrase_attention=values["phrase_attention"],
        transparent_attention=values["ta"],
        glance=values["glance"],
        segmentation=values["segmentation"],
        strict_budget=values["strict_budget"],
        tie_target_classifier=values["tie_classifier"],
        learned_positions=values["learned_positions"],
        scorer_hidden=values["scorer_hidden"],
        ta_levels=values["ta_levels"],
    )


def train_config(values):
    return TrainConfig(
        warmup=values["warmup"],
        tokens_per_batch=values["tokens_per_batch"],
        accumulation=values["accumulation"],
        max_len=values["max_len"],
        label_smoothing=values["label_smoothing"],
        steps=values["steps"],
        checkpoint_interval=values["checkpoint_interval"],
        seed=values["seed"],
        lr_scale=values["lr_scale"],
        log_interval=values["log_interval"],
        deterministic=values["deterministic"],
    )


def validate(values):
    """Every problem with a resolved configuration, as a list of messages."""
    errs = []
    for name in ("train_src", "train_tgt"):
        path = values[name]
        if not path:
            errs.append(f"{name} is required")
        elif not os.path.isfile(path):
            errs.append(f"{name}: no such file {path!r}")
    if values["segmentation"] == "tree":
        if not values["train_trees"]:
            errs.append("segmentation = tree needs train_trees")
        elif not os.path.isfile(values["train_trees"]):
            errs.append(f"train_trees: no such file {values['train_trees']!r}")
    for name in ("warmup", "tokens_per_batch", "accumulation", "steps", "max_len"):
        if values[name] < 1:
            errs.append(f"{name} must be >= 1")
    if values["checkpoint_interval"] < 0:
        errs.append("checkpoint_interval must be >= 0")
    if not 0.0 <= values["label_smoothing"] < 1.0:
        errs.append("label_smoothing must be in [0, 1)")
    if values["lr_scale"] <= 0:
        errs.append("lr_scale must be positive")
    if not 0.0 <= values["attention_dropout"] < 1.0:
        errs.append("attention_dropout must be in [0, 1)")
    probe = model_config(values, 10, 10)
    errs += [e for e in probe.errors() if "vocabular" not in e]
    if values["max_len"] + 2 > values["max_positions"]:
        errs.append("max_positions must exceed max_len + 1 (BOS/EOS)")
    return errs
