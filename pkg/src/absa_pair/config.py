"""Pipeline configuration file, digests and run manifests.

The config file is JSON. Every key is optional::

    {
      "corpus": {"path": "reviews.jsonl", "format": "canonical-jsonl"},
      "split": {"test_fraction": 0.2},
      "mode": "nli-m",
      "seed": 13,
      "model_name": "Tiny-BERT",
      "templates": {"language_tag": "fa"},
      "tokenizer": {"vocab_size": 2000, "min_frequency": 1, "max_len": 128},
      "encoder": {"num_layers": 2, "num_heads": 2, "hidden_size": 32, "dropout_rate": 0.1},
      "train": {"batch_size": 16, "learning_rate": 2e-5, "epochs": 4},
      "out_dir": "out"
    }

``seed`` drives the split, the parameter initialization and the training
shuffle/dropout streams. ``encoder.vocab_size`` and ``encoder.num_classes`` are
filled from the trained vocabulary and the mode; if given they must agree.
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from . import __version__
from .auxpair import AuxMode, TemplateSet
from .corpus import CANONICAL, FORMATS
from .encoder import EncoderConfig
from .training import TrainConfig

THREADS_ENV = "ABSA_PAIR_THREADS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerSettings:
    vocab_size: int = 2000
    min_frequency: int = 1
    max_len: int = 128


@dataclass(frozen=True)
class PipelineConfig:
    corpus_path: Path | None = None
    corpus_format: str = CANONICAL
    test_fraction: float = 0.2
    seed: int = 13
    mode: AuxMode = AuxMode.NLI_M
    model_name: str = "Tiny-BERT"
    templates: TemplateSet = field(default_factory=TemplateSet)
    tokenizer: TokenizerSettings = field(default_factory=TokenizerSettings)
    # raw encoder keys; resolved against the vocabulary by ``encoder_config``
    encoder: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: Path = Path("out")

    def __post_init__(self) -> None:
        if self.corpus_format not in FORMATS:
            raise ConfigError(f"corpus.format must be one of {FORMATS}, got {self.corpus_format!r}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"split.test_fraction must lie in (0, 1), got {self.test_fraction}")
        unknown = set(self.encoder) - set(EncoderConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown encoder keys: {sorted(unknown)}")
        head = self.encoder.get("num_classes")
        if head is not None and head != self.mode.num_classes:
            raise ConfigError(
                f"mode {self.mode} needs a {self.mode.num_classes}-class head, "
                f"but encoder.num_classes is {head}"
            )
        if "max_len" in self.encoder and self.encoder["max_len"] < self.tokenizer.max_len:
            raise ConfigError("encoder.max_len is smaller than tokenizer.max_len")

    # -- resolution --------------------------------------------------------------

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        given = self.encoder.get("vocab_size")
        if given is not None and given != vocab_size:
            raise ConfigError(f"encoder.vocab_size is {given} but the trained vocabulary has {vocab_size} tokens")
        values = {"max_len": self.tokenizer.max_len, "dropout_rate": 0.1, **self.encoder}
        values.update(vocab_size=vocab_size, num_classes=self.mode.num_classes, seed=self.seed)
        try:
            return EncoderConfig(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"encoder: {exc}") from None

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "corpus": {
                "path": None if self.corpus_path is None else str(self.corpus_path),
                "format": self.corpus_format,
            },
            "split": {"test_fraction": self.test_fraction},
            "seed": self.seed,
            "mode": self.mode.value.lower(),
            "model_name": self.model_name,
            "templates": self.templates.to_dict(),
            "tokenizer": {
                "vocab_size": self.tokenizer.vocab_size,
                "min_frequency": self.tokenizer.min_frequency,
                "max_len": self.tokenizer.max_len,
            },
            "encoder": dict(sorted(self.encoder.items())),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "out_dir": str(self.out_dir),
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "PipelineConfig":
        data = dict(data)
        if "config" in data and "command" in data:
            # a run manifest: replay its resolved config
            data = dict(data["config"])
        known = {"corpus", "split", "seed", "mode", "model_name", "templates", "tokenizer",
                 "encoder", "train", "out_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base_dir = base_dir or Path.cwd()

        def resolve(p: Any) -> Path | None:
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else (base_dir / p)

        corpus = data.get("corpus", {})
        split = data.get("split", {})
        train = dict(data.get("train", {}))
        train.pop("seed", None)
        try:
            return cls(
                corpus_path=resolve(corpus.get("path")),
                corpus_format=corpus.get("format", CANONICAL),
                test_fraction=float(split.get("test_fraction", 0.2)),
                seed=int(data.get("seed", 13)),
                mode=AuxMode.parse(data.get("mode", "nli-m")),
                model_name=str(data.get("model_name", "Tiny-BERT")),
                templates=TemplateSet.from_dict(data.get("templates", {})),
                tokenizer=TokenizerSettings(**data.get("tokenizer", {})),
                encoder=dict(data.get("encoder", {})),
                train=TrainConfig(**train),
                out_dir=resolve(data.get("out_dir", "out")),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data, base_dir=path.resolve().parent)


# -- digests and manifests ----------------------------------------------------------------


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def prepare_key(cfg: PipelineConfig, corpus_digest: str) -> dict:
    """Everything the prepare stage's outputs depend on."""
    d = cfg.to_dict()
    return {
        "corpus_sha256": corpus_digest,
        "corpus_format": cfg.corpus_format,
        "split": d["split"],
        "seed": cfg.seed,
        "templates": d["templates"],
        "tokenizer": d["tokenizer"],
    }


def train_key(cfg: PipelineConfig, prepare_digest: str) -> dict:
    d = cfg.to_dict()
    return {
        "prepare": prepare_digest,
        "mode": d["mode"],
        "encoder": d["encoder"],
        "train": d["train"],
        "seed": cfg.seed,
    }


def digest_of(key: dict) -> str:
    return sha256_bytes(canonical_json(key).encode("utf-8"))


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__

    def add_artifact(self, root: Path, path: Path) -> None:
        self.artifacts[str(path.relative_to(root))] = file_digest(path)

    def write(self, path: str | Path) -> None:
        payload = {
            "command": self.command,
            "tool_version": self.tool_version,
            "config": self.config,
            "inputs": dict(sorted(self.inputs.items())),
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        Path(path).write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def worker_threads() -> int | None:
    """Thread cap from ABSA_PAIR_THREADS, or None when unset."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n
