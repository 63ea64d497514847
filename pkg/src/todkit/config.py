"""Run configuration: a JSON file merging encoder/training/tokenizer
settings so every command can snapshot the fully-resolved config (and its
fingerprint) next to its outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    vocab_size: int = 512
    objectives: str = "mlm+rcl"
    seed: int = 13

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        raw: dict = {}
        if path is not None:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if overrides:
            for key, val in overrides.items():
                if val is None:
                    continue
                if key.startswith("encoder."):
                    raw.setdefault("encoder", {})[key.split(".", 1)[1]] = val
                elif key.startswith("train."):
                    raw.setdefault("train", {})[key.split(".", 1)[1]] = val
                else:
                    raw[key] = val
        enc = EncoderConfig(**raw.get("encoder", {}))
        train_kwargs = dict(raw.get("train", {}))
        cfg = cls(
            encoder=enc,
            train=TrainConfig(**train_kwargs),
            vocab_size=raw.get("vocab_size", 512),
            objectives=raw.get("objectives", "mlm+rcl"),
            seed=raw.get("seed", 13),
        )
        return cfg

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        train = TrainConfig(**{**asdict(self.train), "seed": seed})
        return RunConfig(encoder=self.encoder, train=train,
                         vocab_size=self.vocab_size, objectives=self.objectives,
                         seed=seed)

    def resolved(self) -> dict:
        return {
            "encoder": asdict(self.encoder),
            "train": asdict(self.train),
            "vocab_size": self.vocab_size,
            "objectives": self.objectives,
            "seed": self.seed,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def snapshot(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = dict(self.resolved(), fingerprint=self.fingerprint())
        (out / "config.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
