"""Declarative run configuration and the per-stage ledger.

A run is identified by the digest of its (seed-inclusive) configuration;
every stage writes its artifacts under ``<out_dir>/run-<digest>/`` and
records content digests in the ledger so reproducibility is checkable
after the fact rather than merely asserted.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .datasets import DatasetManifest
from .errors import DomainError


@dataclass(frozen=True)
class RunConfig:
    """Every knob of the end-to-end pipeline, JSON round-trippable."""

    seed: int = 42
    train_per_class: int = 100
    calibration_per_class: int = 25
    test_id_per_class: int = 50
    test_ood_per_family: int = 200
    embed_dim: int = 32
    encoder_hidden: tuple = (128, 64)
    encoder_batch: int = 64
    encoder_epochs: int = 10
    encoder_lr: float = 3e-3
    temperature_init: float = 0.07
    accuracy_floor: float = 0.95
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.06
    denoiser_hidden: tuple = (256, 256)
    denoiser_epochs: int = 10
    denoiser_batch: int = 32
    denoiser_lr: float = 3e-3
    s_star: int = 50
    n_steps: int = 10
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["encoder_hidden"] = list(self.encoder_hidden)
        doc["denoiser_hidden"] = list(self.denoiser_hidden)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DomainError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(doc)
        for key in ("encoder_hidden", "denoiser_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    def echo_dict(self) -> dict:
        """Config as embedded in reports: the experiment parameters only,
        with the output location stripped so reports stay location-free."""
        doc = self.to_dict()
        doc.pop("out_dir")
        return doc

    def digest(self) -> str:
        """Hex digest identifying the experiment (output location excluded)."""
        blob = json.dumps(self.echo_dict(), sort_keys=True,
                          separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"run-{self.digest()}"

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(
            seed=self.seed,
            train_per_class=self.train_per_class,
            calibration_per_class=self.calibration_per_class,
            test_id_per_class=self.test_id_per_class,
            test_ood_per_family=self.test_ood_per_family,
        )


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunLedger:
    """Per-stage status, wall time, and output content digests."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / "ledger.json"
        if self.path.exists():
            self.doc = json.loads(self.path.read_text())
        else:
            self.doc = {"config_digest": None, "stages": {}}

    def record_stage(self, name: str, config_digest: str, started: float,
                     outputs: list) -> None:
        self.doc["config_digest"] = config_digest
        self.doc["stages"][name] = {
            "status": "ok",
            "wall_time_s": round(time.monotonic() - started, 3),
            "outputs": {Path(p).name: file_digest(p) for p in sorted(map(str, outputs))},
        }
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    def stage_outputs(self, name: str) -> dict:
        return self.doc["stages"].get(name, {}).get("outputs", {})
