"""Turning reconstruction errors into OOD decisions and a metrics report.

The decision rule is deliberately literal: the threshold is the maximum
reconstruction error seen on held-out in-distribution data, a sample is
OOD only when its error strictly exceeds it (the calibration maximum
itself must stay in-distribution).  Threshold-free FPR95/AUROC/PR numbers
are reported next to the thresholded confusion counts.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.exceptions import NotFittedError

from .diffusion import (
    ReconstructionConfig,
    make_schedule,
    reconstruction_errors,
    train_denoiser,
)
from .encoder import ContrastiveEncoder
from .errors import ContractError, DomainError
from .metrics import auroc, fpr_at_tpr, pr_curve
from .seeding import derive_seed
from .validation import check_images


@dataclass(frozen=True)
class ScoredSample:
    """One scored test sample: id, ground-truth family tag, error."""

    sample_id: int
    family: str  # "id" or "ood:<family>"
    error: float

    def __post_init__(self):
        if not (math.isfinite(self.error) and self.error >= 0):
            raise DomainError(
                f"sample {self.sample_id}: error must be finite and >= 0, "
                f"got {self.error}"
            )


@dataclass(frozen=True)
class Threshold:
    """Max-error decision boundary calibrated on in-distribution samples."""

    tau: float
    calibration_count: int
    calibration_max_id: int


def calibrate_threshold(errors, sample_ids=None) -> Threshold:
    """Set the boundary at the maximum calibration error.

    ``sample_ids`` default to positions; ties resolve to the lowest id.
    """
    arr = np.asarray(errors, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ContractError("calibration error list is empty")
    if not np.isfinite(arr).all() or (arr < 0).any():
        raise DomainError("calibration errors must be finite and non-negative")
    ids = np.arange(arr.size) if sample_ids is None else np.asarray(sample_ids)
    if ids.shape != arr.shape:
        raise ContractError(f"{ids.size} sample ids for {arr.size} errors")
    top = int(np.argmax(arr))
    return Threshold(tau=float(arr[top]), calibration_count=int(arr.size),
                     calibration_max_id=int(ids[top]))


def classify(error: float, threshold: Threshold) -> str:
    """"ood" iff error strictly exceeds tau; equality stays "id"."""
    if not math.isfinite(error):
        raise DomainError(f"error must be finite, got {error}")
    return "ood" if error > threshold.tau else "id"


@dataclass(frozen=True)
class MetricsRow:
    """Per-family metrics; ``confusion`` holds counts at the calibrated tau."""

    family: str
    fpr95: float
    auroc: float
    pr_curve: tuple = ()
    confusion: dict | None = None

    def to_dict(self) -> dict:
        doc = {"family": self.family, "fpr95": self.fpr95, "auroc": self.auroc,
               "pr_curve": [list(p) for p in self.pr_curve]}
        if self.confusion is not None:
            doc["confusion"] = dict(sorted(self.confusion.items()))
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsRow":
        return cls(family=doc["family"], fpr95=doc["fpr95"], auroc=doc["auroc"],
                   pr_curve=tuple(tuple(p) for p in doc["pr_curve"]),
                   confusion=doc.get("confusion"))


@dataclass(frozen=True)
class DetectionReport:
    """Everything the evaluation stage publishes, serialisable to JSON."""

    families: tuple
    average: MetricsRow
    threshold: Threshold
    baseline: tuple = ()
    baseline_average: MetricsRow | None = None
    config_echo: dict = field(default_factory=dict)
    manifest_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "families": [r.to_dict() for r in self.families],
            "average": self.average.to_dict(),
            "threshold": {
                "tau": self.threshold.tau,
                "calibration_count": self.threshold.calibration_count,
                "calibration_max_id": self.threshold.calibration_max_id,
            },
            "baseline": [r.to_dict() for r in self.baseline],
            "baseline_average": (self.baseline_average.to_dict()
                                 if self.baseline_average else None),
            "config_echo": self.config_echo,
            "manifest_digest": self.manifest_digest,
        }

    def to_json(self) -> str:
        """Canonical JSON rendering (sorted keys, fixed separators)."""
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectionReport":
        thr = doc["threshold"]
        return cls(
            families=tuple(MetricsRow.from_dict(r) for r in doc["families"]),
            average=MetricsRow.from_dict(doc["average"]),
            threshold=Threshold(tau=thr["tau"],
                                calibration_count=thr["calibration_count"],
                                calibration_max_id=thr["calibration_max_id"]),
            baseline=tuple(MetricsRow.from_dict(r) for r in doc.get("baseline", [])),
            baseline_average=(MetricsRow.from_dict(doc["baseline_average"])
                              if doc.get("baseline_average") else None),
            config_echo=doc.get("config_echo", {}),
            manifest_digest=doc.get("manifest_digest", ""),
        )


def _family_rows(scored: list, threshold: Threshold | None,
                 with_curves: bool) -> tuple:
    id_errors = np.array([s.error for s in scored if s.family == "id"])
    families = sorted({s.family[4:] for s in scored if s.family.startswith("ood:")})
    if id_errors.size == 0:
        raise ContractError("no ID samples in scored list")
    if not families:
        raise ContractError("no OOD families in scored list")
    rows = []
    for family in families:
        ood_errors = np.array([s.error for s in scored
                               if s.family == f"ood:{family}"])
        confusion = None
        if threshold is not None:
            tp = int(np.sum(ood_errors > threshold.tau))
            fp = int(np.sum(id_errors > threshold.tau))
            confusion = {"tp": tp, "fn": int(ood_errors.size - tp),
                         "fp": fp, "tn": int(id_errors.size - fp)}
        rows.append(MetricsRow(
            family=family,
            fpr95=fpr_at_tpr(id_errors, ood_errors),
            auroc=auroc(id_errors, ood_errors),
            pr_curve=tuple(pr_curve(id_errors, ood_errors)) if with_curves else (),
            confusion=confusion,
        ))
    return tuple(rows)


def _average_row(rows) -> MetricsRow:
    return MetricsRow(
        family="average",
        fpr95=float(np.mean([r.fpr95 for r in rows])),
        auroc=float(np.mean([r.auroc for r in rows])),
    )


def build_report(scored: list, threshold: Threshold, baseline_scored=None,
                 config_echo: dict | None = None,
                 manifest_digest: str = "") -> DetectionReport:
    """Assemble the per-family report from scored samples.

    All OOD families are measured against the shared ID test scores; the
    average row is the unweighted mean over families.  Input order is
    irrelevant: samples are sorted by (family, id) internally, so the
    serialised report is a pure function of the sample set.
    """
    scored = sorted(scored, key=lambda s: (s.family, s.sample_id))
    rows = _family_rows(scored, threshold, with_curves=True)
    baseline_rows: tuple = ()
    baseline_avg = None
    if baseline_scored:
        baseline_sorted = sorted(baseline_scored,
                                 key=lambda s: (s.family, s.sample_id))
        baseline_rows = _family_rows(baseline_sorted, None, with_curves=False)
        baseline_avg = _average_row(baseline_rows)
    return DetectionReport(
        families=rows,
        average=_average_row(rows),
        threshold=threshold,
        baseline=baseline_rows,
        baseline_average=baseline_avg,
        config_echo=config_echo or {},
        manifest_digest=manifest_digest,
    )


def render_text_table(report: DetectionReport) -> str:
    """Plain-text table: one FPR95/AUROC column pair per family + Average."""
    families = [r.family for r in report.families] + ["Average"]
    header_top = ["method"] + [f for f in families for _ in (0, 1)]
    header_sub = [""] + ["FPR95", "AUROC"] * len(families)

    def row_values(rows, avg):
        vals = []
        for r in rows:
            vals += [f"{r.fpr95:.4f}", f"{r.auroc:.4f}"]
        vals += [f"{avg.fpr95:.4f}", f"{avg.auroc:.4f}"]
        return vals

    lines = []
    table = [header_top, header_sub,
             ["recon-diffusion"] + row_values(report.families, report.average)]
    if report.baseline:
        table.append(["msp-baseline"] + row_values(report.baseline,
                                                   report.baseline_average))
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    for row in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    lines.append("")
    lines.append(f"threshold tau={report.threshold.tau:.6g} "
                 f"(max error over {report.threshold.calibration_count} "
                 f"calibration samples, argmax id "
                 f"{report.threshold.calibration_max_id})")
    if any(r.confusion for r in report.families):
        lines.append("")
        lines.append("confusion at tau (positive = OOD):")
        for r in report.families:
            c = r.confusion
            lines.append(f"  {r.family}: tp={c['tp']} fn={c['fn']} "
                         f"fp={c['fp']} tn={c['tn']}")
    return "\n".join(lines) + "\n"


class ReconstructionOODDetector(BaseEstimator, OutlierMixin):
    """Diffusion-reconstruction OOD detector with the scikit-learn API.

    ``fit(X, y)`` trains the contrastive encoder on labeled ID images,
    freezes it, trains the conditional denoiser on the same images, and
    calibrates the max-error threshold (on ``X_calibration`` when given,
    else on the training images themselves, with a warning).

    Score conventions follow scikit-learn outlier detectors: higher
    ``score_samples`` means more normal, ``decision_function`` is
    negative for outliers, ``predict`` returns +1 (ID) / -1 (OOD).
    ``reconstruction_errors`` exposes the raw anomaly score.

    Attributes set by fit:
        encoder_: fitted ContrastiveEncoder (frozen after training).
        denoiser_: trained DenoiserNet.
        schedule_: the noise schedule.
        recon_config_: reconstruction settings used for scoring.
        threshold_: calibrated Threshold.
        offset_: -threshold_.tau (sklearn polarity).
    """

    def __init__(self, image_size: int = 16, embed_dim: int = 32,
                 encoder_hidden: tuple = (128, 64), encoder_epochs: int = 10,
                 encoder_lr: float = 3e-3, encoder_batch: int = 64,
                 temperature_init: float = 0.07, timesteps: int = 100,
                 beta_start: float = 1e-4, beta_end: float = 0.06,
                 denoiser_hidden: tuple = (256, 256), denoiser_epochs: int = 10,
                 denoiser_lr: float = 3e-3, denoiser_batch: int = 32,
                 s_star: int = 50, n_steps: int = 10, random_state: int = 0):
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.encoder_hidden = encoder_hidden
        self.encoder_epochs = encoder_epochs
        self.encoder_lr = encoder_lr
        self.encoder_batch = encoder_batch
        self.temperature_init = temperature_init
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.denoiser_hidden = denoiser_hidden
        self.denoiser_epochs = denoiser_epochs
        self.denoiser_lr = denoiser_lr
        self.denoiser_batch = denoiser_batch
        self.s_star = s_star
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X, y, X_calibration=None):
        X = check_images(X, self.image_size)
        encoder = ContrastiveEncoder(
            image_size=self.image_size, embed_dim=self.embed_dim,
            hidden_sizes=self.encoder_hidden, batch_size=self.encoder_batch,
            epochs=self.encoder_epochs, learning_rate=self.encoder_lr,
            temperature_init=self.temperature_init, accuracy_floor=None,
            random_state=derive_seed(self.random_state, "encoder") % 2**32,
        ).fit(X, y)
        schedule = make_schedule(self.timesteps, self.beta_start, self.beta_end)
        denoiser, history = train_denoiser(
            X, ["id"] * X.shape[0], encoder.transform(X), schedule,
            epochs=self.denoiser_epochs, batch_size=self.denoiser_batch,
            learning_rate=self.denoiser_lr, hidden_sizes=self.denoiser_hidden,
            seed=derive_seed(self.random_state, "denoiser") % 2**32,
        )
        self.encoder_ = encoder
        self.denoiser_ = denoiser
        self.schedule_ = schedule
        self.recon_config_ = ReconstructionConfig(s_star=self.s_star,
                                                  n_steps=self.n_steps)
        self.denoiser_history_ = history
        if X_calibration is None:
            warnings.warn(
                "no calibration split given; thresholding on training images",
                stacklevel=2,
            )
            X_calibration = X
        errors = self.reconstruction_errors(X_calibration)
        self.threshold_ = calibrate_threshold(errors)
        self.offset_ = -self.threshold_.tau
        return self

    def _check_fitted(self, attr: str = "threshold_"):
        if not hasattr(self, attr):
            raise NotFittedError(
                "ReconstructionOODDetector is not fitted; call fit first."
            )

    def reconstruction_errors(self, X, sample_ids=None) -> np.ndarray:
        """Raw per-sample reconstruction errors (higher = more OOD).

        Noise draws are seeded from ``sample_ids`` (default: positions),
        so a sample's score does not depend on batching or order.
        """
        self._check_fitted("denoiser_")
        X = check_images(X, self.image_size)
        ids = np.arange(X.shape[0]) if sample_ids is None else np.asarray(sample_ids)
        seeds = [derive_seed(self.random_state, "score", int(i)) for i in ids]
        cond = self.encoder_.transform(X)
        return reconstruction_errors(self.denoiser_, self.schedule_, X, cond,
                                     self.recon_config_, seeds)

    def score_samples(self, X) -> np.ndarray:
        """Negated reconstruction error (sklearn polarity: higher = normal)."""
        return -self.reconstruction_errors(X)

    def decision_function(self, X) -> np.ndarray:
        """Positive for in-distribution, negative beyond the threshold."""
        self._check_fitted("threshold_")
        return self.score_samples(X) - self.offset_

    def predict(self, X) -> np.ndarray:
        """+1 for ID, -1 for OOD, using the calibrated max-error threshold."""
        return np.where(self.decision_function(X) < 0, -1, 1)
