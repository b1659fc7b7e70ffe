"""End-to-end pipeline stages: data generation, training, evaluation,
report rendering.  Each stage reads only earlier stages' artifacts,
records output digests in the run ledger, and is deterministic given the
run configuration.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, RunLedger, file_digest
from .datasets import build_dataset, load_dataset
from .detection import (
    ScoredSample,
    build_report,
    calibrate_threshold,
    render_text_table,
    DetectionReport,
)
from .diffusion import (
    DenoiserNet,
    ReconstructionConfig,
    make_schedule,
    reconstruct_batch,
    reconstruction_errors,
    train_denoiser,
)
from .encoder import ContrastiveEncoder, EncoderNet
from .errors import StageDependencyError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.rds"
ENCODER_CKPT = "encoder.ckpt"
DENOISER_CKPT = "denoiser.ckpt"
REPORT_JSON = "report.json"


def _require(run_dir: Path, names: list, stage: str) -> None:
    missing = [n for n in names if not (run_dir / n).exists()]
    if missing:
        raise StageDependencyError(
            f"{stage} needs artifacts from earlier stages; missing "
            f"{missing} under {run_dir}"
        )


def cmd_gen_data(cfg: RunConfig) -> Path:
    """Write the dataset and manifest for this run; returns the run dir."""
    started = time.monotonic()
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    data_path = build_dataset(cfg.manifest(), run_dir / DATASET_FILE)
    manifest_path = run_dir / "dataset.manifest.json"
    (run_dir / "config.json").write_text(cfg.to_json())
    RunLedger(run_dir).record_stage(
        "gen-data", cfg.digest(), started,
        [data_path, manifest_path, run_dir / "config.json"],
    )
    logger.info("dataset written to %s", data_path)
    return run_dir


def _write_loss_csv(path: Path, history: list) -> None:
    lines = ["epoch,loss"] + [f"{i},{loss:.9g}" for i, loss in enumerate(history)]
    path.write_text("\n".join(lines) + "\n")


def cmd_train(cfg: RunConfig) -> Path:
    """Train the encoder, freeze it, then train the conditional denoiser."""
    started = time.monotonic()
    run_dir = cfg.run_dir()
    _require(run_dir, [DATASET_FILE], "train")
    ds = load_dataset(run_dir / DATASET_FILE)

    _, train_x, train_y, train_tags = ds.split("train")
    _, cal_x, cal_y, _ = ds.split("calibration")
    encoder = ContrastiveEncoder(
        embed_dim=cfg.embed_dim, hidden_sizes=cfg.encoder_hidden,
        batch_size=cfg.encoder_batch, epochs=cfg.encoder_epochs,
        learning_rate=cfg.encoder_lr, temperature_init=cfg.temperature_init,
        accuracy_floor=cfg.accuracy_floor,
        random_state=derive_seed(cfg.seed, "encoder"),
    ).fit(train_x, train_y, X_val=cal_x, y_val=cal_y)
    encoder.net_.save(run_dir / ENCODER_CKPT,
                      zero_shot_accuracy=encoder.zero_shot_accuracy_)
    _write_loss_csv(run_dir / "encoder_loss.csv", encoder.history_)
    logger.info("encoder zero-shot accuracy %.4f", encoder.zero_shot_accuracy_)

    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    denoiser, history = train_denoiser(
        train_x, train_tags, encoder.transform(train_x), schedule,
        epochs=cfg.denoiser_epochs, batch_size=cfg.denoiser_batch,
        learning_rate=cfg.denoiser_lr, hidden_sizes=cfg.denoiser_hidden,
        seed=derive_seed(cfg.seed, "denoiser"),
        log_fn=lambda e, l: logger.info("denoiser epoch %d loss %.5f", e, l),
    )
    denoiser.save(run_dir / DENOISER_CKPT, schedule, cfg.s_star)
    _write_loss_csv(run_dir / "denoiser_loss.csv", history)

    RunLedger(run_dir).record_stage(
        "train", cfg.digest(), started,
        [run_dir / ENCODER_CKPT, run_dir / DENOISER_CKPT,
         run_dir / "encoder_loss.csv", run_dir / "denoiser_loss.csv"],
    )
    return run_dir


def _score_split(ds, split: str, encoder_net: EncoderNet, denoiser: DenoiserNet,
                 schedule, recon_cfg: ReconstructionConfig, seed: int):
    ids, images, _, tags = ds.split(split)
    cond = encoder_net.embed_images(images)
    seeds = [derive_seed(seed, "score", int(i)) for i in ids]
    errors = reconstruction_errors(denoiser, schedule, images, cond,
                                   recon_cfg, seeds)
    return [ScoredSample(int(i), tag, float(e))
            for i, tag, e in zip(ids, tags, errors)]


def cmd_evaluate(cfg: RunConfig) -> DetectionReport:
    """Calibrate the threshold and score every test sample; write outputs."""
    started = time.monotonic()
    run_dir = cfg.run_dir()
    _require(run_dir, [DATASET_FILE, ENCODER_CKPT, DENOISER_CKPT], "evaluate")
    ds = load_dataset(run_dir / DATASET_FILE)
    encoder_net, _ = EncoderNet.load(run_dir / ENCODER_CKPT)
    denoiser, schedule, _ = DenoiserNet.load(run_dir / DENOISER_CKPT)
    recon_cfg = ReconstructionConfig(s_star=cfg.s_star, n_steps=cfg.n_steps)

    cal_scored = _score_split(ds, "calibration", encoder_net, denoiser,
                              schedule, recon_cfg, cfg.seed)
    threshold = calibrate_threshold([s.error for s in cal_scored],
                                    [s.sample_id for s in cal_scored])
    logger.info("calibrated tau=%.6g on %d samples", threshold.tau,
                threshold.calibration_count)

    test_splits = ["test-id"] + [f"ood:{f}" for f in ds.manifest.families]
    scored: list = []
    for split in test_splits:
        scored.extend(_score_split(ds, split, encoder_net, denoiser, schedule,
                                   recon_cfg, cfg.seed))

    baseline_scored = []
    for split in test_splits:
        ids, images, _, tags = ds.split(split)
        for i, tag, e in zip(ids, tags, encoder_net.msp_scores(images)):
            baseline_scored.append(ScoredSample(int(i), tag, float(e)))

    scores_path = run_dir / "scores.csv"
    lines = ["sample_id,family,error"]
    for s in sorted(scored, key=lambda s: s.sample_id):
        lines.append(f"{s.sample_id},{s.family},{np.float32(s.error):.9g}")
    scores_path.write_text("\n".join(lines) + "\n")

    report = build_report(
        scored, threshold, baseline_scored=baseline_scored,
        config_echo=cfg.echo_dict(),
        manifest_digest=file_digest(run_dir / "dataset.manifest.json"),
    )
    (run_dir / REPORT_JSON).write_text(report.to_json())
    outputs = [scores_path, run_dir / REPORT_JSON]
    outputs += _render_report_files(report, run_dir)
    RunLedger(run_dir).record_stage("evaluate", cfg.digest(), started, outputs)
    return report


def _render_report_files(report: DetectionReport, out_dir: Path) -> list:
    """Write the plain-text table and one PR-curve CSV per family."""
    out_dir = Path(out_dir)
    table_path = out_dir / "report.txt"
    table_path.write_text(render_text_table(report))
    written = [table_path]
    for row in report.families:
        path = out_dir / f"pr_{row.family}.csv"
        lines = ["recall,precision"]
        lines += [f"{r:.9g},{p:.9g}" for r, p in row.pr_curve]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


def cmd_report(report_json_path, out_dir=None) -> str:
    """Re-render the text table and PR CSVs from an existing report JSON."""
    path = Path(report_json_path)
    report = DetectionReport.from_dict(json.loads(path.read_text()))
    out = Path(out_dir) if out_dir is not None else path.parent
    out.mkdir(parents=True, exist_ok=True)
    _render_report_files(report, out)
    return render_text_table(report)


def cmd_sample_reconstructions(cfg: RunConfig, count: int = 4) -> list:
    """Dump original/reconstruction PGM pairs for visual inspection."""
    run_dir = cfg.run_dir()
    _require(run_dir, [DATASET_FILE, ENCODER_CKPT, DENOISER_CKPT],
             "diffusion sample")
    ds = load_dataset(run_dir / DATASET_FILE)
    encoder_net, _ = EncoderNet.load(run_dir / ENCODER_CKPT)
    denoiser, schedule, _ = DenoiserNet.load(run_dir / DENOISER_CKPT)
    recon_cfg = ReconstructionConfig(s_star=cfg.s_star, n_steps=cfg.n_steps)
    sample_dir = run_dir / "samples"
    sample_dir.mkdir(exist_ok=True)
    written = []
    for split in ["test-id"] + [f"ood:{f}" for f in ds.manifest.families]:
        ids, images, _, _ = ds.split(split)
        take = min(count, len(ids))
        cond = encoder_net.embed_images(images[:take])
        seeds = [derive_seed(cfg.seed, "score", int(i)) for i in ids[:take]]
        recon = reconstruct_batch(denoiser, schedule, images[:take], cond,
                                  recon_cfg, seeds)
        tag = split.replace(":", "-")
        for k in range(take):
            for suffix, img in (("orig", images[k]), ("recon", recon[k])):
                path = sample_dir / f"{tag}_{ids[k]}_{suffix}.pgm"
                write_pgm(path, img.reshape(16, 16))
                written.append(path)
    return written


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM with pixels mapped from [-1, 1] to [0, 255]."""
    h, w = image.shape
    levels = np.clip(np.round((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(levels.tobytes())


def cmd_all(cfg: RunConfig) -> DetectionReport:
    cmd_gen_data(cfg)
    cmd_train(cfg)
    return cmd_evaluate(cfg)
