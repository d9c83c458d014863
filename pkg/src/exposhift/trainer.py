"""Optimization loop, evaluation and training logs."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, snapshot
from .data import EpochSampler, PairedDataset, sample_batch
from .losses import LossWeights, build_extractor, total_loss
from .model import ExposureNet, ModelConfig

log = logging.getLogger(__name__)

LOG_FIELDS = ["iteration", "lr", "total", "pseudo", "output", "l1", "cos", "ssim", "vgg", "val_psnr", "seconds"]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, breakdown: dict[str, float]):
        self.iteration = iteration
        self.breakdown = breakdown
        terms = ", ".join(f"{k}={v:.4g}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {terms}")


@dataclass
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 4
    patch_size: int = 128
    lr: float = 1e-4
    lr_min: float = 1e-6
    grad_clip: float = 5.0
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 0
    output_dir: str = "runs/default"
    hflip: bool = True
    rot90: bool = False
    threads: int = 1
    perceptual_weights: str | None = None
    device: str = "cpu"
    # wall-clock cap in seconds; 0 disables. The run stops after the
    # iteration that crosses it and still writes a final checkpoint.
    max_seconds: float = 0.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    model: ExposureNet
    checkpoint_path: Path
    log_rows: list[dict]
    losses: list[float] = field(default_factory=list)


def cosine_lr(it: int, total: int, lr: float, lr_min: float) -> float:
    """Learning rate for 1-based iteration ``it``: ``lr`` at the start, ``lr_min`` at the end."""
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * (it - 1) / (total - 1)))


def _rng_state(np_rng: np.random.Generator) -> dict:
    return {"torch": torch.get_rng_state(), "numpy": np_rng.bit_generator.state}


def _device(hint: str) -> torch.device:
    if hint.startswith("cuda") and not torch.cuda.is_available():
        log.warning("CUDA requested but unavailable; using CPU")
        return torch.device("cpu")
    return torch.device(hint)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: PairedDataset,
    loss_weights: LossWeights | None = None,
    val_dataset: PairedDataset | None = None,
    model: ExposureNet | None = None,
) -> TrainResult:
    """Minimize the weighted objective with Adam and a cosine schedule.

    Writes ``train_log.csv`` and ``final.ckpt`` (plus periodic
    ``iter_XXXXXXX.ckpt``) under ``train_cfg.output_dir``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    loss_weights = loss_weights or LossWeights()
    torch.set_num_threads(train_cfg.threads)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    sampler = EpochSampler(len(dataset), rng)
    device = _device(train_cfg.device)
    out_dir = Path(train_cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = (model or ExposureNet(model_cfg)).to(device).train()
    feat = build_extractor(train_cfg.perceptual_weights).to(device) if loss_weights.use_vgg else None
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    dataset.patch_size = train_cfg.patch_size
    dataset.hflip, dataset.rot90 = train_cfg.hflip, train_cfg.rot90
    mult = model.pad_multiple
    if train_cfg.patch_size % mult:
        raise ValueError(f"patch_size must be a multiple of {mult}")

    log_path = out_dir / "train_log.csv"
    rows: list[dict] = []
    losses: list[float] = []
    acc: dict[str, float] = {}
    acc_n = 0
    t0 = time.perf_counter()
    cfg_echo = {"train": asdict(train_cfg), "loss": asdict(loss_weights)}
    with log_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for it in range(1, train_cfg.iterations + 1):
            lr = cosine_lr(it, train_cfg.iterations, train_cfg.lr, train_cfg.lr_min)
            for group in opt.param_groups:
                group["lr"] = lr
            x, gt = sample_batch(dataset, train_cfg.batch_size, rng, sampler.next(train_cfg.batch_size))
            x, gt = x.to(device), gt.to(device)
            y, fn = model(x)
            loss, terms = total_loss(y, fn, gt, loss_weights, feat)
            breakdown = {k: float(v.detach()) for k, v in terms.items()}
            if not math.isfinite(breakdown["total"]):
                raise TrainingDiverged(it, breakdown)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if train_cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()

            losses.append(breakdown["total"])
            for k, v in breakdown.items():
                acc[k] = acc.get(k, 0.0) + v
            acc_n += 1
            out_of_time = bool(train_cfg.max_seconds) and time.perf_counter() - t0 >= train_cfg.max_seconds
            if it % train_cfg.log_interval == 0 or it == train_cfg.iterations or out_of_time:
                row = {"iteration": it, "lr": lr, **{k: v / acc_n for k, v in acc.items()}}
                row["val_psnr"] = evaluate(model, val_dataset)[1]["psnr"] if val_dataset is not None else ""
                row["seconds"] = round(time.perf_counter() - t0, 3)
                writer.writerow({k: row.get(k, "") for k in LOG_FIELDS})
                fh.flush()
                rows.append(row)
                log.info("iter %d loss %.5f", it, row["total"])
                acc, acc_n = {}, 0
            if train_cfg.checkpoint_interval and it % train_cfg.checkpoint_interval == 0:
                save_checkpoint(snapshot(model, opt, it, _rng_state(rng), cfg_echo), out_dir / f"iter_{it:07d}.ckpt")
            if out_of_time:
                log.info("time budget reached at iteration %d", it)
                break

    final = save_checkpoint(snapshot(model, opt, it, _rng_state(rng), cfg_echo), out_dir / "final.ckpt")
    return TrainResult(model.eval(), final, rows, losses)


@torch.no_grad()
def evaluate(
    model: ExposureNet | Checkpoint | str | Path,
    dataset: PairedDataset,
    report: str | Path | None = None,
    expected_config: ModelConfig | None = None,
) -> tuple[list[dict], dict[str, float]]:
    """Per-image PSNR/SSIM/RMSE-LAB of clamped outputs, and their means."""
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model, expected_config)
    if isinstance(model, Checkpoint):
        model = model.build_model()
    was_training = model.training
    model.eval()
    rows = []
    try:
        for i in range(len(dataset)):
            inp, gt = dataset.load(i)
            dtype = next(model.parameters()).dtype
            pred = model.enhance(inp.to(dtype)).clamp(0.0, 1.0)
            rows.append({"image": dataset.name(i), **metrics.evaluate_pair(pred, gt)})
    finally:
        model.train(was_training)
    mean = metrics.write_report(rows, report) if report is not None else metrics.summarize(rows)
    return rows, mean
