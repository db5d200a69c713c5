"""Loss, learning-rate schedule, curriculum sampling, and the two-phase
training loop.

The objective is mean per-pixel binary cross-entropy plus a weighted Dice
term (weight 0.25 by default). Phase 1 pretrains on the literal, referring,
and open-vocabulary groups; phase 2 mixes conversational positives,
conversational negatives, and a pretraining remix in equal thirds. Targets
are binarized and eroded once with a 5x5 kernel at training resolution.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import DatasetManifest, Sample
from .maskops import erode, load_image_rgb, resize_longest_side, rle_decode
from .model import ModelConfig, SegmentationModel, build_model, load_checkpoint, save_checkpoint
from .model.checkpoint import load_model_state, model_state_tensors
from .model.network import batch_tokenize, preprocess_image

GROUP_IDS = ("literal", "referring", "open_vocab_regions", "conversational_pos", "conversational_neg")
PRETRAIN_GROUPS = ("literal", "referring", "open_vocab_regions")
PHASE2_CATEGORIES = ("conversational_pos", "conversational_neg", "pretrain_mix")

DICE_EPS = 1.0
PROB_CLAMP = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass
class DataGroup:
    id: str
    manifest: DatasetManifest

    def __post_init__(self):
        if self.id not in GROUP_IDS:
            raise TrainingError(f"unknown data group {self.id!r}")
        for sample in self.manifest.samples:
            if self.id == "conversational_neg" and not sample.is_negative:
                raise TrainingError(f"group {self.id} contains positive sample {sample.sample_id}")
            if self.id != "conversational_neg" and sample.is_negative:
                raise TrainingError(f"group {self.id} contains negative sample {sample.sample_id}")

    def __len__(self):
        return len(self.manifest.samples)


@dataclass
class TrainConfig:
    phase: int = 1
    lr_peak: float = 1e-4
    lr_min: float = 1e-6
    warmup_steps: int = 250
    total_steps: int = 1000
    batch_size: int = 6
    grad_accum: int = 8
    lambda_dice: float = 0.25
    weight_decay: float = 0.05
    seed: int = 0
    erode_kernel: int = 5
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise TrainingError("phase must be 1 or 2")
        if not (0 <= self.warmup_steps < self.total_steps):
            raise TrainingError("need 0 <= warmup_steps < total_steps")
        if self.lambda_dice < 0:
            raise TrainingError("lambda_dice must be >= 0")


def segmentation_loss(
    logits: torch.Tensor, target: torch.Tensor, lambda_dice: float = 0.25
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, bce, dice_term) averaged over the batch.

    logits/target: (B, H, W) or (H, W); target in {0, 1}. Probabilities are
    clamped away from the log singularities, and the Dice term is smoothed
    with eps = 1.0 so empty-vs-empty scores as perfect.
    """
    if logits.shape != target.shape:
        raise TrainingError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    if logits.dim() == 2:
        logits, target = logits[None], target[None]
    probs = torch.sigmoid(logits).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = target.to(probs.dtype)
    bce = -(g * probs.log() + (1 - g) * (1 - probs).log()).mean(dim=(1, 2))
    inter = (probs * g).sum(dim=(1, 2))
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (probs.sum(dim=(1, 2)) + g.sum(dim=(1, 2)) + DICE_EPS)
    total = bce + lambda_dice * dice
    return total.mean(), bce.mean(), dice.mean()


def lr_at_step(cfg: TrainConfig, step: int) -> float:
    """Linear ramp to lr_peak over warmup_steps, then cosine to lr_min."""
    if not (0 <= step <= cfg.total_steps):
        raise TrainingError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    u = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * (1.0 + math.cos(math.pi * u)) / 2.0


def _groups_by_id(groups: list[DataGroup]) -> dict[str, DataGroup]:
    table = {g.id: g for g in groups}
    if len(table) != len(groups):
        raise TrainingError("duplicate group ids")
    return table


def sample_batch(
    phase: int, groups: list[DataGroup], rng: np.random.Generator, batch_size: int = 6
) -> tuple[list[Sample], list[str]]:
    """Draw with replacement. Phase 1: uniform over the concatenated
    pretraining groups. Phase 2: category uniform over {conversational_pos,
    conversational_neg, pretrain_mix}, then uniform within."""
    table = _groups_by_id(groups)
    samples: list[Sample] = []
    categories: list[str] = []
    if phase == 1:
        pool = []
        for gid in PRETRAIN_GROUPS:
            if gid not in table or len(table[gid]) == 0:
                raise TrainingError(f"phase 1 requires non-empty group {gid!r}")
            pool.extend(table[gid].manifest.samples)
        for _ in range(batch_size):
            samples.append(pool[int(rng.integers(0, len(pool)))])
            categories.append("pretrain_mix")
        return samples, categories
    for gid in ("conversational_pos", "conversational_neg"):
        if gid not in table or len(table[gid]) == 0:
            raise TrainingError(f"phase 2 requires non-empty group {gid!r}")
    pretrain_pool = []
    for gid in PRETRAIN_GROUPS:
        if gid not in table or len(table[gid]) == 0:
            raise TrainingError(f"phase 2 requires non-empty group {gid!r}")
        pretrain_pool.extend(table[gid].manifest.samples)
    for _ in range(batch_size):
        category = PHASE2_CATEGORIES[int(rng.integers(0, 3))]
        if category == "pretrain_mix":
            pool = pretrain_pool
        else:
            pool = table[category].manifest.samples
        samples.append(pool[int(rng.integers(0, len(pool)))])
        categories.append(category)
    return samples, categories


def prepare_target(mask: np.ndarray, image_size: int, erode_kernel: int) -> np.ndarray:
    """Resize (nearest), pad bottom/right to the square training frame, then
    binarize and erode once."""
    m = (np.asarray(mask) != 0).astype(np.uint8)
    resized = resize_longest_side(m, image_size)
    canvas = np.zeros((image_size, image_size), dtype=np.uint8)
    canvas[: resized.shape[0], : resized.shape[1]] = resized
    if erode_kernel > 1:
        canvas = erode(canvas, erode_kernel, 1)
    return canvas


@functools.lru_cache(maxsize=64)
def _load_image_cached(uri: str) -> np.ndarray:
    return load_image_rgb(uri)


def disk_loader(sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    return _load_image_cached(sample.image.uri), rle_decode(sample.mask)


def _build_batch(model: SegmentationModel, samples: list[Sample], loader, erode_kernel: int):
    size = model.cfg.image_size
    dtype = next(model.parameters()).dtype
    images, targets, texts = [], [], []
    for sample in samples:
        image, mask = loader(sample)
        tensor, _, _ = preprocess_image(image, size)
        images.append(tensor.to(dtype))
        targets.append(torch.from_numpy(prepare_target(mask, size, erode_kernel)).to(dtype))
        texts.append(sample.prompt)
    ids, token_mask = batch_tokenize(texts, model.cfg.max_text_len)
    return torch.stack(images), ids, token_mask, torch.stack(targets)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps: int
    final_loss: float
    log_rows: list[dict] = field(default_factory=list)


def _save_train_checkpoint(path, model, optimizer, cfg, model_cfg, step, rng):
    tensors = dict(model_state_tensors(model))
    param_names = {id(p): name for name, p in model.named_parameters()}
    for p, state in optimizer.state.items():
        name = param_names[id(p)]
        for key in ("exp_avg", "exp_avg_sq"):
            if key in state:
                tensors[f"optim/{name}/{key}"] = state[key]
        if "step" in state:
            tensors[f"optim/{name}/step"] = torch.as_tensor(float(state["step"]))
    torch_rng = torch.get_rng_state().numpy().astype(np.float32)
    tensors["rng/torch"] = torch.from_numpy(torch_rng)
    extra = {
        "step": step,
        "train_config": cfg.__dict__,
        "sampler_state": json.dumps(rng.bit_generator.state),
    }
    save_checkpoint(path, {"model": model_cfg.to_json()}, tensors, extra=extra)


def load_train_checkpoint(path) -> tuple[SegmentationModel, dict[str, np.ndarray], dict, ModelConfig]:
    config, tensors, extra = load_checkpoint(path)
    model_cfg = ModelConfig.from_json(config["model"])
    model = build_model(model_cfg)
    load_model_state(model, {k: v for k, v in tensors.items() if not k.startswith(("optim/", "rng/"))})
    return model, tensors, extra, model_cfg


def _restore_optimizer(optimizer, model, tensors):
    param_names = {name: p for name, p in model.named_parameters()}
    for name, p in param_names.items():
        avg_key = f"optim/{name}/exp_avg"
        if avg_key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.as_tensor(float(tensors[f"optim/{name}/step"])),
            "exp_avg": torch.from_numpy(tensors[avg_key]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(tensors[f"optim/{name}/exp_avg_sq"]).to(p.dtype),
        }


def train_phase(
    model: SegmentationModel,
    cfg: TrainConfig,
    groups: list[DataGroup],
    out_dir: str | Path,
    loader=disk_loader,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run cfg.total_steps optimizer steps of AdamW with the warmup+cosine
    schedule, honoring gradient accumulation and the frozen-parameter
    policy baked into the model. Deterministic given (seed, data, config)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.csv"
    ckpt_path = out_dir / "checkpoint.ckpt"

    params = model.trainable_parameters()
    if not params:
        raise TrainingError("model has no trainable parameters")
    optimizer = torch.optim.AdamW(params, lr=cfg.lr_peak, weight_decay=cfg.weight_decay, foreach=False)

    start_step = 0
    if resume_from is not None:
        _, tensors, extra = load_checkpoint(resume_from)
        load_model_state(model, {k: v for k, v in tensors.items() if not k.startswith(("optim/", "rng/"))})
        _restore_optimizer(optimizer, model, tensors)
        start_step = int(extra["step"])
        rng = np.random.default_rng(cfg.seed)
        rng.bit_generator.state = json.loads(extra["sampler_state"])
        torch.set_rng_state(torch.from_numpy(tensors["rng/torch"].astype(np.uint8)))
        log_rows = []
        mode = "a"
    else:
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        log_rows = []
        mode = "w"

    fieldnames = ["step", "lr", "loss", "bce", "dice", "category"]
    with open(log_path, mode, newline="") as log_file:
        writer = csv.DictWriter(log_file, fieldnames=fieldnames)
        if mode == "w":
            writer.writeheader()
        final_loss = float("nan")
        for step in range(start_step + 1, cfg.total_steps + 1):
            optimizer.zero_grad(set_to_none=True)
            losses, bces, dices, cats = [], [], [], []
            for _ in range(cfg.grad_accum):
                samples, categories = sample_batch(cfg.phase, groups, rng, cfg.batch_size)
                images, ids, token_mask, targets = _build_batch(model, samples, loader, cfg.erode_kernel)
                logits = model.forward_batch(images, ids, token_mask)
                loss, bce, dice = segmentation_loss(logits, targets, cfg.lambda_dice)
                (loss / cfg.grad_accum).backward()
                losses.append(float(loss.detach()))
                bces.append(float(bce.detach()))
                dices.append(float(dice.detach()))
                cats.extend(categories)
            if not all(math.isfinite(v) for v in losses):
                raise TrainingError(f"non-finite loss at step {step}: {losses}")
            lr = lr_at_step(cfg, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()
            final_loss = sum(losses) / len(losses)
            from collections import Counter

            cat_summary = ",".join(f"{k}:{v}" for k, v in sorted(Counter(cats).items()))
            row = {
                "step": step,
                "lr": f"{lr:.10g}",
                "loss": f"{final_loss:.8f}",
                "bce": f"{sum(bces) / len(bces):.8f}",
                "dice": f"{sum(dices) / len(dices):.8f}",
                "category": cat_summary,
            }
            writer.writerow(row)
            log_rows.append(row)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.total_steps:
                _save_train_checkpoint(
                    out_dir / f"checkpoint_{step:06d}.ckpt", model, optimizer, cfg, model.cfg, step, rng
                )
    _save_train_checkpoint(ckpt_path, model, optimizer, cfg, model.cfg, cfg.total_steps, rng)
    return TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        steps=cfg.total_steps,
        final_loss=final_loss,
        log_rows=log_rows,
    )


@torch.no_grad()
def mean_train_iou(model: SegmentationModel, samples: list[Sample], loader, erode_kernel: int = 5, threshold: float = 0.5) -> float:
    """Mean IoU of thresholded predictions against the (preprocessed)
    training targets."""
    from .maskops import binary_iou

    size = model.cfg.image_size
    total = 0.0
    for sample in samples:
        image, mask = loader(sample)
        images, ids, token_mask, targets = _build_batch(model, [sample], loader, erode_kernel)
        logits = model.forward_batch(images, ids, token_mask)
        pred = (torch.sigmoid(logits[0]) >= threshold).numpy().astype(np.uint8)
        total += binary_iou(pred, targets[0].numpy().astype(np.uint8))
    return total / len(samples)
