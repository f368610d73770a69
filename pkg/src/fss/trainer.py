"""Two-stage support-set training: loss, poly LR schedule, stages, LR search.

Stage 1 trains a probe head on frozen features. Stage 2 applies a
method's parameter surgery (SVF, LoRA, BitFit, or full unfreeze) and
trains the method's parameters together with the head at a reduced batch
size; the probe-only methods skip it. Surgeries are init-transparent, so
the stage-2 starting loss equals the stage-1 final loss.

Support losses recorded in StageResult are eval-mode means over the
un-augmented support set, which makes them comparable across stages.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from fss.adaptation import (
    LinearHead,
    MultilayerHead,
    TrainableReport,
    bitfit_mark,
    finetune_mark,
    freeze_all,
    lora_inject,
    svf_inject,
    trainable_fraction,
)
from fss.datamodel import ClassCatalog, FewShotTask, LabelMask, SegSample
from fss.datasets import AugmentationConfig, augment, resize_to, sample_rng
from fss.encoders import FeatureExtractor, extract, extract_taps

METHODS = ("linear", "multilayer", "svf", "lora", "bitfit", "finetune")

DEFAULT_LR_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
LINEAR_LR_PRESETS = {"cityscapes": 0.2, "coco": 0.05, "ppd": 0.001}
EPOCH_PRESETS = {"cityscapes": 200, "ppd": 200, "coco": 100, "synthetic": 30}


def poly_lr(step: int, total_steps: int, base_lr: float, power: float = 0.9) -> float:
    """Polynomial decay, applied per optimization step."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


@dataclass(frozen=True)
class OptimizerSpec:
    name: str = "adamw"
    weight_decay: float = 0.01
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self) -> None:
        if self.name not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "weight_decay": self.weight_decay,
            "momentum": self.momentum,
            "betas": list(self.betas),
        }

    @classmethod
    def from_dict(cls, d: dict) -> OptimizerSpec:
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def build_optimizer(
    params: Iterable[torch.nn.Parameter], spec: OptimizerSpec, lr: float
) -> torch.optim.Optimizer:
    params = list(params)
    if not params:
        raise ValueError("no trainable parameters to optimize")
    if spec.name == "adamw":
        return torch.optim.AdamW(
            params, lr=lr, betas=spec.betas, weight_decay=spec.weight_decay
        )
    return torch.optim.SGD(
        params, lr=lr, momentum=spec.momentum, weight_decay=spec.weight_decay
    )


@dataclass(frozen=True)
class TrainConfig:
    method: str = "linear"
    base_lr: float = 0.2
    stage2_lr: float | None = None  # falls back to base_lr
    lr_power: float = 0.9
    epochs: int = 30
    batch_size_stage1: int = 4
    batch_size_stage2: int = 2
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    seed: int = 0
    augmentation: AugmentationConfig | None = None
    n_taps: int = 4
    lora_rank: int = 4
    lora_alpha: float | None = None
    lora_targets: tuple[str, ...] = ("q", "v")
    svf_targets: tuple[str, ...] | None = None
    bn_momentum: float | None = None
    single_image_running_stats: bool = False

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.base_lr <= 0 or (self.stage2_lr is not None and self.stage2_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size_stage1 < 1 or self.batch_size_stage2 < 1:
            raise ValueError("epochs and batch sizes must be positive")

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "base_lr": self.base_lr,
            "stage2_lr": self.stage2_lr,
            "lr_power": self.lr_power,
            "epochs": self.epochs,
            "batch_size_stage1": self.batch_size_stage1,
            "batch_size_stage2": self.batch_size_stage2,
            "optimizer": self.optimizer.to_dict(),
            "seed": self.seed,
            "augmentation": None,
            "n_taps": self.n_taps,
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "lora_targets": list(self.lora_targets),
            "svf_targets": list(self.svf_targets) if self.svf_targets else None,
            "bn_momentum": self.bn_momentum,
            "single_image_running_stats": self.single_image_running_stats,
        }
        if self.augmentation is not None:
            a = self.augmentation
            d["augmentation"] = {
                "hflip_prob": a.hflip_prob,
                "scale_range": list(a.scale_range),
                "crop_size": list(a.crop_size),
                "randaug_n": a.randaug_n,
                "randaug_magnitude": a.randaug_magnitude,
                "randaug_ops": list(a.randaug_ops),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("optimizer"), dict):
            d["optimizer"] = OptimizerSpec.from_dict(d["optimizer"])
        aug = d.get("augmentation")
        if isinstance(aug, dict):
            aug = dict(aug)
            for key in ("scale_range", "crop_size", "randaug_ops"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            d["augmentation"] = AugmentationConfig(**aug)
        for key in ("lora_targets", "svf_targets"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class StageResult:
    stage: int
    method: str
    base_lr: float
    loss_curve: tuple[float, ...]
    initial_support_loss: float
    support_loss: float
    steps: int
    wall_time_s: float
    trainable: TrainableReport | None = None
    skipped: bool = False

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "method": self.method,
            "base_lr": self.base_lr,
            "loss_curve": list(self.loss_curve),
            "initial_support_loss": self.initial_support_loss,
            "support_loss": self.support_loss,
            "steps": self.steps,
            "wall_time_s": self.wall_time_s,
            "trainable": self.trainable.to_dict() if self.trainable else None,
            "skipped": self.skipped,
        }


# ---------------------------------------------------------------------------
# Losses and tensor plumbing
# ---------------------------------------------------------------------------

_IGNORE_INDEX = -100  # torch's cross_entropy default, reused for remapped targets


def _index_lut(catalog: ClassCatalog) -> np.ndarray:
    """Class id -> classifier channel index; everything else -> ignore."""
    size = max(max(catalog.class_ids), catalog.ignore_id) + 1
    lut = np.full(size, _IGNORE_INDEX, dtype=np.int64)
    for idx, cid in enumerate(catalog.class_ids):
        lut[cid] = idx
    return lut


def _mask_to_target(mask: np.ndarray, catalog: ClassCatalog) -> torch.Tensor:
    return torch.from_numpy(_index_lut(catalog)[mask])


def _image_to_tensor(image: np.ndarray) -> torch.Tensor:
    # copy: sample arrays are read-only and torch wants writable memory
    return torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)


def seg_loss(logits: torch.Tensor, gt: LabelMask) -> torch.Tensor:
    """Pixel-wise cross-entropy averaged over non-ignore pixels.

    Classifier channels follow catalog order. Accepts (C, H, W) or
    (1, C, H, W) logits for a single mask.
    """
    if logits.ndim == 3:
        logits = logits.unsqueeze(0)
    if logits.ndim != 4 or logits.shape[0] != 1:
        raise ValueError(f"expected logits for one mask, got shape {tuple(logits.shape)}")
    if tuple(logits.shape[2:]) != gt.shape:
        raise ValueError(f"logits spatial dims {tuple(logits.shape[2:])} != mask {gt.shape}")
    target = _mask_to_target(gt.data, gt.catalog).unsqueeze(0)
    if not (target != _IGNORE_INDEX).any():
        raise ValueError("mask has no non-ignore pixels")
    return F.cross_entropy(logits, target, ignore_index=_IGNORE_INDEX)


def _batch_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if not (targets != _IGNORE_INDEX).any():
        raise ValueError("batch has no non-ignore pixels")
    return F.cross_entropy(logits, targets, ignore_index=_IGNORE_INDEX)


# ---------------------------------------------------------------------------
# Stage execution
# ---------------------------------------------------------------------------


def _head_logits(
    encoder: FeatureExtractor,
    head: LinearHead | MultilayerHead,
    images: torch.Tensor,
    out_hw: tuple[int, int],
    encoder_grad: bool,
) -> torch.Tensor:
    def run() -> torch.Tensor:
        if isinstance(head, MultilayerHead):
            taps = extract_taps(encoder, images, head.n_taps)
            return head(taps, out_hw)
        return head(extract(encoder, images), out_hw)

    if encoder_grad:
        return run()
    with torch.no_grad():
        if isinstance(head, MultilayerHead):
            taps: torch.Tensor | tuple = tuple(
                t.detach() for t in extract_taps(encoder, images, head.n_taps)
            )
        else:
            taps = extract(encoder, images).detach()
    return head(taps, out_hw)


def _prepare_view(
    sample: SegSample,
    cfg: TrainConfig,
    encoder: FeatureExtractor,
    stage: int,
    epoch: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    if cfg.augmentation is not None:
        rng = sample_rng(cfg.seed, "view", stage, epoch, sample.image_id)
        sample = augment(sample, cfg.augmentation, rng)
        image = resize_to(sample, encoder.native_resolution).image
        mask = sample.mask.data
    else:
        sample = resize_to(sample, encoder.native_resolution)
        image, mask = sample.image, sample.mask.data
    return _image_to_tensor(image), _mask_to_target(mask, sample.mask.catalog)


def support_loss_eval(
    task: FewShotTask, encoder: FeatureExtractor, head: LinearHead | MultilayerHead
) -> float:
    """Eval-mode mean cross-entropy over the un-augmented support set.

    Each sample is resized to the encoder's native input, logits are
    upsampled back to the label resolution, and per-sample losses average
    with equal weight.
    """
    enc_mode, head_mode = encoder.training, head.training
    encoder.eval()
    head.eval()
    losses = []
    with torch.no_grad():
        for s in task.support:
            img = _image_to_tensor(resize_to(s, encoder.native_resolution).image)[None]
            logits = _head_logits(encoder, head, img, s.mask.shape, encoder_grad=False)
            losses.append(float(seg_loss(logits, s.mask)))
    encoder.train(enc_mode)
    head.train(head_mode)
    return float(np.mean(losses))


def _run_stage(
    task: FewShotTask,
    encoder: FeatureExtractor,
    head: LinearHead | MultilayerHead,
    cfg: TrainConfig,
    *,
    stage: int,
    base_lr: float,
    batch_size: int,
    encoder_grad: bool,
) -> tuple[tuple[float, ...], int]:
    params = [p for p in encoder.parameters() if p.requires_grad]
    params += [p for p in head.parameters() if p.requires_grad]
    opt = build_optimizer(params, cfg.optimizer, base_lr)

    n = len(task.support)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    curve: list[float] = []
    encoder.train(encoder_grad)
    head.train()
    for epoch in range(cfg.epochs):
        order = sample_rng(cfg.seed, "order", stage, epoch).permutation(n)
        epoch_losses: list[float] = []
        for b in range(0, n, batch_size):
            views = [
                _prepare_view(task.support[i], cfg, encoder, stage, epoch)
                for i in order[b : b + batch_size]
            ]
            images = torch.stack([v[0] for v in views])
            targets = torch.stack([v[1] for v in views])

            lr = poly_lr(step, total_steps, base_lr, cfg.lr_power)
            for group in opt.param_groups:
                group["lr"] = lr
            logits = _head_logits(
                encoder, head, images, tuple(targets.shape[-2:]), encoder_grad
            )
            loss = _batch_ce(logits, targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        curve.append(float(np.mean(epoch_losses)))
    encoder.eval()
    head.eval()
    return tuple(curve), step


def train_stage1(
    task: FewShotTask, encoder: FeatureExtractor, cfg: TrainConfig
) -> tuple[LinearHead | MultilayerHead, StageResult]:
    """Train a probe head on the frozen encoder (the stage every method
    shares); returns the head and its stage record."""
    t0 = time.perf_counter()
    freeze_all(encoder)
    encoder.eval()
    n_classes = task.catalog.n_classes
    if cfg.method == "multilayer":
        if cfg.n_taps > encoder.n_blocks:
            raise ValueError(
                f"n_taps {cfg.n_taps} exceeds encoder depth {encoder.n_blocks}"
            )
        head: LinearHead | MultilayerHead = MultilayerHead(
            encoder.embed_dim,
            cfg.n_taps,
            n_classes,
            bn_momentum=cfg.bn_momentum,
            single_image_running_stats=cfg.single_image_running_stats,
            seed=cfg.seed,
        )
    else:
        head = LinearHead(
            encoder.embed_dim,
            n_classes,
            bn_momentum=cfg.bn_momentum,
            single_image_running_stats=cfg.single_image_running_stats,
            seed=cfg.seed,
        )

    initial = support_loss_eval(task, encoder, head)
    curve, steps = _run_stage(
        task,
        encoder,
        head,
        cfg,
        stage=1,
        base_lr=cfg.base_lr,
        batch_size=cfg.batch_size_stage1,
        encoder_grad=False,
    )
    result = StageResult(
        stage=1,
        method=cfg.method,
        base_lr=cfg.base_lr,
        loss_curve=curve,
        initial_support_loss=initial,
        support_loss=support_loss_eval(task, encoder, head),
        steps=steps,
        wall_time_s=time.perf_counter() - t0,
        trainable=trainable_fraction({"encoder": encoder, "head": head}),
    )
    return head, result


def apply_method(encoder: FeatureExtractor, method: str, cfg: TrainConfig) -> None:
    """Perform the method's parameter surgery on the encoder in place.

    Probe-only methods are a no-op (the encoder stays frozen)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method in ("linear", "multilayer"):
        return
    if method == "svf":
        svf_inject(encoder, cfg.svf_targets)
    elif method == "lora":
        lora_inject(
            encoder,
            cfg.lora_targets,
            rank=cfg.lora_rank,
            alpha=cfg.lora_alpha,
            seed=cfg.seed,
        )
    elif method == "bitfit":
        bitfit_mark(encoder)
    else:
        finetune_mark(encoder)


def train_stage2(
    task: FewShotTask,
    encoder: FeatureExtractor,
    head: LinearHead | MultilayerHead,
    method: str,
    cfg: TrainConfig,
    stage1_result: StageResult | None = None,
    *,
    apply_surgery: bool = True,
) -> StageResult:
    """Apply the method's surgery and fine-tune its parameters + head.

    Probe-only methods return the stage-1 result unchanged. Surgery is
    init-transparent, so initial_support_loss matches the stage-1 final
    support loss. Pass apply_surgery=False when apply_method already ran
    on this encoder.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method in ("linear", "multilayer"):
        if stage1_result is not None:
            return stage1_result
        loss = support_loss_eval(task, encoder, head)
        return StageResult(
            stage=2,
            method=method,
            base_lr=0.0,
            loss_curve=(),
            initial_support_loss=loss,
            support_loss=loss,
            steps=0,
            wall_time_s=0.0,
            trainable=trainable_fraction({"encoder": encoder, "head": head}),
            skipped=True,
        )

    t0 = time.perf_counter()
    if apply_surgery:
        apply_method(encoder, method, cfg)

    base_lr = cfg.stage2_lr if cfg.stage2_lr is not None else cfg.base_lr
    initial = support_loss_eval(task, encoder, head)
    curve, steps = _run_stage(
        task,
        encoder,
        head,
        cfg,
        stage=2,
        base_lr=base_lr,
        batch_size=cfg.batch_size_stage2,
        encoder_grad=True,
    )
    return StageResult(
        stage=2,
        method=method,
        base_lr=base_lr,
        loss_curve=curve,
        initial_support_loss=initial,
        support_loss=support_loss_eval(task, encoder, head),
        steps=steps,
        wall_time_s=time.perf_counter() - t0,
        trainable=trainable_fraction({"encoder": encoder, "head": head}),
    )


def predict_masks(
    samples: Iterable[SegSample],
    encoder: FeatureExtractor,
    head: LinearHead | MultilayerHead,
    catalog: ClassCatalog,
) -> Iterable[tuple[np.ndarray, LabelMask]]:
    """Yield (predicted id mask, ground truth) per sample, eval mode.

    Inference never augments: images resize to the encoder's native
    input and logits upsample to each mask's own resolution.
    """
    encoder.eval()
    head.eval()
    ids = np.asarray(catalog.class_ids, dtype=np.int64)
    with torch.no_grad():
        for s in samples:
            img = _image_to_tensor(resize_to(s, encoder.native_resolution).image)[None]
            logits = _head_logits(encoder, head, img, s.mask.shape, encoder_grad=False)
            yield ids[logits.argmax(dim=1)[0].numpy()], s.mask


def evaluate(
    samples: Iterable[SegSample],
    encoder: FeatureExtractor,
    head: LinearHead | MultilayerHead,
    catalog: ClassCatalog,
) -> "ConfusionMatrix":
    """Dataset-wide confusion matrix of argmax predictions."""
    from fss.metrics import ConfusionMatrix

    cm = ConfusionMatrix(catalog)
    for pred, gt in predict_masks(samples, encoder, head, catalog):
        cm.update(pred, gt)
    return cm


def run_task(
    task: FewShotTask, encoder: FeatureExtractor, cfg: TrainConfig
) -> tuple[LinearHead | MultilayerHead, StageResult, StageResult, "ConfusionMatrix"]:
    """Full pipeline on one task: stage 1, stage 2, query evaluation."""
    head, r1 = train_stage1(task, encoder, cfg)
    r2 = train_stage2(task, encoder, head, cfg.method, cfg, r1)
    cm = evaluate(task.query, encoder, head, task.catalog)
    return head, r1, r2, cm


def grid_search_lr(
    tasks: Sequence[FewShotTask],
    encoder_factory: Callable[[], FeatureExtractor],
    cfg_template: TrainConfig,
    grid: Sequence[float] = DEFAULT_LR_GRID,
) -> tuple[float, dict[float, float]]:
    """Pick the learning rate with the best mean query mIoU over tasks.

    Probe-only methods search over the stage-1 LR; the others search the
    stage-2 LR while stage 1 keeps the template's base_lr. Ties break
    toward the larger rate. Individual run failures drop into the lr's
    mean; a grid value with no surviving run scores NaN, and an all-NaN
    table raises with per-lr diagnostics.
    """
    if not grid:
        raise ValueError("empty learning-rate grid")
    probe_only = cfg_template.method in ("linear", "multilayer")
    scores: dict[float, float] = {}
    failures: dict[float, list[str]] = {}
    for lr in grid:
        cfg = (
            replace(cfg_template, base_lr=lr)
            if probe_only
            else replace(cfg_template, stage2_lr=lr)
        )
        vals: list[float] = []
        for t in tasks:
            try:
                _, _, _, cm = run_task(t, encoder_factory(), cfg)
                vals.append(cm.miou()[0])
            except Exception as e:  # noqa: BLE001 - diagnostics, not control flow
                failures.setdefault(lr, []).append(f"seed {t.seed}: {type(e).__name__}: {e}")
        scores[lr] = float(np.mean(vals)) if vals else float("nan")

    if all(np.isnan(v) for v in scores.values()):
        detail = "; ".join(f"lr={lr:g}: {msgs}" for lr, msgs in failures.items())
        raise RuntimeError(f"every grid run failed: {detail}")

    best_lr = None
    best_score = -np.inf
    for lr in sorted(scores):
        v = scores[lr]
        if not np.isnan(v) and v >= best_score:
            best_lr, best_score = lr, v
    return float(best_lr), scores
