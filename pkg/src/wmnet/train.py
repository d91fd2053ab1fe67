"""Training and evaluation loops for the desk-scale detector."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from wmnet import checkpoint as ckpt_io
from wmnet.bench import NUM_CLASSES, DatasetSpec, DetectionSet, Sample, generate_split, read_split
from wmnet.config import ExperimentConfig
from wmnet.metrics import compute_map
from wmnet.model import HEAD_STRIDE, WMNet, build_model
from wmnet.validation import ValidationError

log = logging.getLogger(__name__)

SIZE_WEIGHT = 0.1
OFFSET_WEIGHT = 1.0
TOP_K = 20


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------- data


@lru_cache(maxsize=8)
def _generated(dspec: DatasetSpec, split: str) -> tuple:
    return tuple(generate_split(dspec, split))


def load_split(cfg: ExperimentConfig, split: str) -> List[Sample]:
    if split not in ("train", "val"):
        raise ValidationError(f"unknown split {split!r}")
    if cfg.data_dir:
        directory = Path(cfg.data_dir) / split
        if not directory.exists():
            raise ValidationError(f"split {split!r} missing under {cfg.data_dir}")
        samples = read_split(directory)
    else:
        samples = list(_generated(cfg.dataset_spec(), split))
    return samples


def gaussian_radius(h: float, w: float, min_overlap: float = 0.7) -> float:
    """Largest corner shift keeping IoU >= ``min_overlap`` (the usual CenterNet bound)."""
    b1, c1 = h + w, w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * c1)) / 2
    b2, c2 = 2 * (h + w), (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2**2 - 16 * c2)) / 2
    a3, b3, c3 = 4 * min_overlap, -2 * min_overlap * (h + w), (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def encode_targets(gt: DetectionSet, canvas: int, stride: int = HEAD_STRIDE) -> Dict[str, np.ndarray]:
    n = canvas // stride
    heat = np.zeros((NUM_CLASSES, n, n), np.float32)
    size = np.zeros((2, n, n), np.float32)
    offset = np.zeros((2, n, n), np.float32)
    mask = np.zeros((n, n), np.float32)
    ys, xs = np.mgrid[0:n, 0:n]
    for box, cls in zip(gt.boxes, gt.classes):
        w, h = (box[2] - box[0]) / stride, (box[3] - box[1]) / stride
        cx, cy = (box[0] + box[2]) / 2 / stride, (box[1] + box[3]) / 2 / stride
        ix, iy = min(int(cx), n - 1), min(int(cy), n - 1)
        radius = max(0, int(gaussian_radius(math.ceil(h), math.ceil(w))))
        sigma = (2 * radius + 1) / 6
        g = np.exp(-((xs - ix) ** 2 + (ys - iy) ** 2) / (2 * sigma**2)).astype(np.float32)
        heat[cls] = np.maximum(heat[cls], g)
        heat[cls, iy, ix] = 1.0
        size[:, iy, ix] = (w, h)
        offset[:, iy, ix] = (cx - ix, cy - iy)
        mask[iy, ix] = 1.0
    return {"heatmap": heat, "size": size, "offset": offset, "mask": mask}


@dataclass
class Batchable:
    rgb: torch.Tensor  # (N, 3, H, W)
    ir: torch.Tensor  # (N, 1, H, W)
    targets: Dict[str, torch.Tensor]
    gts: List[DetectionSet]
    ids: List[str]

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx) -> tuple:
        return self.rgb[idx], self.ir[idx], {k: v[idx] for k, v in self.targets.items()}


def tensorize(samples: Sequence[Sample]) -> Batchable:
    if not samples:
        raise ValidationError("split is empty")
    canvas = samples[0].rgb.shape[0]
    rgb = torch.from_numpy(np.stack([s.rgb for s in samples])).permute(0, 3, 1, 2).contiguous()
    ir = torch.from_numpy(np.stack([s.ir for s in samples])).permute(0, 3, 1, 2).contiguous()
    encoded = [encode_targets(s.gt, canvas) for s in samples]
    targets = {k: torch.from_numpy(np.stack([e[k] for e in encoded])) for k in encoded[0]}
    return Batchable(rgb, ir, targets, [s.gt for s in samples], [s.image_id for s in samples])


# --------------------------------------------------------------------------- loss


def focal_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced focal loss on a Gaussian-splatted center heatmap."""
    pred = torch.sigmoid(logits).clamp(1e-4, 1 - 1e-4)
    pos = target.eq(1).float()
    neg = 1 - pos
    pos_loss = torch.log(pred) * (1 - pred) ** 2 * pos
    neg_loss = torch.log(1 - pred) * pred**2 * (1 - target) ** 4 * neg
    num_pos = pos.sum().clamp_min(1.0)
    return -(pos_loss.sum() + neg_loss.sum()) / num_pos


def detection_loss(out: Dict[str, torch.Tensor], tgt: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    mask = tgt["mask"].unsqueeze(1)
    denom = mask.sum().clamp_min(1.0)
    center = focal_loss(out["heatmap"], tgt["heatmap"])
    size = (F.l1_loss(out["size"], tgt["size"], reduction="none") * mask).sum() / denom
    offset = (F.l1_loss(out["offset"], tgt["offset"], reduction="none") * mask).sum() / denom
    total = center + SIZE_WEIGHT * size + OFFSET_WEIGHT * offset
    return {"loss": total, "center": center, "size": size, "offset": offset}


# --------------------------------------------------------------------------- decoding


@torch.no_grad()
def decode(out: Dict[str, torch.Tensor], canvas: int, k: int = TOP_K,
           stride: int = HEAD_STRIDE) -> List[DetectionSet]:
    heat = torch.sigmoid(out["heatmap"])
    peaks = heat * (F.max_pool2d(heat, 3, 1, 1) == heat)
    b, c, h, w = heat.shape
    scores, flat = peaks.flatten(1).topk(min(k, c * h * w), dim=1)
    cls = flat // (h * w)
    cell = flat % (h * w)
    iy, ix = cell // w, cell % w
    results = []
    for i in range(b):
        off = out["offset"][i, :, iy[i], ix[i]]
        wh = out["size"][i, :, iy[i], ix[i]].clamp_min(0)
        cx = (ix[i].float() + off[0]) * stride
        cy = (iy[i].float() + off[1]) * stride
        bw, bh = wh[0] * stride, wh[1] * stride
        boxes = torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=1).clamp(0, canvas)
        keep = scores[i] > 0
        results.append(DetectionSet(boxes[keep].double().numpy(), cls[i][keep].numpy(),
                                    scores[i][keep].double().clamp(0, 1).numpy()))
    return results


# --------------------------------------------------------------------------- loops


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


@dataclass
class TrainResult:
    model: WMNet
    checkpoint: ckpt_io.Checkpoint
    path: Optional[Path] = None


def _dump_batch(out_dir: Path, step: int, rgb, ir, tgt, parts) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"nan_batch_step{step}.pt"
    torch.save({"rgb": rgb, "ir": ir, "targets": tgt,
                "loss_parts": {k: float(v) for k, v in parts.items()}}, path)
    return path


def train(cfg: ExperimentConfig, write: bool = True, train_data: Optional[Batchable] = None,
          val_data: Optional[Batchable] = None) -> TrainResult:
    """SGD with cosine decay; returns the model and its checkpoint (also written when ``write``)."""
    gen = seed_everything(cfg.seed)
    train_data = train_data or tensorize(load_split(cfg, "train"))
    model = build_model(cfg)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay, nesterov=True)
    steps_per_epoch = math.ceil(len(train_data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / total)))
    out_dir = Path(cfg.output_dir)
    history: List[dict] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(len(train_data), generator=gen)
        running, start = 0.0, time.perf_counter()
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            rgb, ir, tgt = train_data.batch(idx)
            try:
                parts = detection_loss(model(rgb, ir), tgt)
            except ValidationError as exc:
                path = _dump_batch(out_dir, step, rgb, ir, tgt, {})
                raise TrainingDiverged(f"non-finite activations at step {step} ({exc}); batch dumped to {path}") from exc
            if not torch.isfinite(parts["loss"]):
                path = _dump_batch(out_dir, step, rgb, ir, tgt, parts)
                raise TrainingDiverged(f"loss became {parts['loss'].item()} at step {step}; batch dumped to {path}")
            opt.zero_grad(set_to_none=True)
            parts["loss"].backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 10.0)
            opt.step()
            sched.step()
            step += 1
            running += parts["loss"].item() * len(idx)
        record = {"epoch": epoch, "loss": running / len(train_data), "lr": sched.get_last_lr()[0],
                  "seconds": round(time.perf_counter() - start, 3)}
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            metrics = evaluate_model(model, val_data or tensorize(load_split(cfg, "val")))
            record.update({"mAP@0.5": metrics["mAP@0.5"], "mAP": metrics["mAP"]})
        history.append(record)
        log.info("epoch %d loss %.4f", epoch, record["loss"])
    ckpt = ckpt_io.from_module(model, cfg.to_text(), history)
    path = None
    if write:
        path = out_dir / "checkpoint.wmck"
        ckpt_io.save(ckpt, path)
        with open(out_dir / "metrics.jsonl", "a") as fh:
            for record in history:
                fh.write(json.dumps({"kind": "train", "config_hash": cfg.hash(), **record}) + "\n")
    return TrainResult(model, ckpt, path)


@torch.no_grad()
def predict(model: WMNet, data: Batchable, batch_size: int = 32) -> List[DetectionSet]:
    model.eval()
    canvas = data.rgb.shape[-1]
    preds: List[DetectionSet] = []
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        rgb, ir, _ = data.batch(idx)
        preds.extend(decode(model(rgb, ir), canvas))
    return preds


def evaluate_model(model: WMNet, data: Batchable, oracle: bool = False) -> Dict:
    """mAP metrics on ``data``; ``oracle`` replaces predictions with the ground truth (debug hook)."""
    preds = list(data.gts) if oracle else predict(model, data)
    raw = compute_map(preds, data.gts, classes=range(NUM_CLASSES))
    per_class = {str(c): {"AP@0.5": v[0.5], "AP": float(np.mean(list(v.values())))}
                 for c, v in raw["per_class"].items()}
    return {"mAP@0.5": raw["mAP@0.5"], "mAP": raw["mAP"], "per_class": per_class}


def model_from_checkpoint(ckpt: ckpt_io.Checkpoint) -> WMNet:
    cfg = ExperimentConfig.from_text(ckpt.config_text)
    model = build_model(cfg)
    state = ckpt.state_dict()
    reference = model.state_dict()
    for key, value in state.items():
        if key in reference:
            state[key] = value.to(reference[key].dtype)
    model.load_state_dict(state)
    return model


def evaluate(checkpoint: Union[str, Path, ckpt_io.Checkpoint], split: str = "val",
             oracle: bool = False, log_path: Optional[Union[str, Path]] = None) -> Dict:
    """Evaluate a checkpoint on a split; appends the metrics object to ``log_path`` if given."""
    ckpt = ckpt_io.load(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    cfg = ExperimentConfig.from_text(ckpt.config_text)
    model = model_from_checkpoint(ckpt)
    data = tensorize(load_split(cfg, split))
    metrics = {"split": split, "config_hash": cfg.hash(), **evaluate_model(model, data, oracle)}
    if log_path is not None:
        with open(log_path, "a") as fh:
            fh.write(json.dumps({"kind": "eval", **metrics}) + "\n")
    return metrics
