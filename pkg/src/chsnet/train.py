"""Training loop with progressive cross-head supervision, and count evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .densitymap import PointAnnotations, generate_density_map
from .model import CHSNet, ModelConfig, load_checkpoint, pad_to_stride, save_checkpoint
from .supervision import chs_loss, dual_mse_loss, mask_overlap, schedule
from .synth import load_split

log = logging.getLogger(__name__)

HEADS = ("conv", "tran", "average")


@dataclass
class TrainConfig:
    learning_rate: float = 4.0e-5
    weight_decay: float = 1.0e-5
    max_epochs: int = 50
    lr_schedule: str = "cosine"
    crop_size: int = 128
    scale_range: tuple[float, float] = (0.8, 1.2)
    hflip_prob: float = 0.5
    batch_size: int = 8
    seed: int = 0
    delta_max: float = 0.1
    alpha_max: float = 1.0
    supervision: str = "chs"  # "chs" or "plain" (both heads supervised by ground truth only)
    reduction: str = "mean"
    kernel_size: int = 15
    sigma: float = 4.0
    density_scale: float = 1.0  # ground-truth maps are multiplied by this for training
    deterministic: bool = True

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.validate()

    def validate(self, stride: int | None = None) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"lr_schedule must be cosine or constant, got {self.lr_schedule!r}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("delta_max", "alpha_max"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.supervision not in ("chs", "plain"):
            raise ValueError(f"supervision must be chs or plain, got {self.supervision!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be mean or sum")
        if self.density_scale <= 0:
            raise ValueError("density_scale must be > 0")
        if stride is not None and self.crop_size % stride:
            raise ValueError(f"crop_size {self.crop_size} not divisible by encoder stride {stride}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


# --- data -------------------------------------------------------------------


Sample = tuple[np.ndarray, PointAnnotations]


@dataclass
class TrainData:
    train: list[Sample]
    val: list[Sample]

    @classmethod
    def load(cls, root: str | Path, train_split: str = "train") -> "TrainData":
        return cls(
            [(img, rec.ann) for img, rec in load_split(root, train_split)],
            [(img, rec.ann) for img, rec in load_split(root, "val")],
        )


def augment(image: np.ndarray, ann: PointAnnotations, cfg: TrainConfig, seed) -> tuple[np.ndarray, PointAnnotations]:
    """Random scale, random crop to ``cfg.crop_size`` and horizontal flip, applied to image and points alike.

    Scaled images smaller than the crop are zero-padded on the bottom/right.
    Points that fall outside the crop are dropped.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    _, h, w = image.shape
    crop = cfg.crop_size
    s = float(rng.uniform(*cfg.scale_range))
    pts = ann.points.copy()
    if s != 1.0:
        nh, nw = max(1, round(h * s)), max(1, round(w * s))
        t = torch.from_numpy(np.ascontiguousarray(image))[None]
        image = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False)[0].numpy()
        sx, sy = nw / w, nh / h
        pts[:, 0] = np.clip((pts[:, 0] + 0.5) * sx - 0.5, 0.0, nw - 1)
        pts[:, 1] = np.clip((pts[:, 1] + 0.5) * sy - 0.5, 0.0, nh - 1)
        h, w = nh, nw
    if h < crop or w < crop:
        padded = np.zeros((3, max(h, crop), max(w, crop)), dtype=image.dtype)
        padded[:, :h, :w] = image
        image = padded
        h, w = image.shape[1:]
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    image = image[:, y0 : y0 + crop, x0 : x0 + crop]
    pts = pts - np.array([x0, y0], dtype=np.float64)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < crop) & (pts[:, 1] >= 0) & (pts[:, 1] < crop)
    # points in the last partial pixel snap to the edge pixel anyway
    pts = np.clip(pts[inside], 0.0, crop - 1)
    if rng.random() < cfg.hflip_prob:
        image = image[:, :, ::-1]
        pts[:, 0] = crop - 1 - pts[:, 0]
    return np.ascontiguousarray(image, dtype=np.float32), PointAnnotations(pts, crop, crop)


def density_target(ann: PointAnnotations, cfg: TrainConfig, output_stride: int) -> np.ndarray:
    return generate_density_map(ann, cfg.kernel_size, cfg.sigma, output_stride).grid


def make_batch(samples: list[Sample], indices, cfg: TrainConfig, output_stride: int, rng: np.random.Generator,
               dtype=torch.float32):
    images, targets = [], []
    for idx in indices:
        img, ann = samples[idx]
        img, ann = augment(img, ann, cfg, rng)
        images.append(img)
        targets.append(density_target(ann, cfg, output_stride) * cfg.density_scale)
    x = torch.from_numpy(np.stack(images)).to(dtype)
    y = torch.from_numpy(np.stack(targets)[:, None]).to(dtype)
    return x, y


# --- evaluation -------------------------------------------------------------


def count_errors(pred, true) -> tuple[float, float]:
    """MAE and root-mean-squared error of counts (the field's "MSE")."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(true, dtype=np.float64)
    if d.size == 0:
        return math.nan, math.nan
    return float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d**2)))


def easy_hard_split(true_counts) -> tuple[np.ndarray, np.ndarray]:
    """Indices of easy and hard images; the floor(n/2) most crowded images are hard (ties by index)."""
    true_counts = np.asarray(true_counts, dtype=np.float64)
    order = np.argsort(-true_counts, kind="stable")
    n_hard = len(true_counts) // 2
    return np.sort(order[n_hard:]), np.sort(order[:n_hard])


@dataclass
class EvalReport:
    head: str
    mae: float
    mse: float
    per_image_counts: list[tuple[float, float]]
    easy_mae: float
    easy_mse: float
    hard_mae: float
    hard_mse: float

    @classmethod
    def from_counts(cls, head: str, pred, true) -> "EvalReport":
        pred = np.asarray(pred, dtype=np.float64)
        true = np.asarray(true, dtype=np.float64)
        if pred.size == 0:
            raise ValueError("cannot evaluate an empty dataset")
        easy, hard = easy_hard_split(true)
        mae, mse = count_errors(pred, true)
        emae, emse = count_errors(pred[easy], true[easy])
        hmae, hmse = count_errors(pred[hard], true[hard])
        return cls(head, mae, mse, [(float(p), float(t)) for p, t in zip(pred, true)], emae, emse, hmae, hmse)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_image_counts")
        return d


@torch.no_grad()
def predict_maps(model: CHSNet, images: list[np.ndarray], batch_size: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    """Evaluation-mode (conv, tran) maps for each image; inputs are zero-padded to the encoder stride."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i : i + batch_size]
        shapes = {im.shape for im in chunk}
        if len(shapes) > 1:
            # mixed sizes: fall back to one at a time
            for im in chunk:
                out.extend(predict_maps(model, [im], 1))
            continue
        x = pad_to_stride(torch.from_numpy(np.stack(chunk)).to(dtype), model.cfg.encoder_stride)
        p = model(x)
        for c, t in zip(p.conv[:, 0].double().numpy(), p.tran[:, 0].double().numpy()):
            out.append((c, t))
    return out


def evaluate_model(model: CHSNet, samples: list[Sample], density_scale: float = 1.0,
                   batch_size: int = 1) -> dict[str, EvalReport]:
    """Reports for the conv head, the transformer head, and their cellwise average."""
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    maps = predict_maps(model, [img for img, _ in samples], batch_size)
    true = [ann.count() for _, ann in samples]
    conv = np.array([c.sum() for c, _ in maps]) / density_scale
    tran = np.array([t.sum() for _, t in maps]) / density_scale
    avg = np.array([(0.5 * (c + t)).sum() for c, t in maps]) / density_scale
    return {
        "conv": EvalReport.from_counts("conv", conv, true),
        "tran": EvalReport.from_counts("tran", tran, true),
        "average": EvalReport.from_counts("average", avg, true),
    }


def evaluate(checkpoint: str | Path, dataset: str | Path, head: str = "average", split: str = "val",
             batch_size: int = 1) -> EvalReport:
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    model, payload = load_checkpoint(checkpoint)
    samples = [(img, rec.ann) for img, rec in load_split(dataset, split)]
    for img, _ in samples:
        if img.shape[1] % model.cfg.output_stride or img.shape[2] % model.cfg.output_stride:
            raise ValueError(f"image size {img.shape[1:]} incompatible with output stride {model.cfg.output_stride}")
    scale = payload.get("train_config", {}).get("density_scale", 1.0)
    return evaluate_model(model, samples, scale, batch_size)[head]


# --- training ---------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: CHSNet
    history: list[dict]
    step_losses: list[float]
    best_mae: float
    out_dir: Path | None = None
    reports: dict = field(default_factory=dict)


def _jsonl_append(path: Path | None, record: dict) -> None:
    if path is None:
        return
    with path.open("a") as fh:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def _set_determinism(cfg: TrainConfig) -> None:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)


def build_optimizer(model: CHSNet, cfg: TrainConfig):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.max_epochs)
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    return opt, sched


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    data: TrainData | str | Path,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
    dtype=torch.float32,
) -> TrainResult:
    """Train both heads; epoch ``i`` (1-based) uses the schedule value at ``i`` of ``max_epochs``.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per epoch),
    ``supervision.jsonl``, ``steps.jsonl``, and ``last.pt``/``best.pt``.
    ``stop_after`` ends the run early after that epoch (for interrupt/resume).
    """
    cfg.validate(model_cfg.encoder_stride)
    if not isinstance(data, TrainData):
        data = TrainData.load(data)
    if not data.train:
        raise ValueError("training split is empty")
    _set_determinism(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    start_epoch, best_mae = 0, math.inf
    if resume is not None:
        model, payload = load_checkpoint(resume, expected=model_cfg)
        model.to(dtype)
        opt, sched = build_optimizer(model, cfg)
        opt.load_state_dict(payload["optimizer"])
        sched.load_state_dict(payload["lr_scheduler"])
        start_epoch = payload["epoch"]
        best_mae = payload.get("best_mae", math.inf)
    else:
        model = CHSNet(model_cfg).to(dtype)
        opt, sched = build_optimizer(model, cfg)
        if out is not None:
            for name in ("metrics.jsonl", "supervision.jsonl", "steps.jsonl"):
                (out / name).write_text("")

    stride = model_cfg.output_stride
    metrics_path = out / "metrics.jsonl" if out else None
    sup_path = out / "supervision.jsonl" if out else None
    steps_path = out / "steps.jsonl" if out else None
    history, step_losses, reports = [], [], {}
    T = cfg.max_epochs
    last_epoch = T if stop_after is None else min(T, stop_after)

    for epoch in range(start_epoch + 1, last_epoch + 1):
        delta, alpha = schedule(epoch, T, cfg.delta_max, cfg.alpha_max)
        rng = np.random.Generator(np.random.PCG64([cfg.seed, epoch]))
        order = rng.permutation(len(data.train))
        model.train()
        sums = np.zeros(3)
        overlaps = []
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            x, y = make_batch(data.train, order[start : start + cfg.batch_size], cfg, stride, rng, dtype)
            pred = model(x)
            if cfg.supervision == "chs":
                res = chs_loss(pred.conv, pred.tran, y, delta, alpha, cfg.reduction)
                loss, lc, lt = res.loss, res.conv_loss, res.tran_loss
                ov = mask_overlap(res.conv_mask, res.tran_mask)
                if ov is not None:
                    overlaps.append(ov)
            else:
                loss, lc, lt = dual_mse_loss(pred.conv, pred.tran, y, cfg.reduction)
            if not torch.isfinite(loss):
                msg = f"non-finite loss {loss.item()} at epoch {epoch}, batch {b} (delta={delta}, alpha={alpha})"
                if out is not None:
                    torch.save({"images": x, "targets": y, "epoch": epoch, "batch": b,
                                "delta": delta, "alpha": alpha}, out / "diverged_batch.pt")
                raise TrainingDiverged(msg)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            vals = (loss.item(), lc.item(), lt.item())
            sums += vals
            n_batches += 1
            step_losses.append(vals[0])
            _jsonl_append(steps_path, {"epoch": epoch, "step": b, "loss": vals[0],
                                       "conv_loss": vals[1], "tran_loss": vals[2]})
        sched.step()

        reports = evaluate_model(model, data.val, cfg.density_scale) if data.val else {}
        train_loss, conv_loss, tran_loss = (sums / n_batches).tolist()
        rec = {
            "epoch": epoch,
            "delta_i": delta,
            "alpha_i": alpha,
            "train_loss": train_loss,
            "val_mae": reports["average"].mae if reports else None,
            "val_mse": reports["average"].mse if reports else None,
        }
        for h in ("conv", "tran"):
            if reports:
                rec[f"val_mae_{h}"] = reports[h].mae
                rec[f"val_mse_{h}"] = reports[h].mse
        history.append(rec)
        _jsonl_append(metrics_path, rec)
        _jsonl_append(sup_path, {
            "epoch": epoch, "delta_i": delta, "alpha_i": alpha,
            "mask_overlap": float(np.mean(overlaps)) if overlaps else None,
            "conv_loss": conv_loss, "tran_loss": tran_loss,
        })
        log.info("epoch %d/%d delta=%.4f alpha=%.4f loss=%.6g val_mae=%s", epoch, T, delta, alpha,
                 train_loss, rec["val_mae"])

        improved = reports and reports["average"].mae < best_mae
        if improved:
            best_mae = reports["average"].mae
        if out is not None:
            state = dict(
                optimizer=opt.state_dict(),
                lr_scheduler=sched.state_dict(),
                schedule_state={"delta_i": delta, "alpha_i": alpha, "T": T,
                                "delta_max": cfg.delta_max, "alpha_max": cfg.alpha_max},
                train_config=cfg.to_dict(),
                best_mae=best_mae,
            )
            save_checkpoint(out / "last.pt", model, epoch, **state)
            if improved:
                save_checkpoint(out / "best.pt", model, epoch, **state)

    return TrainResult(model, history, step_losses, best_mae, out, reports)
