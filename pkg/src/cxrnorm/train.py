"""Losses, optimizer schedule, and the training loop.

The regression branch uses mean squared error on normalized targets; the
segmentation branch uses soft-margin loss against {-1, +1} masks, normed
by ln 2 so an uninformative zero-logit model scores exactly 1.  Total
loss is the equally weighted average of the two normed branch losses.
Optimization is SGD with momentum 0.9, learning rate 1e-3 decayed by a
factor of 0.2 every 20 epochs.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import IoFailure, ShapeMismatch, ToolkitError
from .weights import load_manifest, save_manifest
from .ynet import YNet

LN2 = math.log(2.0)


class InvalidTarget(ToolkitError):
    pass


class DivergenceDetected(ToolkitError):
    def __init__(self, msg: str, last_good_epoch: int | None = None):
        super().__init__(msg)
        self.last_good_epoch = last_good_epoch


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    momentum: float = 0.9
    lr_decay: float = 0.2
    lr_step_epochs: int = 20
    epochs: int = 10          # desk-scale default; the reference schedule ran 42
    batch_size: int = 32
    val_fraction: float = 0.05
    seed: int = 0
    loss_weights: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if abs(sum(self.loss_weights) - 1.0) > 1e-12:
            raise ValueError(f"loss weights must sum to 1, got {self.loss_weights}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class LossReport:
    """Per-epoch loss curves; segmentation values are already /ln2 normed."""

    train_cls: list[float] = field(default_factory=list)
    train_seg: list[float] = field(default_factory=list)
    train_total: list[float] = field(default_factory=list)
    val_cls: list[float] = field(default_factory=list)
    val_seg: list[float] = field(default_factory=list)
    val_total: list[float] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "train_cls", "train_seg", "train_total",
                            "val_cls", "val_seg", "val_total"])
                for i in range(len(self.train_total)):
                    w.writerow([i,
                                f"{self.train_cls[i]:.8f}", f"{self.train_seg[i]:.8f}",
                                f"{self.train_total[i]:.8f}", f"{self.val_cls[i]:.8f}",
                                f"{self.val_seg[i]:.8f}", f"{self.val_total[i]:.8f}"])
        except OSError as exc:
            raise IoFailure(f"cannot write loss curves {path}: {exc}") from exc


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over all elements of the squared difference."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()

def soft_margin_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of ln(1 + exp(-y*x)) with targets strictly in {-1, +1}.

    softplus(-y*x) is the overflow-safe evaluation of the same quantity.
    """
    if logits.shape != target.shape:
        raise ShapeMismatch(f"logit shape {tuple(logits.shape)} != target {tuple(target.shape)}")
    if not torch.all((target == 1) | (target == -1)):
        raise InvalidTarget("soft-margin targets must be exactly -1 or +1")
    return torch.nn.functional.softplus(-target * logits).mean()


def total_loss(cls, seg):
    """Equally weighted average of the normed branch losses.

    The regression branch is already order-1 (normalized targets); the
    segmentation branch is divided by ln 2 so a zero-logit baseline maps
    to exactly 1.
    """
    return 0.5 * cls + 0.5 * (seg / LN2)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * decay^(epoch // step): 1e-3, then 2e-4 at 20, 4e-5 at 40..."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


def mask_to_pm_one(bits: np.ndarray) -> np.ndarray:
    """{0,1} mask bits to float32 {-1,+1} soft-margin targets."""
    return (bits.astype(np.float32) * 2.0 - 1.0)


@dataclass
class TensorDataset:
    """Pre-stacked training arrays: images (N,H,W) f32, targets (N,4) f32,
    masks (N,H,W) f32 in {-1,+1}."""

    images: np.ndarray
    targets: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_samples(cls, samples) -> "TensorDataset":
        """Stack a sequence of AugmentedSample-like objects."""
        from .ynet import encode_params

        imgs, tgts, msks = [], [], []
        for s in samples:
            imgs.append(s.image.pixels)
            tgts.append(encode_params(s.params, s.image.width, s.image.height).astype(np.float32))
            msks.append(mask_to_pm_one(s.mask.bits))
        return cls(images=np.stack(imgs), targets=np.stack(tgts), masks=np.stack(msks))


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic disjoint train/validation index split (95/5 by default)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5147)))
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def save_checkpoint(path: str | Path, model: YNet, optimizer: torch.optim.SGD | None,
                    epoch: int, config_hash: str) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"model.{name}"] = tensor.detach().cpu().numpy()
    if optimizer is not None:
        named = dict(model.named_parameters())
        state = optimizer.state_dict()["state"]
        for idx, (name, _p) in enumerate(named.items()):
            buf = state.get(idx, {}).get("momentum_buffer")
            if buf is not None:
                arrays[f"opt.momentum.{name}"] = buf.detach().cpu().numpy()
    save_manifest(path, arrays, meta={"epoch": epoch, "config_hash": config_hash})


def load_checkpoint(path: str | Path, model: YNet,
                    optimizer: torch.optim.SGD | None = None) -> dict:
    arrays, meta = load_manifest(path)
    state = {k[len("model."):]: torch.from_numpy(v)
             for k, v in arrays.items() if k.startswith("model.")}
    model.load_state_dict(state)
    if optimizer is not None:
        named = list(dict(model.named_parameters()).keys())
        opt_state = optimizer.state_dict()
        for idx, name in enumerate(named):
            key = f"opt.momentum.{name}"
            if key in arrays:
                opt_state["state"].setdefault(idx, {})["momentum_buffer"] = \
                    torch.from_numpy(arrays[key])
        optimizer.load_state_dict(opt_state)
    return meta


def _epoch_losses(model: YNet, data: TensorDataset, idx: np.ndarray,
                  batch_size: int) -> tuple[float, float]:
    """Mean (cls, seg) losses over idx in evaluation mode."""
    model.eval()
    tot_cls = tot_seg = 0.0
    n = 0
    with torch.no_grad():
        for start in range(0, len(idx), batch_size):
            sel = idx[start : start + batch_size]
            x = torch.from_numpy(data.images[sel]).unsqueeze(1)
            tg = torch.from_numpy(data.targets[sel])
            tm = torch.from_numpy(data.masks[sel]).unsqueeze(1)
            out = model(x)
            b = len(sel)
            tot_cls += float(mse_loss(out.geo, tg)) * b
            tot_seg += float(soft_margin_loss(out.seg_logits, tm)) * b
            n += b
    return tot_cls / n, tot_seg / n


def fit(model: YNet, data: TensorDataset, cfg: TrainConfig,
        out_dir: str | Path | None = None,
        config_hash: str = "", log=None) -> tuple[YNet, LossReport]:
    """SGD training over the configured epochs; returns per-epoch loss curves.

    Batch order is deterministic given the seed.  A per-epoch checkpoint
    and the loss-curve CSV are written when out_dir is given.  If the
    total loss ever goes non-finite the last good epoch's weights are
    restored and DivergenceDetected is raised.
    """
    torch.manual_seed(cfg.seed)
    train_idx, val_idx = split_indices(len(data), cfg.val_fraction, cfg.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum)
    report = LossReport()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    last_good_epoch = -1
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1, epoch)))
        order = order_rng.permutation(train_idx)

        model.train()
        run_cls = run_seg = 0.0
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            x = torch.from_numpy(data.images[sel]).unsqueeze(1)
            tg = torch.from_numpy(data.targets[sel])
            tm = torch.from_numpy(data.masks[sel]).unsqueeze(1)
            optimizer.zero_grad(set_to_none=True)
            out = model(x)
            cls = mse_loss(out.geo, tg)
            seg = soft_margin_loss(out.seg_logits, tm)
            total = total_loss(cls, seg)
            if not torch.isfinite(total):
                model.load_state_dict(last_good)
                raise DivergenceDetected(
                    f"total loss became non-finite at epoch {epoch}",
                    last_good_epoch=last_good_epoch)
            total.backward()
            optimizer.step()
            b = len(sel)
            run_cls += float(cls) * b
            run_seg += float(seg) * b
            seen += b

        t_cls, t_seg = run_cls / seen, run_seg / seen
        v_cls, v_seg = _epoch_losses(model, data, val_idx, cfg.batch_size)
        report.train_cls.append(t_cls)
        report.train_seg.append(t_seg / LN2)
        report.train_total.append(float(total_loss(t_cls, t_seg)))
        report.val_cls.append(v_cls)
        report.val_seg.append(v_seg / LN2)
        report.val_total.append(float(total_loss(v_cls, v_seg)))
        if log is not None:
            log(f"epoch {epoch}: lr {lr:.2e} train {report.train_total[-1]:.4f} "
                f"val {report.val_total[-1]:.4f}")

        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        last_good_epoch = epoch
        if out_dir is not None:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch:03d}.cxwm",
                            model, optimizer, epoch, config_hash)
            report.write_csv(out_dir / "loss_curves.csv")

    return model, report
