"""Optimization loop: Adam with cosine annealing and warm restarts,
gradient accumulation, validation, checkpoints and a JSONL step log."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datamodel import ReferenceRaster, SITSPatch
from .datapipe import ChannelStats, SamplerConfig, make_sample, pad_series
from .errors import CheckpointError, NonFiniteLoss
from .losses import LossConfig, patch_balanced_mae, total_loss
from .model import CanopyHeightNet, ModelConfig, crop_margin

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "canopysr-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    restart_decay: float = 0.25
    batch_size: int = 32
    accum_steps: int = 4
    max_steps: int = 1000
    cycle_len: float = 10.0          # epochs
    cycle_mult: int = 1
    lr_min: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    checkpoint_every: int = 100      # optimizer steps; 0 disables
    val_every: int = 100             # optimizer steps; 0 disables
    patience: int = 0                # validation rounds without improvement; 0 disables
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ValueError("batch_size and accum_steps must be positive")
        if self.cycle_len <= 0:
            raise ValueError("cycle_len must be positive")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accum_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: float, cycle_len: float, cycle_mult: float = 1, lr0: float = 1e-3,
                decay: float = 0.25, lr_min: float = 0.0) -> float:
    """Cosine annealing with warm restarts; each restart peak is ``decay`` times the last.

    Within cycle ``k`` (length ``cycle_len * cycle_mult**k``) at position
    ``s``: ``lr_min + (lr0 * decay**k - lr_min) * (1 + cos(pi * s / len)) / 2``.
    """
    if cycle_len <= 0:
        raise ValueError("cycle_len must be positive")
    if cycle_mult == 1:
        k = int(step // cycle_len)
        s, length = step - k * cycle_len, cycle_len
    else:
        k, s, length = 0, step, cycle_len
        while s >= length:
            s -= length
            length *= cycle_mult
            k += 1
    peak = lr0 * decay ** k
    return lr_min + (peak - lr_min) * (1 + math.cos(math.pi * s / length)) / 2


# --------------------------------------------------------------------------
# Data feeding
# --------------------------------------------------------------------------

class PatchDataset:
    """In-memory (patch, reference) pairs turned into batches on demand."""

    def __init__(self, items: Sequence[tuple[SITSPatch, ReferenceRaster]], stats: ChannelStats,
                 sampler: SamplerConfig, factor: int):
        if not items:
            raise ValueError("empty dataset")
        self.items = list(items)
        self.stats = stats
        self.sampler = sampler
        self.factor = factor

    def __len__(self):
        return len(self.items)

    def batch(self, indices, mode: str, rng: np.random.Generator | None = None, dtype=torch.float32):
        samples = [make_sample(*self.items[i], self.stats, self.sampler, mode, rng, self.factor)
                   for i in indices]
        return pad_series(samples, dtype)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    components: dict
    seconds: float


class Trainer:
    """Owns the model, the optimizer and every piece of mutable training state."""

    def __init__(self, model: CanopyHeightNet, train_cfg: TrainConfig = TrainConfig(),
                 loss_cfg: LossConfig = LossConfig(), margin: int = 8, steps_per_epoch: int = 1,
                 log_path=None, snapshot_dir=None, extra: dict | None = None):
        self.model = model
        self.cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.margin = margin
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.log_path = Path(log_path) if log_path else None
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir else None
        self.extra = extra or {}
        self.optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas,
                                          eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
        self.rng = np.random.default_rng(train_cfg.seed)
        torch.manual_seed(train_cfg.seed)
        self.step = 0
        self.micro = 0
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self._pending: list[dict] = []
        self._t0 = time.perf_counter()
        self.best_val = math.inf
        self.bad_rounds = 0

    # -- schedule ----------------------------------------------------------
    def lr_at(self, step: int) -> float:
        c = self.cfg
        return lr_schedule(step, c.cycle_len * self.steps_per_epoch, c.cycle_mult, c.lr, c.restart_decay, c.lr_min)

    # -- one micro-batch ---------------------------------------------------
    def predict_core(self, batch: dict) -> torch.Tensor:
        pred = self.model(batch["images"], batch["s2_offsets"], batch["lidar_offset"], batch["pad_mask"])
        return crop_margin(pred, self.margin * self.model.cfg.sr_factor)[:, 0]

    def forward_loss(self, batch: dict):
        return total_loss(self.predict_core(batch), batch["target"], batch["valid"], self.loss_cfg)

    def train_step(self, batch: dict) -> StepRecord | None:
        """Accumulate one micro-batch; steps the optimizer every ``accum_steps`` calls.

        Returns the step record when an optimizer update happened.
        """
        self.model.train()
        loss, parts = self.forward_loss(batch)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(self.step, self._snapshot(batch))
        (loss / self.cfg.accum_steps).backward()
        self._pending.append({"loss": loss.item(), **{k: v.item() for k, v in parts.items()}})
        self.micro += 1
        if self.micro % self.cfg.accum_steps:
            return None

        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        means = {k: float(np.mean([p[k] for p in self._pending])) for k in self._pending[0]}
        self._pending.clear()
        now = time.perf_counter()
        rec = StepRecord(self.step, lr, means.pop("loss"), means, now - self._t0)
        self._t0 = now
        self.step += 1
        self._log({"kind": "train", "step": rec.step, "lr": rec.lr, "loss": rec.loss,
                   **rec.components, "seconds": round(rec.seconds, 6)})
        return rec

    def _snapshot(self, batch: dict) -> str | None:
        if self.snapshot_dir is None:
            return None
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        path = self.snapshot_dir / f"nonfinite_step{self.step}.pt"
        torch.save({"batch": batch, "model": self.model.state_dict(), "step": self.step}, path)
        return str(path)

    def _log(self, record: dict) -> None:
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    # -- loop --------------------------------------------------------------
    def _next_indices(self, n: int) -> np.ndarray:
        out = []
        while len(out) < self.cfg.batch_size:
            if self._cursor >= len(self._order):
                self._order = self.rng.permutation(n)
                self._cursor = 0
            take = min(self.cfg.batch_size - len(out), len(self._order) - self._cursor)
            out.extend(self._order[self._cursor:self._cursor + take].tolist())
            self._cursor += take
        return np.asarray(out)

    @torch.no_grad()
    def validate(self, data: PatchDataset, batch_size: int | None = None) -> dict:
        """Loss and patch-balanced MAE on centered windows with equal-range dates."""
        self.model.eval()
        bs = batch_size or self.cfg.batch_size
        losses, maes, weights = [], [], []
        for start in range(0, len(data), bs):
            idx = range(start, min(start + bs, len(data)))
            batch = data.batch(idx, "val")
            pred = self.predict_core(batch)
            loss, _ = total_loss(pred, batch["target"], batch["valid"], self.loss_cfg)
            losses.append(float(loss))
            maes.append(float(patch_balanced_mae(pred, batch["target"], batch["valid"])))
            weights.append(len(idx))
        return {"val_loss": float(np.average(losses, weights=weights)),
                "val_mae": float(np.average(maes, weights=weights))}

    def fit(self, train: PatchDataset, val: PatchDataset | None = None, checkpoint_dir=None,
            max_steps: int | None = None) -> list[StepRecord]:
        target = max_steps if max_steps is not None else self.cfg.max_steps
        records = []
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
        while self.step < target:
            batch = train.batch(self._next_indices(len(train)), "train", self.rng)
            rec = self.train_step(batch)
            if rec is None:
                continue
            records.append(rec)
            if rec.step % 50 == 0:
                log.info("step %d lr %.3g loss %.4f", rec.step, rec.lr, rec.loss)
            if val is not None and self.cfg.val_every and self.step % self.cfg.val_every == 0:
                stats = self.validate(val)
                self._log({"kind": "val", "step": self.step, **stats})
                if stats["val_mae"] < self.best_val:
                    self.best_val, self.bad_rounds = stats["val_mae"], 0
                    if ckpt_dir:
                        self.save_checkpoint(ckpt_dir / "best.pt")
                else:
                    self.bad_rounds += 1
                if self.cfg.patience and self.bad_rounds >= self.cfg.patience:
                    log.info("early stop at step %d", self.step)
                    break
            if ckpt_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save_checkpoint(ckpt_dir / f"step_{self.step:07d}.pt")
        if ckpt_dir:
            self.save_checkpoint(ckpt_dir / "last.pt")
        return records

    # -- checkpoints -------------------------------------------------------
    def state(self) -> dict:
        if self.micro % self.cfg.accum_steps:
            raise CheckpointError("cannot checkpoint in the middle of gradient accumulation")
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": self.model.cfg.to_dict(),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "micro": self.micro,
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "order": self._order.copy(),
            "cursor": self._cursor,
            "best_val": self.best_val,
            "bad_rounds": self.bad_rounds,
            "train_config": self.cfg.to_dict(),
            "loss_config": asdict(self.loss_cfg),
            "margin": self.margin,
            "extra": self.extra,
        }

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state(), tmp)
        tmp.replace(path)
        return path

    def resume(self, path) -> "Trainer":
        state = load_checkpoint(path)
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = state["step"]
        self.micro = state["micro"]
        self.rng.bit_generator.state = state["rng"]
        torch.set_rng_state(state["torch_rng"])
        self._order = np.asarray(state["order"])
        self._cursor = state["cursor"]
        self.best_val = state["best_val"]
        self.bad_rounds = state["bad_rounds"]
        self._pending.clear()
        return self


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a canopysr checkpoint")
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {state.get('version')} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    return state


def model_from_checkpoint(path) -> tuple[CanopyHeightNet, dict]:
    state = load_checkpoint(path)
    model = CanopyHeightNet(ModelConfig.from_dict(state["model_config"]))
    model.load_state_dict(state["model"])
    model.eval()
    return model, state
