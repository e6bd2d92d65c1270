"""Pretraining loop: batching of views, the train step and run directories."""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from satdino.augment import Normalization, ViewBatch, build_views
from satdino.config import RunConfig
from satdino.data import GeoSample, compute_normalization, group_series
from satdino.dino import (
    SatDINONetwork,
    dino_loss,
    ema_update,
    gsd_loss,
    mean_entropy,
    schedules,
    teacher_probs,
    total_loss,
    update_center,
)
from satdino.exceptions import DataError, NonFiniteLossError

logger = logging.getLogger(__name__)

METRIC_KEYS = ("step", "epoch", "l_dino", "l_gsd", "total", "lr", "ema_m", "tau_t", "entropy")


def configure_torch(exact_repro: bool = True) -> None:
    threads = os.environ.get("SATDINO_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(exact_repro)


@dataclass
class TrainState:
    config: RunConfig
    student: SatDINONetwork
    teacher: SatDINONetwork
    optimizer: torch.optim.Optimizer
    center: torch.Tensor
    norm: Normalization
    steps_per_epoch: int
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)


def _param_groups(model: torch.nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.endswith((".bias", "pos_embed", "cls_token", "gsd_token")):
            no_decay.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def init_state(config: RunConfig, norm: Normalization, steps_per_epoch: int,
               dtype: torch.dtype = torch.float32) -> TrainState:
    """Fresh student/teacher pair, optimizer and center for ``config``."""
    torch.manual_seed(config.seed)
    student = SatDINONetwork(config.vit_config(), config.head_config()).to(dtype)
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    teacher.eval()
    optimizer = torch.optim.AdamW(_param_groups(student, config.optim.weight_decay),
                                  lr=config.optim.lr)
    center = torch.zeros(config.head.prototypes, dtype=dtype)
    return TrainState(config, student, teacher, optimizer, center, norm, steps_per_epoch)


@dataclass
class CollatedViews:
    globals_: torch.Tensor          # G x B x C x H x W
    local_groups: list              # [(view indices, n x B x C x h x w)]
    gsd_targets: torch.Tensor       # V x B
    n_views: int
    source_ids: list


def collate(batch: Sequence[ViewBatch]) -> CollatedViews:
    if not batch:
        raise DataError("empty batch")
    n_global = len(batch[0].global_views)
    n_local = len(batch[0].local_views)
    globals_ = torch.stack([torch.stack(vb.global_views) for vb in batch], dim=1)
    by_size = {}
    for i in range(n_local):
        size = tuple(batch[0].local_views[i].shape[-2:])
        by_size.setdefault(size, []).append(i)
    groups = []
    for size, idx in by_size.items():
        stacked = torch.stack(
            [torch.stack([vb.local_views[i] for i in idx]) for vb in batch], dim=1
        )
        groups.append(([n_global + i for i in idx], stacked))
    targets = torch.from_numpy(np.stack([vb.gsd_targets for vb in batch], axis=1))
    return CollatedViews(globals_, groups, targets, n_global + n_local,
                         [vb.source_id for vb in batch])


def student_forward(net: SatDINONetwork, views: CollatedViews):
    """Logits (V x B x K) and GSD predictions (V x B, or None) over all views."""
    g, b = views.globals_.shape[:2]
    chunks = [(list(range(g)), views.globals_)] + views.local_groups
    logits = [None] * views.n_views
    preds = [None] * views.n_views
    for idx, imgs in chunks:
        n = imgs.shape[0]
        out_logits, out_gsd = net(imgs.reshape(n * b, *imgs.shape[2:]))
        out_logits = out_logits.reshape(n, b, -1)
        for j, v in enumerate(idx):
            logits[v] = out_logits[j]
            if out_gsd is not None:
                preds[v] = out_gsd.reshape(n, b)[j]
    gsd = torch.stack(preds) if preds[0] is not None else None
    return torch.stack(logits), gsd


@torch.no_grad()
def teacher_forward(net: SatDINONetwork, views: CollatedViews) -> torch.Tensor:
    g, b = views.globals_.shape[:2]
    logits, _ = net(views.globals_.reshape(g * b, *views.globals_.shape[2:]))
    return logits.reshape(g, b, -1)


def train_step(state: TrainState, batch, batch_id=None, dump_dir: Optional[Path] = None) -> dict:
    """One optimisation step on a list of ViewBatch (or a CollatedViews)."""
    cfg = state.config
    views = batch if isinstance(batch, CollatedViews) else collate(batch)
    dtype = state.center.dtype
    views.globals_ = views.globals_.to(dtype)
    views.local_groups = [(i, t.to(dtype)) for i, t in views.local_groups]
    lr, ema_m, tau_t = schedules(state.step, state.steps_per_epoch, cfg.schedule_config())
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.student.train()
    t_logits = teacher_forward(state.teacher, views)
    s_logits, gsd_pred = student_forward(state.student, views)
    center = state.center if cfg.head.centering else torch.zeros_like(state.center)
    l_dino = dino_loss(s_logits, t_logits, center, cfg.head.tau_s, tau_t)
    if gsd_pred is not None:
        l_gsd = gsd_loss(gsd_pred, views.gsd_targets.to(gsd_pred.dtype))
    else:
        l_gsd = torch.zeros((), dtype=dtype)
    losses = total_loss(l_dino, l_gsd, cfg.loss.gamma)
    if not torch.isfinite(losses.total):
        _dump_batch(dump_dir, batch_id, views, losses)
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step} (batch {batch_id}): {losses.as_floats()}"
        )

    state.optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    if cfg.optim.clip_grad > 0:
        torch.nn.utils.clip_grad_norm_(state.student.parameters(), cfg.optim.clip_grad)
    if state.epoch < cfg.optim.freeze_last_layer_epochs:
        state.student.head.prototypes.grad = None
    state.optimizer.step()

    entropy = mean_entropy(teacher_probs(t_logits, center, tau_t))
    if cfg.head.centering:
        state.center = update_center(state.center, t_logits, cfg.head.center_momentum)
    ema_update(state.teacher, state.student, ema_m)

    metrics = {"step": state.step, "epoch": state.epoch, **losses.as_floats(),
               "lr": lr, "ema_m": ema_m, "tau_t": tau_t, "entropy": entropy}
    state.step += 1
    return metrics


def _dump_batch(dump_dir, batch_id, views: CollatedViews, losses) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nonfinite_batch_{batch_id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "batch_id": batch_id,
        "source_ids": [str(s) for s in views.source_ids],
        "losses": {k: float(v) for k, v in losses.as_floats().items()},
        "gsd_targets": views.gsd_targets.tolist(),
    }, indent=2))


class ViewSource:
    """Deterministic per-epoch batches of augmented views."""

    def __init__(self, samples: Sequence[GeoSample], config: RunConfig, norm: Normalization):
        if not samples:
            raise DataError("no training samples")
        self.samples = list(samples)
        self.config = config
        self.norm = norm
        self.view_cfg = config.view_config()
        self.aug = config.aug_profile()
        self._series = {}
        if self.aug.temporal:
            for group in group_series(self.samples):
                for s in group:
                    self._series[id(s)] = group

    def steps_per_epoch(self) -> int:
        bs = self.config.optim.batch_size
        return max(1, len(self.samples) // bs)

    def sample_views(self, index: int, epoch: int) -> ViewBatch:
        rng = np.random.default_rng([self.config.seed, epoch, index])
        s = self.samples[index]
        source = self._series.get(id(s), s) if self.aug.temporal else s
        return build_views(source, self.view_cfg, self.aug, rng, self.norm)

    def epoch_batches(self, epoch: int):
        bs = self.config.optim.batch_size
        order = np.random.default_rng([self.config.seed, epoch, 2**31]).permutation(len(self.samples))
        for b in range(self.steps_per_epoch()):
            idx = order[b * bs:(b + 1) * bs]
            yield b, collate([self.sample_views(int(i), epoch) for i in idx])


class RunDirectory:
    """config.txt, metrics.jsonl, checkpoints/, reports/ and viz/ under one root."""

    def __init__(self, root):
        self.root = Path(root)

    def create(self) -> "RunDirectory":
        for sub in ("checkpoints", "reports", "viz"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    @property
    def config_path(self) -> Path:
        return self.root / "config.txt"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.jsonl"

    @property
    def checkpoint_path(self) -> Path:
        return self.root / "checkpoints" / "checkpoint.sdck"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def viz(self) -> Path:
        return self.root / "viz"

    def read_metrics(self) -> list:
        if not self.metrics_path.is_file():
            return []
        with open(self.metrics_path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


def format_metrics(metrics: dict) -> str:
    return json.dumps({k: metrics[k] for k in METRIC_KEYS}, separators=(",", ":"))


def pretrain(config: RunConfig, samples: Sequence[GeoSample], run_dir=None,
             state: Optional[TrainState] = None,
             callback: Optional[Callable[[TrainState, dict], None]] = None,
             epochs: Optional[int] = None) -> TrainState:
    """Run (or resume) self-distillation pretraining on ``samples``.

    ``epochs`` limits how many epochs this call runs; the schedules always
    follow ``config.optim.epochs``.
    """
    from satdino.checkpoint import save_checkpoint

    config.validate()
    configure_torch(config.exact_repro)
    if state is None:
        norm = Normalization(*compute_normalization(samples))
        source = ViewSource(samples, config, norm)
        state = init_state(config, norm, source.steps_per_epoch())
    else:
        source = ViewSource(samples, config, state.norm)
        state.steps_per_epoch = source.steps_per_epoch()
    run = RunDirectory(run_dir).create() if run_dir is not None else None
    if run is not None:
        run.config_path.write_text(config.to_text(), encoding="utf-8")
        if state.step == 0 and run.metrics_path.exists():
            run.metrics_path.unlink()

    last = config.optim.epochs if epochs is None else min(config.optim.epochs, state.epoch + epochs)
    while state.epoch < last:
        for batch_id, views in source.epoch_batches(state.epoch):
            metrics = train_step(state, views, batch_id=(state.epoch, batch_id),
                                 dump_dir=run.root if run else None)
            state.history.append(metrics)
            if run is not None:
                with open(run.metrics_path, "a", encoding="utf-8") as fh:
                    fh.write(format_metrics(metrics) + "\n")
            if callback is not None:
                callback(state, metrics)
        epoch_loss = np.mean([m["l_dino"] for m in state.history if m["epoch"] == state.epoch])
        logger.info("epoch %d done: mean l_dino %.4f", state.epoch, epoch_loss)
        state.epoch += 1
        if run is not None:
            save_checkpoint(state, run.checkpoint_path)
    return state
