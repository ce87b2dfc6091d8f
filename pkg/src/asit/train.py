"""Twin-network state, the pretraining step and the epoch loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_module, load_tensors, module_tensors, save_tensors
from .config import RunConfig, build_config
from .data import Batch, iterate_batches
from .distill import (
    center_then_sharpen,
    cosine_schedule,
    ema_update,
    global_distill_loss,
    local_distill_loss,
    recon_loss,
    total_loss,
    update_center,
    warmup_cosine,
)
from .errors import CheckpointError, NumericFault
from .vit import ASiTNetwork

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "lr", "wd", "lambda", "loss_recons", "loss_lcl", "loss_gcl", "loss_total")


def build_network(cfg: RunConfig) -> ASiTNetwork:
    return ASiTNetwork(cfg.backbone, cfg.distill.local_dim, cfg.distill.global_dim, cfg.input_shape)


def _param_groups(model: torch.nn.Module):
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.ndim > 1 else no_decay).append(p)
    return [{"params": decay, "weight_decay": 0.0}, {"params": no_decay, "weight_decay": 0.0}]


@dataclass
class TwinModelState:
    """Student, EMA teacher, output centers and optimizer, checkpointed as one unit."""

    cfg: RunConfig
    student: ASiTNetwork
    teacher: ASiTNetwork
    global_center: torch.Tensor
    local_center: torch.Tensor
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    norm_mean: float = 0.0
    norm_std: float = 1.0

    @classmethod
    def create(cls, cfg: RunConfig, total_steps: int = 0, dtype=torch.float32) -> "TwinModelState":
        torch.manual_seed(cfg.run.seed)
        student = build_network(cfg).to(dtype)
        teacher = copy.deepcopy(student)
        teacher.requires_grad_(False)
        teacher.eval()
        opt = torch.optim.AdamW(_param_groups(student), lr=cfg.train.base_lr, betas=(cfg.train.beta1, cfg.train.beta2))
        return cls(
            cfg=cfg,
            student=student,
            teacher=teacher,
            global_center=torch.zeros(cfg.distill.global_dim, dtype=dtype),
            local_center=torch.zeros(cfg.distill.local_dim, dtype=dtype),
            optimizer=opt,
            total_steps=total_steps,
        )

    # -- schedules -------------------------------------------------------------

    def schedules(self, step: int | None = None) -> dict:
        step = self.step if step is None else step
        t, d = self.cfg.train, self.cfg.distill
        total = max(self.total_steps, 1)
        last = max(total - 1, 0)
        s = min(step, last)
        warmup = int(round(t.warmup_frac * total))
        return {
            "lr": warmup_cosine(t.base_lr, t.final_lr, s, total, warmup),
            "wd": cosine_schedule(t.wd_start, t.wd_end, s, last),
            "lambda": cosine_schedule(d.ema_start, d.ema_end, s, last),
        }

    # -- persistence -----------------------------------------------------------

    def tensors(self) -> dict:
        out = module_tensors(self.student, "student")
        out.update(module_tensors(self.teacher, "teacher"))
        out["center.global"] = self.global_center
        out["center.local"] = self.local_center
        names = {id(p): n for n, p in self.student.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                st = self.optimizer.state.get(p)
                if not st:
                    continue
                for key, value in st.items():
                    out[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(value)
        return out

    def save(self, path, extra: dict | None = None) -> None:
        from .config import serialize_config

        header = {
            "format": "asit-twin",
            "code_version": __version__,
            "config": serialize_config(self.cfg, with_provenance=False),
            "step": self.step,
            "epoch": self.epoch,
            "total_steps": self.total_steps,
            "norm_mean": self.norm_mean,
            "norm_std": self.norm_std,
            **(extra or {}),
        }
        save_tensors(path, self.tensors(), header)

    @classmethod
    def load(cls, path) -> "TwinModelState":
        tensors, header = load_tensors(path)
        cfg = config_from_header(header, path)
        state = cls.create(cfg, header.get("total_steps", 0))
        load_module(state.student, tensors, "student")
        load_module(state.teacher, tensors, "teacher")
        state.global_center = torch.from_numpy(tensors["center.global"])
        state.local_center = torch.from_numpy(tensors["center.local"])
        params = dict(state.student.named_parameters())
        for name, p in params.items():
            keys = [k for k in tensors if k.startswith(f"optim.{name}.") and k.count(".") == name.count(".") + 2]
            if keys:
                state.optimizer.state[p] = {k.rsplit(".", 1)[1]: torch.from_numpy(tensors[k]) for k in keys}
        state.step, state.epoch = int(header["step"]), int(header["epoch"])
        state.norm_mean, state.norm_std = float(header["norm_mean"]), float(header["norm_std"])
        return state


def config_from_header(header: dict, path="checkpoint") -> RunConfig:
    if "config" not in header:
        raise CheckpointError(f"{path}: checkpoint header carries no config")
    pairs = []
    for line in header["config"].splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v.strip()))
    return build_config(pairs)


def _finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())


def train_step(state: TwinModelState, batch: Batch) -> dict:
    """One optimisation step on a two-view batch; returns the logged quantities."""
    cfg = state.cfg
    toggles = cfg.train.toggles
    d = cfg.distill
    sched = state.schedules()
    for i, group in enumerate(state.optimizer.param_groups):
        group["lr"] = sched["lr"]
        group["weight_decay"] = sched["wd"] if i == 0 else 0.0

    b = batch.size
    dtype = state.global_center.dtype
    clean, corrupted = batch.clean.to(dtype), batch.corrupted.to(dtype)
    need_teacher = toggles["lcl"] or toggles["gcl"]
    teacher_out = {}
    if need_teacher:
        with torch.no_grad():
            teacher_out = state.teacher(clean, recon=False, local=toggles["lcl"], global_=toggles["gcl"])

    state.student.train()
    out = state.student(corrupted, recon=toggles["recons"], local=toggles["lcl"], global_=toggles["gcl"])
    zero = clean.new_zeros(())
    parts = {"recons": zero, "lcl": zero, "gcl": zero}
    if toggles["recons"]:
        parts["recons"] = recon_loss(clean, out["recon"], batch.pixel_mask, d.loss_reduction)
    if toggles["lcl"]:
        p_t = center_then_sharpen(teacher_out["local_logits"], state.local_center, d.tau_t)
        parts["lcl"] = local_distill_loss(out["local_logits"], p_t, batch.token_mask, d.tau_s, d.loss_reduction)
    if toggles["gcl"]:
        p_t = center_then_sharpen(teacher_out["global_logits"], state.global_center, d.tau_t)
        z_s = out["global_logits"]
        parts["gcl"] = global_distill_loss(z_s[:b], z_s[b:], p_t[:b], p_t[b:], d.tau_s)
    loss = total_loss(parts, toggles, d.alphas)

    values = {k: float(v.detach()) for k, v in parts.items()}
    if not math.isfinite(float(loss.detach())):
        raise NumericFault(
            f"non-finite loss at step {state.step}", step=state.step, batch_ids=list(batch.ids), loss_parts=values
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()

    ema_update(state.teacher.parameters(), state.student.parameters(), sched["lambda"])
    if toggles["gcl"]:
        state.global_center = update_center(state.global_center, teacher_out["global_logits"], d.center_momentum)
    if toggles["lcl"] and d.center_local:
        state.local_center = update_center(state.local_center, teacher_out["local_logits"], d.center_momentum)
    logged = {"step": state.step, "epoch": state.epoch, **sched}
    state.step += 1
    logged.update({f"loss_{k}": (values[k] if toggles[k] else float("nan")) for k in values})
    logged["loss_total"] = float(loss.detach())
    return logged


def format_metric(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


class MetricsWriter:
    """Append-only per-step CSV."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(METRIC_FIELDS)
            self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow([format_metric(row[k]) for k in METRIC_FIELDS])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def pretrain(
    state: TwinModelState,
    values: np.ndarray,
    indices,
    epochs: int,
    metrics: MetricsWriter | None = None,
    on_epoch_end=None,
) -> list[dict]:
    """Run epochs ``state.epoch .. epochs - 1`` over ``values[indices]`` (normalised spectrograms)."""
    cfg = state.cfg
    history = []
    p = cfg.backbone.patch_size
    while state.epoch < epochs:
        rows = []
        for batch in iterate_batches(
            values, indices, state.epoch, cfg.run.seed, cfg.train.batch_size, cfg.corrupt, p,
            cfg.dsp.target_frames, cfg.train.num_workers,
        ):
            row = train_step(state, batch)
            rows.append(row)
            if metrics is not None:
                metrics.write(row)
        state.epoch += 1
        mean_loss = float(np.mean([r["loss_total"] for r in rows])) if rows else float("nan")
        log.info("epoch %d: mean loss %.4f over %d steps", state.epoch, mean_loss, len(rows))
        history.append({"epoch": state.epoch, "mean_loss": mean_loss, "steps": len(rows)})
        if on_epoch_end is not None:
            on_epoch_end(state, history[-1])
    return history


def steps_per_epoch(n_clips: int, batch_size: int) -> int:
    return -(-n_clips // batch_size)
