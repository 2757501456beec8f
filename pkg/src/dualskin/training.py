"""Two-phase optimisation: Stage-1 pretraining, then two-stage finetuning.

Batches alternate strictly between skin-labelled (even iterations) and
body-labelled (odd iterations) samples. During finetuning the Stage-2
guidance for a branch is the ground-truth mask of the other task when the
sample has it, and the other branch's Stage-1 output otherwise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from . import evaluation
from .dataset import AugmentConfig, alternating_batches, augment, split_by_label
from .exceptions import ConfigError, TrainingAbort, ValidationError
from .losses import LossConfig, total_loss
from .network import (
    ForwardTrace,
    forward_stage1,
    forward_two_stage,
    images_to_tensor,
    masks_to_tensor,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    batch_size: int = 8
    stage1_epochs: int = 30
    finetune_epochs: int = 20
    grad_stop: bool = True
    mutual_guidance: bool = True
    from_scratch: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    seed: int = 0
    eval_batch_size: int = 25

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.stage1_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.stage1_epochs + self.finetune_epochs < 1:
            raise ConfigError("at least one training epoch is required")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        if self.augment is not None:
            d["augment"]["scale_range"] = list(self.augment.scale_range)
        return d


def select_guidance(flags, skin_mask, body_mask, o_s, o_b):
    """Trusted Stage-2 guidance ``(G'_S, G'_B)``.

    ``G'_B = l_S * M_S + (1 - l_S) * O_S`` and ``G'_S = l_B * M_B + (1 - l_B) * O_B``.
    Flags may be scalars or per-sample vectors; a mask may be None only when
    its flag is 0 everywhere.
    """
    n = o_s.shape[0]
    l_s, l_b = (
        torch.as_tensor(f, dtype=o_s.dtype).reshape(-1).expand(n).reshape(n, 1, 1, 1) for f in flags
    )
    if bool((l_s > 0).any()) and skin_mask is None:
        raise ValidationError("l_S = 1 but no skin mask available for guidance")
    if bool((l_b > 0).any()) and body_mask is None:
        raise ValidationError("l_B = 1 but no body mask available for guidance")
    m_s = o_s.new_zeros(o_s.shape) if skin_mask is None else skin_mask.to(o_s.dtype)
    m_b = o_b.new_zeros(o_b.shape) if body_mask is None else body_mask.to(o_b.dtype)
    g_b = l_s * m_s + (1 - l_s) * o_s
    g_s = l_b * m_b + (1 - l_b) * o_b
    return g_s, g_b


def collate(samples):
    """Stack samples into tensors; absent masks become zeros with flag 0."""
    x = images_to_tensor(np.stack([s.image for s in samples]))
    h, w = samples[0].shape
    zeros = np.zeros((h, w), dtype=np.uint8)
    ms = masks_to_tensor(np.stack([zeros if s.skin_mask is None else s.skin_mask for s in samples]))
    mb = masks_to_tensor(np.stack([zeros if s.body_mask is None else s.body_mask for s in samples]))
    l_s = torch.tensor([s.flags.skin for s in samples], dtype=torch.float32)
    l_b = torch.tensor([s.flags.body for s in samples], dtype=torch.float32)
    return x, ms, mb, (l_s, l_b)


@torch.no_grad()
def predict_maps(net, images, two_stage=True, batch_size=25):
    """Skin and body probability maps (N x H x W float32) from the eval-mode network."""
    was_training = net.training
    net.eval()
    skins, bodies = [], []
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    for i in range(0, len(arr), batch_size):
        x = images_to_tensor(arr[i:i + batch_size])
        if two_stage:
            o_s, o_b = forward_two_stage(net, x).final()
        else:
            o_s, o_b = forward_stage1(net, x)
        skins.append(o_s[:, 0].numpy())
        bodies.append(o_b[:, 0].numpy())
    net.train(was_training)
    return np.concatenate(skins), np.concatenate(bodies)


def validate(net, samples, two_stage=True, batch_size=25):
    """Mean IoU at threshold 0.5 for skin and body over the samples carrying each mask."""
    if not samples:
        return {}
    skin, body = predict_maps(net, np.stack([s.image for s in samples]), two_stage, batch_size)
    out = {}
    for name, maps in (("skin", skin), ("body", body)):
        ious = [
            evaluation.iou(evaluation.binarize(p), getattr(s, f"{name}_mask"))
            for p, s in zip(maps, samples)
            if getattr(s, f"{name}_mask") is not None
        ]
        if ious:
            out[f"val_{name}_iou"] = float(np.mean(ious))
    return out


def _check_finite(bd, phase, step):
    for group in ("ce_terms", "crf_terms", "wce_terms"):
        for key, val in getattr(bd, group).items():
            if not math.isfinite(float(val.detach())):
                raise TrainingAbort(
                    f"non-finite {group[:-6]} loss on {key} at {phase} step {step}",
                    term=f"{group[:-6]}:{key}",
                    step=step,
                )
    if not math.isfinite(float(bd.total.detach())):
        raise TrainingAbort(f"non-finite total loss at {phase} step {step}", term="total", step=step)


def steps_per_epoch(n_skin, n_body, batch_size):
    """Even number of iterations covering the training set about once."""
    return 2 * max(1, math.ceil((n_skin + n_body) / (2 * batch_size)))


def _run_phase(net, train, cfg: TrainConfig, phase, epochs, validation, history, rng_seed,
               epoch_offset=0, callback=None):
    skin_set, body_set = split_by_label(train)
    ss = np.random.SeedSequence([cfg.seed, rng_seed])
    batch_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    batches = alternating_batches(skin_set, body_set, cfg.batch_size, batch_rng)
    n_steps = steps_per_epoch(len(skin_set), len(body_set), cfg.batch_size)
    opt = torch.optim.Adam(
        [p for p in net.parameters() if p.requires_grad], lr=cfg.lr, betas=tuple(cfg.betas)
    )
    two_stage = phase != "stage1"
    for epoch in range(epochs):
        net.train()
        sums = {}
        for step in range(n_steps):
            batch = next(batches)
            if cfg.augment is not None:
                batch = [augment(s, cfg.augment, aug_rng) for s in batch]
            x, ms, mb, flags = collate(batch)
            if two_stage:
                trace = forward_two_stage(
                    net, x, grad_stop=cfg.grad_stop,
                    guidance_fn=lambda o_s, o_b: select_guidance(flags, ms, mb, o_s, o_b),
                )
            else:
                trace = ForwardTrace(*forward_stage1(net, x))
            bd = total_loss(trace, ms, mb, flags, x, cfg.loss, stage1_only=not two_stage)
            _check_finite(bd, phase, step)
            opt.zero_grad(set_to_none=True)
            bd.total.backward()
            opt.step()
            for k, v in bd.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
        record = {"epoch": epoch_offset + epoch + 1, "phase": phase}
        record.update({f"loss_{k}": v / n_steps for k, v in sorted(sums.items())})
        record.update(validate(net, validation or [], two_stage, cfg.eval_batch_size))
        history.append(record)
        log.info("%s", record)
        if callback is not None:
            callback(net, record)
    return history


def train_stage1(net, train, cfg: TrainConfig, validation=None, epochs=None, history=None, callback=None):
    """Optimise Stage-1 losses only, with the configured initial guidance."""
    history = [] if history is None else history
    epochs = cfg.stage1_epochs if epochs is None else epochs
    return _run_phase(net, train, cfg, "stage1", epochs, validation, history, 1,
                      epoch_offset=len(history), callback=callback)


def finetune(net, train, cfg: TrainConfig, validation=None, epochs=None, history=None, callback=None):
    """Two-stage training with trusted guidance selection and optional gradient stop."""
    history = [] if history is None else history
    epochs = cfg.finetune_epochs if epochs is None else epochs
    return _run_phase(net, train, cfg, "finetune", epochs, validation, history, 2,
                      epoch_offset=len(history), callback=callback)


def train(net, train_samples, cfg: TrainConfig, validation=None, callback=None):
    """Full schedule selected by the ablation flags; returns the history list.

    * default: ``stage1_epochs`` of Stage 1, then ``finetune_epochs`` two-stage;
    * ``mutual_guidance=False``: Stage 1 for the whole budget;
    * ``from_scratch=True``: two-stage for the whole budget.
    """
    skin_set, body_set = split_by_label(train_samples)
    if not skin_set or not body_set:
        raise ConfigError("training needs both skin-labelled and body-labelled samples")
    history = []
    total = cfg.stage1_epochs + cfg.finetune_epochs
    if not cfg.mutual_guidance:
        train_stage1(net, train_samples, cfg, validation, total, history, callback)
    elif cfg.from_scratch:
        finetune(net, train_samples, cfg, validation, total, history, callback)
    else:
        train_stage1(net, train_samples, cfg, validation, cfg.stage1_epochs, history, callback)
        finetune(net, train_samples, cfg, validation, cfg.finetune_epochs, history, callback)
    return history


def uses_two_stage(cfg: TrainConfig):
    return cfg.mutual_guidance and (cfg.from_scratch or cfg.finetune_epochs > 0)
