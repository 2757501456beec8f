"""Semi-supervised loss: masked cross-entropy, relaxed CRF and weighted cross-entropy.

All primitives take probability maps as torch tensors and are differentiable
with autograd. Probabilities are clamped to ``[eps, 1 - eps]`` before logs.

The CRF term is the Laplacian quadratic form of a sparse colour/position
affinity, averaged over the neighbour pairs:

    crf(s) = (1 / |pairs|) * sum_{i<j, cheb(i,j) <= r} W_ij (s_i - s_j)^2
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import torch

from .exceptions import ConfigError, ValidationError


@dataclass
class LossConfig:
    lambda1: float = 1e-4
    lambda2: float = 1e-3
    crf_sigma_color: float = 0.1
    crf_sigma_pos: float = 3.0
    crf_radius: int = 2
    wce_pairing: str = "matched_stage"
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.crf_radius < 1:
            raise ConfigError("crf_radius must be >= 1")
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must be in (0, 0.5)")
        if self.crf_sigma_color <= 0 or self.crf_sigma_pos <= 0:
            raise ConfigError("CRF bandwidths must be positive")
        if self.wce_pairing not in ("matched_stage", "all_pairs"):
            raise ConfigError(f"unknown wce_pairing {self.wce_pairing!r}")


@dataclass
class LossBreakdown:
    ce_terms: dict = field(default_factory=dict)
    crf_terms: dict = field(default_factory=dict)
    wce_terms: dict = field(default_factory=dict)
    total: Optional[torch.Tensor] = None
    lambda1: float = 0.0
    lambda2: float = 0.0

    def recombine(self):
        ce = sum(float(v) for v in self.ce_terms.values())
        crf = sum(float(v) for v in self.crf_terms.values())
        wce = sum(float(v) for v in self.wce_terms.values())
        return ce + self.lambda1 * crf + self.lambda2 * wce

    def as_floats(self):
        out = {"total": float(self.total.detach())}
        for prefix, terms in (("ce", self.ce_terms), ("crf", self.crf_terms), ("wce", self.wce_terms)):
            for k, v in terms.items():
                out[f"{prefix}_{k}"] = float(v.detach())
        return out


def _check_pair(a, b, names):
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"shape mismatch: {names[0]} {tuple(a.shape)} vs {names[1]} {tuple(b.shape)}")


def _bce_map(x, y, eps):
    """Elementwise -[x log y + (1 - x) log(1 - y)] with y clamped."""
    y = y.clamp(eps, 1.0 - eps)
    return -(x * torch.log(y) + (1.0 - x) * torch.log1p(-y))


def ce_loss(pred, target, eps=1e-6):
    """Mean binary cross-entropy of prediction ``pred`` against mask ``target``."""
    _check_pair(pred, target, ("pred", "target"))
    return _bce_map(target.to(pred.dtype), pred, eps).mean()


def wce_loss(skin_pred, body_pred, eps=1e-6):
    """Mean of ``x * CE(x, y)`` with x the skin and y the body probability.

    Penalises confident skin where the body probability is low; gradients flow
    through both arguments.
    """
    _check_pair(skin_pred, body_pred, ("skin_pred", "body_pred"))
    x = skin_pred.clamp(eps, 1.0 - eps)
    return (x * _bce_map(x, body_pred, eps)).mean()


def neighbor_offsets(radius):
    """Half of the Chebyshev neighbourhood, one offset per unordered pair direction."""
    return [
        (dy, dx)
        for dy in range(0, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy > 0 or dx > 0
    ]


class Affinity:
    """Sparse symmetric colour/position affinity within a Chebyshev radius.

    Stored as one weight map per neighbour offset: ``weights[k, n, y, x]`` is
    the affinity between pixel ``(y, x)`` and ``(y + dy_k, x + dx_k)`` of image
    ``n``; entries whose partner falls outside the image are zero and are
    excluded from ``n_pairs``.
    """

    def __init__(self, weights, valid, offsets, shape):
        self.weights = weights
        self.valid = valid
        self.offsets = offsets
        self.shape = shape

    @property
    def n_pairs(self):
        """Unordered in-image neighbour pairs per image."""
        return int(self.valid.sum())

    def to_sparse(self, index=0):
        """Full symmetric ``(H*W) x (H*W)`` scipy matrix for image ``index``."""
        h, w = self.shape
        rows, cols, vals = [], [], []
        idx = np.arange(h * w).reshape(h, w)
        wts = self.weights[:, index].detach().cpu().numpy()
        for k, (dy, dx) in enumerate(self.offsets):
            ys, xs = np.nonzero(self.valid[k].cpu().numpy())
            rows.append(idx[ys, xs])
            cols.append(idx[ys + dy, xs + dx])
            vals.append(wts[k][ys, xs])
        r, c, v = (np.concatenate(a) for a in (rows, cols, vals))
        m = sp.coo_matrix((v, (r, c)), shape=(h * w, h * w))
        return (m + m.T).tocsr()


def _shifted(t, dy, dx):
    """Partner values: out[..., y, x] = t[..., y + dy, x + dx] (zero outside)."""
    h, w = t.shape[-2:]
    out = torch.zeros_like(t)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys = slice(max(0, -dy), h - max(0, dy))
    xs = slice(max(0, -dx), w - max(0, dx))
    ys_src = slice(max(0, dy), h - max(0, -dy))
    xs_src = slice(max(0, dx), w - max(0, -dx))
    out[..., ys, xs] = t[..., ys_src, xs_src]
    return out


def affinity(image, cfg: LossConfig = None) -> Affinity:
    """Affinity of an N x 3 x H x W (or 3 x H x W) image tensor with colours in [0, 1].

    ``W_ij = exp(-|c_i - c_j|^2 / (2 sc^2) - |p_i - p_j|^2 / (2 sp^2))`` for
    pairs within ``crf_radius`` (Chebyshev), zero otherwise.
    """
    cfg = cfg or LossConfig()
    image = torch.as_tensor(image)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValidationError(f"affinity expects N x 3 x H x W images, got {tuple(image.shape)}")
    image = image.detach()
    h, w = image.shape[-2:]
    offsets = neighbor_offsets(cfg.crf_radius)
    weights, valid = [], []
    ones = torch.ones((h, w), dtype=torch.bool)
    for dy, dx in offsets:
        v = _shifted(ones, dy, dx)
        diff = ((image - _shifted(image, dy, dx)) ** 2).sum(dim=1)
        pos = (dy * dy + dx * dx) / (2.0 * cfg.crf_sigma_pos ** 2)
        wk = torch.exp(-diff / (2.0 * cfg.crf_sigma_color ** 2) - pos) * v
        weights.append(wk)
        valid.append(v)
    return Affinity(torch.stack(weights), torch.stack(valid), offsets, (h, w))


def crf_loss_per_sample(pred, W: Affinity):
    """CRF loss for each image of an N x 1 x H x W batch; returns shape (N,)."""
    if pred.ndim == 3:
        pred = pred[None]
    if pred.ndim != 4 or tuple(pred.shape[-2:]) != tuple(W.shape) or pred.shape[0] != W.weights.shape[1]:
        raise ValidationError(f"prediction {tuple(pred.shape)} does not match affinity {W.shape}")
    s = pred[:, 0]
    total = s.new_zeros(s.shape[0])
    for k, (dy, dx) in enumerate(W.offsets):
        d = s - _shifted(s, dy, dx)
        total = total + (W.weights[k].to(s.dtype) * d * d).sum(dim=(-2, -1))
    return total / max(W.n_pairs, 1)


def crf_loss(pred, W: Affinity):
    """Mean CRF loss over a batch (or the single map) given a precomputed affinity."""
    return crf_loss_per_sample(pred, W).mean()


def _per_sample_mean(t):
    return t.flatten(1).mean(dim=1)


def total_loss(trace, skin_mask, body_mask, flags, image, cfg: LossConfig = None,
               stage1_only=False, W: Affinity = None) -> LossBreakdown:
    """Combine CE, CRF and WCE terms over a batch.

    ``flags`` is an ``(l_S, l_B)`` pair of scalars or length-N vectors. CE on a
    branch's outputs is switched on by its flag, CRF by the complement; WCE
    pairs skin and body outputs without a switch. Each term is averaged over
    the batch. With ``stage1_only`` (or a single-stage trace) only ``O_S`` and
    ``O_B`` contribute.
    """
    cfg = cfg or LossConfig()
    o_s, o_b = trace.O_S, trace.O_B
    n = o_s.shape[0]
    l_s, l_b = (torch.as_tensor(f, dtype=o_s.dtype).reshape(-1).expand(n) for f in flags)
    for name, flag, mask in (("skin", l_s, skin_mask), ("body", l_b, body_mask)):
        if bool((flag > 0).any()) and mask is None:
            raise ValidationError(f"{name} label flag set but no {name} mask given")

    outputs = {"O_S": ("skin", o_s), "O_B": ("body", o_b)}
    two_stage = trace.two_stage and not stage1_only
    if two_stage:
        outputs.update({"O2_S": ("skin", trace.O2_S), "O2_B": ("body", trace.O2_B)})

    need_crf = cfg.lambda1 > 0 and bool(((1 - l_s) > 0).any() or ((1 - l_b) > 0).any())
    if W is None and need_crf:
        W = affinity(image, cfg)

    bd = LossBreakdown(lambda1=cfg.lambda1, lambda2=cfg.lambda2)
    for key, (branch, out) in outputs.items():
        flag, mask = (l_s, skin_mask) if branch == "skin" else (l_b, body_mask)
        if bool((flag > 0).any()):
            per = _per_sample_mean(_bce_map(mask.to(out.dtype), out, cfg.epsilon))
            bd.ce_terms[key] = (flag * per).mean()
        if need_crf and bool(((1 - flag) > 0).any()):
            bd.crf_terms[key] = ((1 - flag) * crf_loss_per_sample(out, W)).mean()

    if cfg.lambda2 > 0:
        skins = [("O_S", o_s)] + ([("O2_S", trace.O2_S)] if two_stage else [])
        bodies = [("O_B", o_b)] + ([("O2_B", trace.O2_B)] if two_stage else [])
        if cfg.wce_pairing == "matched_stage":
            pairs = list(zip(skins, bodies))
        else:
            pairs = [(a, b) for a in skins for b in bodies]
        for (ks, xs), (kb, yb) in pairs:
            bd.wce_terms[f"{ks}|{kb}"] = wce_loss(xs, yb, cfg.epsilon)

    zero = o_s.new_zeros(())
    ce = sum(bd.ce_terms.values(), zero)
    crf = sum(bd.crf_terms.values(), zero)
    wce = sum(bd.wce_terms.values(), zero)
    bd.total = ce + cfg.lambda1 * crf + cfg.lambda2 * wce
    return bd
