"""Scikit-learn style front end for the mutually guided dual-task network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import evaluation
from .dataset import AugmentConfig
from .exceptions import ValidationError
from .losses import LossConfig
from .network import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, predict_maps, train, uses_two_stage
from .validation import check_is_fitted


class MutualGuidanceSegmenter(BaseEstimator):
    """Joint skin/body segmenter trained semi-supervised.

    ``fit`` takes a sequence of :class:`~dualskin.dataset.Sample` (each with a
    skin mask, a body mask, or both) and optionally a validation list.
    ``predict_proba`` maps an ``N x H x W x 3`` image array in [0, 1] to a
    pair of ``N x H x W`` probability arrays ``(skin, body)``.

    Fitted attributes: ``net_`` (the network), ``history_`` (per-epoch
    records) and ``two_stage_`` (whether inference runs Stage 2).
    """

    def __init__(
        self,
        input_size=64,
        base_channels=16,
        depth=4,
        initial_guidance=(0.0, 0.0),
        lr=1e-3,
        betas=(0.9, 0.999),
        batch_size=8,
        stage1_epochs=30,
        finetune_epochs=20,
        grad_stop=True,
        mutual_guidance=True,
        from_scratch=False,
        lambda1=1e-4,
        lambda2=1e-3,
        crf_sigma_color=0.1,
        crf_sigma_pos=3.0,
        crf_radius=2,
        wce_pairing="matched_stage",
        epsilon=1e-6,
        augment=True,
        flip_probability=0.5,
        scale_range=(1.0, 1.25),
        random_state=0,
    ):
        self.input_size = input_size
        self.base_channels = base_channels
        self.depth = depth
        self.initial_guidance = initial_guidance
        self.lr = lr
        self.betas = betas
        self.batch_size = batch_size
        self.stage1_epochs = stage1_epochs
        self.finetune_epochs = finetune_epochs
        self.grad_stop = grad_stop
        self.mutual_guidance = mutual_guidance
        self.from_scratch = from_scratch
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.crf_sigma_color = crf_sigma_color
        self.crf_sigma_pos = crf_sigma_pos
        self.crf_radius = crf_radius
        self.wce_pairing = wce_pairing
        self.epsilon = epsilon
        self.augment = augment
        self.flip_probability = flip_probability
        self.scale_range = scale_range
        self.random_state = random_state

    def model_config(self):
        return ModelConfig(
            input_size=self.input_size,
            base_channels=self.base_channels,
            depth=self.depth,
            initial_guidance=tuple(self.initial_guidance),
        )

    def train_config(self):
        loss = LossConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            crf_sigma_color=self.crf_sigma_color,
            crf_sigma_pos=self.crf_sigma_pos,
            crf_radius=self.crf_radius,
            wce_pairing=self.wce_pairing,
            epsilon=self.epsilon,
        )
        aug = None
        if self.augment:
            aug = AugmentConfig(
                flip_probability=self.flip_probability,
                scale_range=tuple(self.scale_range),
                crop_size=self.input_size,
                seed=self.random_state,
            )
        return TrainConfig(
            lr=self.lr,
            betas=tuple(self.betas),
            batch_size=self.batch_size,
            stage1_epochs=self.stage1_epochs,
            finetune_epochs=self.finetune_epochs,
            grad_stop=self.grad_stop,
            mutual_guidance=self.mutual_guidance,
            from_scratch=self.from_scratch,
            loss=loss,
            augment=aug,
            seed=self.random_state,
        )

    def _check_samples(self, samples):
        for s in samples:
            if s.shape != (self.input_size, self.input_size):
                raise ValidationError(
                    f"sample {s.id} is {s.shape[0]}x{s.shape[1]}, model expects {self.input_size}x{self.input_size}"
                )

    def fit(self, X, y=None, validation=None, callback=None):
        samples = list(X)
        self._check_samples(samples)
        if validation is not None:
            self._check_samples(validation)
        cfg = self.train_config()
        self.net_ = init_params(self.model_config(), self.random_state)
        self.history_ = train(self.net_, samples, cfg, validation, callback=callback)
        self.two_stage_ = uses_two_stage(cfg)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != (self.input_size, self.input_size, 3):
            raise ValidationError(
                f"expected images of shape (N, {self.input_size}, {self.input_size}, 3), got {X.shape}"
            )
        return predict_maps(self.net_, X, self.two_stage_)

    def predict(self, X, threshold=0.5):
        """Binary skin masks."""
        skin, _ = self.predict_proba(X)
        return evaluation.binarize(skin, threshold)

    def score(self, X, y=None):
        """Mean skin IoU at threshold 0.5 over samples that carry a skin mask."""
        samples = [s for s in X if s.skin_mask is not None]
        if not samples:
            raise ValidationError("no skin-labelled samples to score")
        masks = self.predict(np.stack([s.image for s in samples]))
        return float(np.mean([evaluation.iou(m, s.skin_mask) for m, s in zip(masks, samples)]))

    def save(self, path, epoch=None, phase=None, metrics=None):
        check_is_fitted(self, "net_")
        save_checkpoint(
            path,
            self.net_,
            epoch=len(self.history_) if epoch is None else epoch,
            seed=self.random_state,
            phase=phase or (self.history_[-1]["phase"] if self.history_ else "stage1"),
            metrics=metrics,
            extra={"estimator": _jsonable(self.get_params()), "two_stage": self.two_stage_},
        )

    @classmethod
    def from_checkpoint(cls, path):
        net, meta = load_checkpoint(path)
        params = meta.get("estimator", {})
        est = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in params.items()})
        est.net_ = net
        est.history_ = []
        est.two_stage_ = bool(meta.get("two_stage", True))
        est.checkpoint_meta_ = meta
        return est


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
