"""Selector -> mask -> (DSF) -> classifier pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, no_grad
from .dsf import DynamicSpatialFilter
from .gating import ChannelMask, GateScores, GumbelConfig, Mode, Topology, apply_mask, sample_mask
from .msfbcnn import MSFBCNN
from .nn import Module


@dataclass
class ForwardOutput:
    logits: Tensor
    scores: GateScores | None
    mask: ChannelMask | None
    x_hat: Tensor


class DynamicSelectionNet(Module):
    def __init__(self, classifier: MSFBCNN, scorer: Module | None = None,
                 dsf: DynamicSpatialFilter | None = None, gumbel: GumbelConfig | None = None):
        super().__init__()
        self.classifier = self.child("classifier", classifier)
        self.scorer = None
        self.dsf = None
        if scorer is not None:
            self.set_scorer(scorer)
        if dsf is not None:
            self.set_dsf(dsf)
        self.gumbel = gumbel or GumbelConfig()
        # names of the training stages this model has completed
        self.stages: list[str] = []

    @property
    def topology(self) -> Topology | None:
        return None if self.scorer is None else self.scorer.topology

    @property
    def n_channels(self) -> int:
        return self.classifier.cfg.n_channels

    def set_scorer(self, scorer: Module | None) -> None:
        self.children.pop("scorer", None)
        self.scorer = scorer
        if scorer is not None:
            self.child("scorer", scorer)

    def set_dsf(self, dsf: DynamicSpatialFilter | None) -> None:
        self.children.pop("dsf", None)
        self.dsf = dsf
        if dsf is not None:
            self.child("dsf", dsf)

    def __call__(self, x, rng: np.random.Generator | None = None,
                 fixed_mask: np.ndarray | None = None) -> ForwardOutput:
        """Training mode samples Gumbel masks, eval mode thresholds deterministically.

        ``fixed_mask`` (B, M) bypasses the scorer (random baseline, mask ≡ 1).
        """
        x = as_tensor(x)
        scores = mask = None
        if fixed_mask is not None:
            x_hat = apply_mask(x, np.asarray(fixed_mask, dtype=np.float64))
        elif self.scorer is not None:
            scores = self.scorer(x, rng)
            mode = Mode.TRAINING if self.training else Mode.INFERENCE
            mask = sample_mask(scores, self.gumbel, mode, rng)
            x_hat = apply_mask(x, mask)
        else:
            x_hat = x
        x_tilde = self.dsf(x_hat) if self.dsf is not None else x_hat
        return ForwardOutput(self.classifier(x_tilde, rng), scores, mask, x_hat)

    def predict(self, X: np.ndarray, batch_size: int = 256,
                fixed_mask: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Inference pass over an array of windows: logits, masks and scores."""
        was = self.training
        self.eval()
        logits, masks, alphas = [], [], []
        n, m = X.shape[0], X.shape[1]
        try:
            with no_grad():
                for s in range(0, n, batch_size):
                    fm = None if fixed_mask is None else fixed_mask[s:s + batch_size]
                    out = self(X[s:s + batch_size], None, fm)
                    logits.append(out.logits.data)
                    if out.mask is not None:
                        masks.append(out.mask.bits)
                        alphas.append(out.scores.alpha.data)
                    elif fm is not None:
                        masks.append(np.asarray(fm, dtype=bool))
                    else:
                        masks.append(np.ones((out.logits.shape[0], m), dtype=bool))
        finally:
            self.train(was)
        k = self.classifier.cfg.n_classes
        return {
            "logits": np.concatenate(logits) if logits else np.zeros((0, k)),
            "mask": np.concatenate(masks) if masks else np.zeros((0, m), dtype=bool),
            "alpha": np.concatenate(alphas) if alphas else None,
        }
