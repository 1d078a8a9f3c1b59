"""Dual cycle-consistency composition over a frame triplet, and its loss terms.

Given consecutive frames (i0, i1, i2) one time unit apart, the interpolation
model is applied in two stages:

  stage 1: predictions from the two original pairs,
           (i0, i1) -> frames at 1/3 and 2/3,
           (i1, i2) -> frames at 4/3 and 5/3;
  stage 2: the stage-1 frames are re-paired across the original gap,
           (1/3, 4/3)  -> frames at 2/3 and 1,
           (2/3, 5/3)  -> frames at 1 and 4/3.

Both stage-2 middle predictions must reconstruct i1 (first consistency term),
and the stage-2 side predictions must agree with stage 1 at times 2/3 and 4/3
(second term). Gradients flow through both stages; nothing is detached, and
the same model weights are shared by all four calls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

# two frames in, two frames out
PairModel = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


@dataclass
class LossWeights:
    lambda_cc1: float = 0.65
    lambda_cc2: float = 0.35
    gamma_cc1: float = 0.5
    gamma_cc2: float = 0.3

    def validate(self):
        for name in ("lambda_cc1", "lambda_cc2", "gamma_cc1", "gamma_cc2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class StagePredictions:
    """All eight frames produced by the two-stage composition.

    Each field is a (first, second) output pair of one model call:
      stage1_left  at times (1/3, 2/3), from (i0, i1)
      stage1_right at times (4/3, 5/3), from (i1, i2)
      stage2_left  at times (2/3, 1),   from the stage-1 first outputs
      stage2_right at times (1, 4/3),   from the stage-1 second outputs
    """

    stage1_left: tuple[torch.Tensor, torch.Tensor]
    stage1_right: tuple[torch.Tensor, torch.Tensor]
    stage2_left: tuple[torch.Tensor, torch.Tensor]
    stage2_right: tuple[torch.Tensor, torch.Tensor]

    @property
    def middle_from_left(self) -> torch.Tensor:
        """Stage-2 reconstruction of i1 via the earlier stage-1 frames."""
        return self.stage2_left[1]

    @property
    def middle_from_right(self) -> torch.Tensor:
        """Stage-2 reconstruction of i1 via the later stage-1 frames."""
        return self.stage2_right[0]

    def as_tuple(self):
        """Flat (stage1..., stage2...) ordering used by the pinned fixtures."""
        return (*self.stage1_left, *self.stage1_right,
                self.stage2_left[0], self.stage2_left[1],
                self.stage2_right[0], self.stage2_right[1])


def mae(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-element mean absolute error, so losses are resolution-independent."""
    return (a - b).abs().mean()


def dual_cycle_forward(model: PairModel, i0, i1, i2) -> StagePredictions:
    """Run both stages of the composition on one triplet (or a batch of them)."""
    s1_left = model(i0, i1)
    s1_right = model(i1, i2)
    s2_left = model(s1_left[0], s1_right[0])
    s2_right = model(s1_left[1], s1_right[1])
    return StagePredictions(s1_left, s1_right, s2_left, s2_right)


def cc1_loss(sp: StagePredictions, i1: torch.Tensor) -> torch.Tensor:
    """Reconstruction error of the original middle frame from both stage-2 paths."""
    return mae(i1, sp.middle_from_left) + mae(i1, sp.middle_from_right)


def cc2_loss(sp: StagePredictions) -> torch.Tensor:
    """Half the summed disagreement between stage-2 side predictions and stage 1."""
    return 0.5 * (mae(sp.stage1_left[1], sp.stage2_left[0])
                  + mae(sp.stage1_right[0], sp.stage2_right[1]))


def combined_loss(sp: StagePredictions, i1: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Weighted unsupervised objective used for pretraining."""
    return w.lambda_cc1 * cc1_loss(sp, i1) + w.lambda_cc2 * cc2_loss(sp)


def finetune_loss(
    pred: tuple[torch.Tensor, torch.Tensor],
    gt: tuple[torch.Tensor, torch.Tensor],
    sp: StagePredictions,
    i1: torch.Tensor,
    w: LossWeights,
) -> torch.Tensor:
    """Supervised reconstruction plus the cycle terms as a self-supervised regularizer.

    The reconstruction term averages the error of both predicted frames. The
    cycle terms are computed on ``sp``, the composition over a coarse triplet
    built from input-grade frames of the same batch (never from ground truth).
    """
    recon = 0.5 * (mae(pred[0], gt[0]) + mae(pred[1], gt[1]))
    return recon + w.gamma_cc1 * cc1_loss(sp, i1) + w.gamma_cc2 * cc2_loss(sp)
