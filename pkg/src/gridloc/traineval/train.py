"""
Training loop for the grid and regression heads.

Both heads train on the same positive proposals (IoU >= positive_iou with
their object, at most ``positives_per_image`` per image), so a grid run and a
regression run on one dataset and seed see identical RoIs.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import polars as pl

from ..config import TrainConfig, derive_seed
from ..errors import DivergenceError, InputError, NumericError
from ..gridgeom import (
    downsample_supervision,
    grid_point_targets,
    render_supervision,
)
from ..gridnet import GridDetector, encode_offsets, head_geometry
from ..numkit.optim import SgdState, make_rng, sgd_step
from ..numkit.tensor import ComputeTape, Tensor
from ..scenes import SceneSample, flip_sample
from .losses import grid_loss, regression_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: GridDetector
    loss_curve: pl.DataFrame
    skipped_rois: int
    batches: int

    @property
    def final_loss(self) -> float:
        return float(self.loss_curve["loss"][-1])


@dataclass
class _Batch:
    images: np.ndarray
    rois: np.ndarray
    proposals: list
    targets: list


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """
    Step schedule: multiply by ``decay_factor`` once for every decay epoch reached.

    ``epoch`` and ``decay_epochs`` are 0-based, so the defaults (13, 18) first
    lower the rate on the 14th and 19th epochs. The loss curve reports epochs
    1-based.
    """
    steps = sum(1 for d in config.decay_epochs if epoch >= d)
    return config.lr * config.decay_factor ** steps


def sample_positives(sample: SceneSample, config: TrainConfig, rng: np.random.Generator) -> list[int]:
    """Indices of positive proposals, a random subset when above the cap, in ascending order."""
    positives = [k for k, p in enumerate(sample.proposals) if p.iou >= config.positive_iou]
    if len(positives) > config.positives_per_image:
        picked = rng.choice(len(positives), size=config.positives_per_image, replace=False)
        positives = [positives[k] for k in sorted(picked)]
    return positives


def _build_batch(model: GridDetector, samples: list[SceneSample], config: TrainConfig,
                 rng: np.random.Generator) -> Optional[_Batch]:
    rois, proposals, targets = [], [], []
    for b, sample in enumerate(samples):
        for k in sample_positives(sample, config, rng):
            proposal = sample.proposals[k]
            geometry = head_geometry(proposal.box, model.config)
            rois.append([b, *geometry.extract.as_tuple()])
            proposals.append((proposal, geometry))
            targets.append(sample.objects[proposal.object_index].box)
    if not rois:
        return None
    images = np.stack([s.image for s in samples])
    return _Batch(images, np.asarray(rois, dtype=np.float64), proposals, targets)


def grid_targets(model: GridDetector, batch: _Batch):
    """Final (R, n, H, W) and intermediate (R, n, h, w) target maps plus validity (R, n)."""
    spec = model.spec
    factor = model.config.heatmap_size // model.config.roi_size_grid
    finals, inters, valid = [], [], []
    for (_, geometry), gt in zip(batch.proposals, batch.targets):
        supervision = render_supervision(grid_point_targets(gt, spec), geometry.roi, spec, geometry.extended)
        finals.append(supervision.maps)
        inters.append(downsample_supervision(supervision, factor).maps)
        valid.append(supervision.valid)
    return np.stack(finals), np.stack(inters), np.stack(valid)


def regression_targets(model: GridDetector, batch: _Batch) -> np.ndarray:
    stds = np.asarray(model.config.delta_stds)
    return np.stack([encode_offsets(p.box, gt) / stds for (p, _), gt in zip(batch.proposals, batch.targets)])


def _batch_loss(model: GridDetector, batch: _Batch, config: TrainConfig) -> tuple[Tensor, int]:
    features = model.features(Tensor(batch.images))
    if model.head == "grid":
        final_t, inter_t, valid = grid_targets(model, batch)
        outputs = model.grid_forward(features, batch.rois)
        return grid_loss(outputs.final, outputs.intermediate, final_t, inter_t, valid, config.lambda_int)
    pred = model.regression_forward(features, batch.rois)
    return regression_loss(pred, regression_targets(model, batch)), 0


def train(model: GridDetector, samples: Sequence[SceneSample], config: TrainConfig) -> TrainResult:
    """
    Momentum SGD over ``samples``; deterministic given ``config.seed``.

    Raises DivergenceError as soon as a forward or backward pass produces a
    non-finite value.
    """
    config.validate()
    if not samples:
        raise InputError("train: empty dataset")
    params = list(model.parameters())
    state = SgdState(config.lr, config.momentum, config.weight_decay)
    rows = []
    skipped_total = 0
    batches = 0

    for epoch in range(config.epochs):
        state.lr = learning_rate(config, epoch)
        rng = make_rng(derive_seed(config.seed, "epoch", epoch))
        order = rng.permutation(len(samples))
        flips = rng.random(len(samples)) < 0.5
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            chosen = order[start:start + config.batch_size]
            batch_samples = [flip_sample(samples[i]) if config.hflip and flips[i] else samples[i] for i in chosen]
            batch = _build_batch(model, batch_samples, config, rng)
            if batch is None:
                continue
            for p in params:
                p.zero_grad()
            try:
                with ComputeTape() as tape:
                    loss, skipped = _batch_loss(model, batch, config)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError("loss is not finite")
                tape.backward(loss)
            except NumericError as e:
                raise DivergenceError(f"{model.head} training diverged: {e}", epoch, b) from e
            sgd_step(params, state)
            skipped_total += skipped
            losses.append(value)
            batches += 1
            logger.debug("epoch %d batch %d: loss %.5f (%d RoIs)", epoch, b, value, len(batch.rois))
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        rows.append({"epoch": epoch + 1, "loss": epoch_loss, "lr": state.lr})
        logger.info("epoch %d/%d: loss %.5f lr %.5g", epoch + 1, config.epochs, epoch_loss, state.lr)

    curve = pl.DataFrame(rows, schema={"epoch": pl.Int64, "loss": pl.Float64, "lr": pl.Float64})
    return TrainResult(model, curve, skipped_total, batches)
