"""Training loop on the synthetic shapes dataset."""

import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel

from canseg.core.config import settings
from canseg.models.schemas import MIoUReport, RunConfig
from canseg.nn.can import CanModel
from canseg.services.inference import predict_labels
from canseg.services.losses import joint_loss
from canseg.services.metrics import ConfusionMatrix
from canseg.services.optim import SGD, poly_lr
from canseg.services.synth import make_batch, synth_dataset
from canseg.services.weights import load_checkpoint, save_checkpoint, write_weights

logger = logging.getLogger(__name__)

# validation samples come from a seed stream disjoint from training
VALIDATION_SEED_OFFSET = 1_000_003


class TrainResult(BaseModel):
    start_iteration: int
    final_iteration: int
    losses: List[float]
    val_miou: Optional[float] = None


def batch_indices(iteration: int, batch_size: int) -> List[int]:
    return list(range(iteration * batch_size, (iteration + 1) * batch_size))


def validate(model: CanModel, config: RunConfig, batch_size: int = 8) -> MIoUReport:
    data = config.train.dataset
    K = config.model.num_classes
    cm = ConfusionMatrix(K, config.train.ohem.ignore_index)
    samples = list(synth_dataset(config.train.seed + VALIDATION_SEED_OFFSET, data.val_size, data.height, data.width, K))
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images = np.concatenate([s.image.data for s in chunk]).astype(model.dtype)
        cm.add_batch(predict_labels(model, images), np.stack([s.label for s in chunk]))
    return cm.report()


class Trainer:
    def __init__(self, config: RunConfig):
        self.config = config
        sched = config.train.schedule
        self.model = CanModel(config.model.model_copy(update={"train_mode": True}))
        self.optimizer = SGD(list(self.model.named_parameters()), sched.momentum, sched.weight_decay)
        self.iteration = 0

    def resume(self, checkpoint: Path) -> None:
        state = load_checkpoint(checkpoint, self.model, self.optimizer)
        if state.get("seed") != self.config.train.seed:
            logger.warning("checkpoint seed %s differs from configured seed %s", state.get("seed"), self.config.train.seed)
        self.iteration = int(state["iteration"])

    def step(self, iteration: int) -> float:
        train = self.config.train
        data = train.dataset
        lr = poly_lr(iteration, train.schedule)
        images, labels = make_batch(
            train.seed, batch_indices(iteration, data.batch_size), data.height, data.width,
            self.config.model.num_classes, augmented=data.augment,
        )
        self.model.train()
        self.optimizer.zero_grad()
        total, report = joint_loss(self.model(images), labels, train.ohem)
        total.backward()
        self.optimizer.step(lr)
        if iteration % train.log_interval == 0:
            logger.info(
                "iter %d lr %.6f loss %.4f (l_p %.4f l_c1 %.4f l_c2 %.4f) kept %s",
                iteration, lr, report.total, report.l_p, report.l_c1, report.l_c2, report.kept_pixels,
            )
        return report.total

    def checkpoint_dir(self, iteration: int) -> Path:
        return Path(self.config.io.checkpoint_dir) / f"iter-{iteration:06d}"

    def train(self, out_weights: Optional[Path] = None, max_iter: Optional[int] = None) -> TrainResult:
        train = self.config.train
        stop = train.schedule.max_iter if max_iter is None else min(max_iter, train.schedule.max_iter)
        start = self.iteration
        out_weights = Path(out_weights or self.config.io.weights)
        logger.info("training from iteration %d to %d", start, stop)
        losses, val_miou = [], None
        for it in range(start, stop):
            losses.append(self.step(it))
            self.iteration = it + 1
            if self.iteration % train.val_interval == 0:
                val_miou = validate(self.model, self.config).mean
                logger.info("iter %d val mIoU %.4f", self.iteration, val_miou)
            if self.iteration % settings.checkpoint_interval == 0:
                save_checkpoint(self.checkpoint_dir(self.iteration), self.model, self.optimizer, self.iteration, train.seed)
        if stop > start:
            save_checkpoint(self.checkpoint_dir(self.iteration), self.model, self.optimizer, self.iteration, train.seed)
        write_weights(self.model, out_weights)
        logger.info("wrote weights to %s", out_weights)
        return TrainResult(start_iteration=start, final_iteration=self.iteration, losses=losses, val_miou=val_miou)
