"""
Trainer
Mixed-task optimisation loop with validation-driven checkpointing and
early stopping.
"""

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import structlog
import torch
from tqdm import tqdm

from ..config import RunConfig
from ..exceptions import ConfigError, ModelError, NonFiniteError, TrainingDivergedError, TrainingError
from .checkpoint import model_meta, restore_model, save_checkpoint
from .corpus import SplitSet
from .distiller import Quadruplet
from .model import AdamWOptimizer, Batch, RDRecModel, backward, build_model, set_determinism
from .samples import (
    GROUPS,
    CandidateSets,
    SampleBuilder,
    TrainingSample,
    build_eval_samples,
    build_training_pools,
    sample_epoch,
)
from .textcodec import EntityMap, Task, Vocab

logger = structlog.get_logger()

GROUP_OF = {
    Task.EG: "eg",
    Task.RG_PREF: "rg",
    Task.RG_ATTR: "rg",
    Task.SR: "sr",
    Task.TR: "tr",
}

BEST_CHECKPOINT = "best.ckpt"


class EarlyStopping:
    """Stop after `patience` consecutive epochs without a new minimum"""

    def __init__(self, patience: int):
        if patience < 1:
            raise TrainingError(f"patience must be >= 1, got {patience}", code="BAD_PATIENCE")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; True when it is a new minimum"""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    task: str
    split: str
    loss: float


@dataclass
class TrainResult:
    best_checkpoint: Path
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    history: List[LossRecord] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    model: Optional[RDRecModel] = None


def write_loss_history(records: Sequence[LossRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "task", "split", "loss"])
        for r in records:
            writer.writerow([r.epoch, r.task, r.split, repr(r.loss)])


def weighted_total(losses: Mapping[str, float], ratios: Sequence[int]) -> float:
    """Ratio-weighted mean of per-group losses over the groups present"""
    present = [g for g in GROUPS if g in losses]
    if not present:
        raise TrainingError("no validation losses to aggregate", code="EMPTY_VALIDATION")
    weights = [ratios[GROUPS.index(g)] for g in present]
    return sum(w * losses[g] for w, g in zip(weights, present)) / sum(weights)


@torch.no_grad()
def evaluate_loss(model: RDRecModel, samples: Sequence[TrainingSample], batch_size: int) -> float:
    """Mean per-sequence loss over samples, in eval mode"""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            fo = model(Batch.from_samples(chunk))
            total += float(fo.sequence_loss.sum())
            count += len(chunk)
    finally:
        model.train(was_training)
    return total / count


class Trainer:
    def __init__(self, cfg: RunConfig, vocab: Vocab, entities: EntityMap, splits: SplitSet,
                 quads: Sequence[Quadruplet], candidates: CandidateSets, universe: Sequence[str]):
        if cfg.model.vocab_size < len(vocab):
            raise ConfigError(f"model.vocab_size ({cfg.model.vocab_size}) is smaller than the vocabulary "
                              f"({len(vocab)})")
        self.cfg = cfg
        self.tcfg = cfg.trainer
        self.splits = splits
        self.quads = list(quads)
        self.candidates = candidates
        self.universe = sorted(universe)
        self.builder = SampleBuilder(vocab, entities, cfg.corpus.max_history)
        self.checkpoint_dir = Path(cfg.paths.checkpoints)
        self.ratios = self.tcfg.ratios.as_tuple()

    def _steps_per_epoch(self, pools) -> int:
        if self.tcfg.steps_per_epoch:
            return self.tcfg.steps_per_epoch
        return max(1, math.ceil(sum(len(p) for p in pools.values()) / self.tcfg.batch_size))

    def validation_losses(self, model: RDRecModel, eval_samples: Mapping[str, List[TrainingSample]]) -> Dict[str, float]:
        return {
            group: evaluate_loss(model, samples, self.tcfg.batch_size)
            for group, samples in eval_samples.items()
            if samples
        }

    def train(self, progress: bool = False) -> TrainResult:
        """
        Run epochs until early stopping or max_epochs

        Returns:
            TrainResult with the best checkpoint reloaded into `model`

        Raises:
            TrainingDivergedError: non-finite loss or gradient; the last good checkpoint is kept
        """
        set_determinism(self.cfg.seed, self.cfg.threads)
        rng = np.random.default_rng(self.cfg.seed)
        model = build_model(self.cfg.model)
        optimizer = AdamWOptimizer(model, self.tcfg.lr, self.tcfg.weight_decay, self.tcfg.grad_clip)

        pools = build_training_pools(self.builder, self.splits, self.quads, self.universe, self.tcfg.n_negatives,
                                     self.tcfg.use_preference, self.tcfg.use_attribute)
        val_samples = build_eval_samples(self.builder, self.splits, self.quads, self.candidates, "val",
                                         self.tcfg.use_preference, self.tcfg.use_attribute)
        steps = self._steps_per_epoch(pools)
        stopper = EarlyStopping(self.tcfg.patience)
        best_path = self.checkpoint_dir / BEST_CHECKPOINT
        last_good: Optional[Path] = None
        history: List[LossRecord] = []
        step_losses: List[float] = []
        epoch = 0

        logger.info("Training started", steps_per_epoch=steps, batch_size=self.tcfg.batch_size, lr=self.tcfg.lr,
                    ratios=str(self.tcfg.ratios), max_epochs=self.tcfg.max_epochs)

        for epoch in range(1, self.tcfg.max_epochs + 1):
            model.train()
            sums: Dict[str, float] = defaultdict(float)
            counts: Dict[str, int] = defaultdict(int)
            batches = sample_epoch(pools, self.ratios, steps, self.tcfg.batch_size, rng)
            for samples in tqdm(batches, total=steps, desc=f"epoch {epoch}", disable=not progress, leave=False):
                try:
                    fo = model(Batch.from_samples(samples), check_finite=True)
                except NonFiniteError as e:
                    raise TrainingDivergedError(f"non-finite values in {e.layer} at epoch {epoch}",
                                                str(last_good) if last_good else None)
                grads = backward(fo, model)
                try:
                    optimizer.step(grads)
                except ModelError as e:
                    if e.code != "NAN_GRADIENT":
                        raise
                    raise TrainingDivergedError(f"{e.args[0]} at epoch {epoch}", str(last_good) if last_good else None)
                step_losses.append(float(fo.loss))
                for sample, loss in zip(samples, fo.sequence_loss.detach().tolist()):
                    sums[GROUP_OF[sample.task]] += loss
                    counts[GROUP_OF[sample.task]] += 1

            for group in GROUPS:
                if counts[group]:
                    history.append(LossRecord(epoch, group, "train", sums[group] / counts[group]))

            val_losses = self.validation_losses(model, val_samples)
            val_total = weighted_total(val_losses, self.ratios)
            if not math.isfinite(val_total):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}",
                                            str(last_good) if last_good else None)
            for group, loss in val_losses.items():
                history.append(LossRecord(epoch, group, "val", loss))
            history.append(LossRecord(epoch, "total", "val", val_total))

            improved = stopper.update(epoch, val_total)
            if improved:
                save_checkpoint(model, model_meta(model, optimizer.step_count, val_total, epoch), best_path)
                last_good = best_path
            logger.info(
                "Epoch complete",
                epoch=epoch,
                train_loss=float(np.mean(step_losses[-steps:])),
                val_loss=val_total,
                improved=improved,
                bad_epochs=stopper.bad_epochs,
            )
            if stopper.should_stop:
                logger.info("Early stopping", epoch=epoch, best_epoch=stopper.best_epoch, patience=self.tcfg.patience)
                break

        write_loss_history(history, Path(self.cfg.paths.reports) / "loss_history.csv")
        best_model, meta = restore_model(best_path, self.cfg.model)
        logger.info("Best checkpoint restored", path=str(best_path), epoch=meta.epoch, val_loss=meta.val_loss)
        return TrainResult(
            best_checkpoint=best_path,
            best_epoch=stopper.best_epoch,
            best_val_loss=stopper.best_loss,
            epochs_run=epoch,
            history=history,
            step_losses=step_losses,
            model=best_model,
        )


def train(cfg: RunConfig, vocab: Vocab, entities: EntityMap, splits: SplitSet, quads: Sequence[Quadruplet],
          candidates: CandidateSets, universe: Sequence[str], progress: bool = False) -> TrainResult:
    return Trainer(cfg, vocab, entities, splits, quads, candidates, universe).train(progress=progress)
