"""
Staged training loop

Stage 0 warms up the text and video encoders contrastively (backbone only).
Stage 1 trains the pseudo-query generator on reconstruction with everything else frozen.
Stage 2 fine-tunes the whole network on L_cons + alpha * L_recon.
"""
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from hybridtower.autograd.optim import Adam
from hybridtower.autograd.tensor import Parameter, Tensor
from hybridtower.config import TrainConfig
from hybridtower.data.synthetic import PairedDataset
from hybridtower.errors import ConfigError, InvariantError, NumericError, TrainingAborted
from hybridtower.models.hybrid_tower import HybridTowerModel
from hybridtower.training.checkpoint import Checkpoint, parameter_digest
from hybridtower.training.evaluation import evaluate_split, mean_recon_cosine
from hybridtower.training.objectives import info_nce, recon_loss, similarity_matrix, total_loss
from hybridtower.utils.logger import get_logger

logger = get_logger("trainer")

STAGES = (0, 1, 2)
ALLOWED_SPLITS = {"train", "val"}


class Trainer:
    """Runs training stages on one model and one dataset

    Args:
        model: Model to train in place
        dataset: Source of train batches and validation metrics
        config: Optimization knobs
        config_hash: Hash of the effective run config, embedded in checkpoints
        config_text: Canonical run config, embedded in checkpoints
        log_path: Optional append-only training log
        progress: Show a tqdm progress bar
    """

    def __init__(self, model: HybridTowerModel, dataset: PairedDataset, config: TrainConfig,
                 config_hash: str = "", config_text: str = "", log_path: Optional[Path] = None,
                 progress: bool = True):
        if config.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        self.model = model
        self.dataset = dataset
        self.config = config
        self.config_hash = config_hash
        self.config_text = config_text
        self.log_path = Path(log_path) if log_path else None
        self.progress = progress

        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.completed_stages: List[int] = []
        self.optimizer: Optional[Adam] = None
        # stage that was entered but not finished, and how many of its steps ran
        self.stage_in_progress: Optional[int] = None
        self.stage_step = 0
        self._resume_point: Optional[Checkpoint] = None
        self.history: List[Dict[str, float]] = []
        self.eval_history: List[Dict[str, float]] = []
        # called with the global step after every successful update
        self.step_callback: Optional[Callable[[int], None]] = None

    # ------------------------------------------------------------- resuming

    def restore(self, checkpoint: Checkpoint):
        """Load parameters, counters and RNG state from a checkpoint

        A checkpoint taken inside a stage also carries that stage's optimizer
        moments; the next run of the same stage picks them up and only runs the
        remaining steps.
        """
        self.model.load_state_dict(checkpoint.params)
        self.step = checkpoint.step
        self.completed_stages = list(checkpoint.completed_stages)
        self.rng.bit_generator.state = checkpoint.rng_state
        self._resume_point = checkpoint if checkpoint.stage_in_progress is not None else None
        if self._resume_point:
            logger.info(f"Resumed from step {self.step} inside stage {checkpoint.stage_in_progress} "
                        f"({checkpoint.stage_step} steps done)")
        else:
            logger.info(f"Resumed from step {self.step} (stages {self.completed_stages})")

    def checkpoint(self) -> Checkpoint:
        """Snapshot of the current state; optimizer moments only while a stage is unfinished"""
        in_stage = self.stage_in_progress is not None and self.optimizer is not None
        return Checkpoint(
            params=self.model.state_dict(),
            step=self.step,
            config_hash=self.config_hash,
            config_text=self.config_text,
            rng_state=self.rng.bit_generator.state,
            optimizer=self.optimizer.state_dict() if in_stage else OrderedDict(),
            completed_stages=list(self.completed_stages),
            model_hash=self.model.fingerprint(),
            stage_in_progress=self.stage_in_progress if in_stage else None,
            stage_step=self.stage_step if in_stage else 0,
            optimizer_step=self.optimizer.t if in_stage else 0,
        )

    # ------------------------------------------------------------- stages

    def trainable_parameters(self, stage: int) -> List[Tuple[str, Parameter]]:
        named = list(self.model.named_parameters())
        if stage == 0:
            return [(n, p) for n, p in named if n.startswith(("text_encoder.", "video_encoder.")) or n == "log_tau"]
        if stage == 1:
            return [(n, p) for n, p in named if n.startswith("generator.")]
        if stage == 2:
            return named
        raise ConfigError(f"Unknown stage {stage}; expected one of {STAGES}")

    def _stage0_loss(self, rows: np.ndarray) -> Tuple[float, Tensor, Tensor]:
        t = self.model.encode_texts(self.dataset.text_batch(rows))
        v = self.model.two_tower_embeddings(self.dataset.videos[rows])
        l_cons = info_nce(similarity_matrix(t, v), self.model.tau)
        return 0.0, l_cons, l_cons

    def _stage1_loss(self, rows: np.ndarray) -> Tuple[Tensor, float, Tensor]:
        t = self.model.encode_texts(self.dataset.text_batch(rows))
        t_p = self.model.pseudo_queries(self.dataset.videos[rows])
        l_recon = recon_loss(t_p, t)
        return l_recon, 0.0, l_recon

    def _stage2_loss(self, rows: np.ndarray) -> Tuple[Tensor, Tensor, Tensor]:
        t = self.model.encode_texts(self.dataset.text_batch(rows))
        out = self.model.forward_video(self.dataset.videos[rows])
        l_cons = info_nce(similarity_matrix(t, out.v), self.model.tau)
        l_recon = recon_loss(out.t_p, t)
        return l_recon, l_cons, total_loss(l_cons, l_recon, self.config.alpha)

    def train_stage0(self) -> Checkpoint:
        """Contrastive warm-up of the two encoders in the Two-Tower setting"""
        return self._run_stage(0, self._stage0_loss)

    def train_stage1(self) -> Checkpoint:
        """Generator pretraining on L_recon; encoders and fusioner stay frozen"""
        resuming = self._resume_point is not None and self._resume_point.stage_in_progress == 1
        if self.model.dims.generator_init_from_text and 0 in self.completed_stages and not resuming:
            self.model.generator.init_from_text_encoder(self.model.text_encoder)
        return self._run_stage(1, self._stage1_loss)

    def train_stage2(self) -> Checkpoint:
        """Full fine-tuning on L_cons + alpha * L_recon"""
        return self._run_stage(2, self._stage2_loss)

    def run(self, stages) -> Checkpoint:
        """Run stages in order and return the final checkpoint

        When resuming inside one of ``stages``, the stages before it are skipped.
        """
        runners = {0: self.train_stage0, 1: self.train_stage1, 2: self.train_stage2}
        stages = list(stages)
        if self._resume_point is not None and self._resume_point.stage_in_progress in stages:
            stages = stages[stages.index(self._resume_point.stage_in_progress):]
            logger.info(f"Continuing with stages {stages}")
        checkpoint = self.checkpoint()
        for stage in stages:
            checkpoint = runners[stage]()
        return checkpoint

    # ------------------------------------------------------------- loop

    def _run_stage(self, stage: int, loss_fn: Callable) -> Checkpoint:
        cfg = self.config
        steps = cfg.stage_steps[stage]
        trainable = self.trainable_parameters(stage)
        trainable_names = {n for n, _ in trainable}
        frozen_before = parameter_digest(
            OrderedDict((n, p.data) for n, p in self.model.named_parameters() if n not in trainable_names))

        self.model.set_trainable(False)
        for _, p in trainable:
            p.requires_grad = True
        self.optimizer = Adam(trainable, lr=cfg.stage_lr[stage], beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        self.stage_in_progress, self.stage_step = stage, 0
        pending, self._resume_point = self._resume_point, None
        if pending is not None:
            if pending.stage_in_progress == stage:
                self.optimizer.load_state_dict(pending.optimizer, pending.optimizer_step)
                self.stage_step = pending.stage_step
            else:
                logger.warning(f"Checkpoint was taken inside stage {pending.stage_in_progress}; "
                               f"stage {stage} starts with fresh optimizer state")

        self.dataset.accessed.clear()
        train_rows = self.dataset.split_indices("train")
        batch_size = min(cfg.batch_size, len(train_rows))
        remaining = max(0, steps - self.stage_step)
        logger.info(f"Stage {stage}: {remaining} of {steps} steps, {len(trainable)} trainable tensors, "
                    f"batch {batch_size}")

        last_good = self._snapshot()
        best_score = -math.inf
        stale_evals = 0
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = open(self.log_path, "a", encoding="utf-8") if self.log_path else None
        try:
            for _ in tqdm(range(remaining), desc=f"stage {stage}", disable=not self.progress, leave=False):
                rows = np.sort(self.rng.choice(train_rows, size=batch_size, replace=False))
                self.optimizer.zero_grad()
                l_recon, l_cons, total = loss_fn(rows)
                values = {"l_cons": float(l_cons.item() if isinstance(l_cons, Tensor) else l_cons),
                          "l_recon": float(l_recon.item() if isinstance(l_recon, Tensor) else l_recon),
                          "total": float(total.item())}
                if not all(math.isfinite(x) for x in values.values()):
                    self._rollback(last_good)
                    logger.error(f"Non-finite loss at step {self.step + 1}; restored step {self.step}")
                    raise TrainingAborted(f"Non-finite loss at step {self.step + 1}", self.step)

                total.backward()
                self.optimizer.step()
                if stage != 1:
                    self.model.clamp_temperature()
                if not all(np.all(np.isfinite(p.data)) for _, p in trainable):
                    self._rollback(last_good)
                    raise TrainingAborted(f"Non-finite parameters after step {self.step + 1}", self.step)

                self.step += 1
                self.stage_step += 1
                values["step"] = self.step
                self.history.append(values)
                if log_file:
                    log_file.write(f"step={self.step} l_cons={values['l_cons']:.8f} "
                                   f"l_recon={values['l_recon']:.8f} total={values['total']:.8f}\n")
                last_good = self._snapshot()
                if self.step_callback:
                    self.step_callback(self.step)

                if cfg.eval_every and self.step % cfg.eval_every == 0:
                    score = self._evaluate(stage)
                    if score > best_score + 1e-12:
                        best_score, stale_evals = score, 0
                    else:
                        stale_evals += 1
                    if cfg.patience and stale_evals >= cfg.patience:
                        logger.info(f"Stage {stage} stopped early at step {self.step} "
                                    f"(no improvement in {stale_evals} evaluations)")
                        break
        except NumericError as e:
            self._rollback(last_good)
            logger.error(f"Numeric failure in stage {stage}: {e}")
            raise TrainingAborted(str(e), self.step)
        finally:
            if log_file:
                log_file.close()
            self.model.set_trainable(True)

        frozen_after = parameter_digest(
            OrderedDict((n, p.data) for n, p in self.model.named_parameters() if n not in trainable_names))
        moved = [n for n in frozen_before if frozen_before[n] != frozen_after[n]]
        if moved:
            raise InvariantError(f"Frozen parameters changed during stage {stage}: {moved[:5]}")

        self._audit_data_access()
        self.completed_stages.append(stage)
        self.stage_in_progress, self.stage_step = None, 0
        logger.info(f"Stage {stage} finished at step {self.step}")
        return self.checkpoint()

    def _snapshot(self) -> dict:
        return {
            "params": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "optimizer_step": self.optimizer.t,
            "rng": self.rng.bit_generator.state,
            "step": self.step,
            "stage_step": self.stage_step,
        }

    def _rollback(self, snapshot: dict):
        """Put parameters, optimizer moments, RNG and counters back to a snapshot"""
        self.model.load_state_dict(snapshot["params"])
        self.optimizer.load_state_dict(snapshot["optimizer"], snapshot["optimizer_step"])
        self.rng.bit_generator.state = snapshot["rng"]
        self.step = snapshot["step"]
        self.stage_step = snapshot["stage_step"]

    def _evaluate(self, stage: int) -> float:
        """Validation score used for early stopping (SumR, or mean cosine in stage 1)"""
        if stage == 1:
            score = mean_recon_cosine(self.model, self.dataset, "val")
            logger.info(f"step={self.step} val_recon_cos={score:.4f}")
            self.eval_history.append({"step": self.step, "val_recon_cos": score})
            return score
        mode = "two_tower" if stage == 0 else "hybrid"
        t2v, _ = evaluate_split(self.model, self.dataset, "val", mode)
        logger.info(f"step={self.step} val {t2v.to_line()}")
        self.eval_history.append({"step": self.step, "val_sum_r": t2v.sum_r})
        return t2v.sum_r

    def _audit_data_access(self):
        touched = self.dataset.accessed - ALLOWED_SPLITS
        if touched:
            raise InvariantError(f"Training touched held-out splits: {sorted(touched)}")


def parse_stages(value: str) -> List[int]:
    """``0``/``1``/``2``, ``both`` (1 then 2) or ``all`` (0, 1, 2)"""
    named = {"both": [1, 2], "all": [0, 1, 2]}
    if value in named:
        return named[value]
    if value in ("0", "1", "2"):
        return [int(value)]
    raise ConfigError(f"Unknown stage {value!r}; expected 0, 1, 2, both or all")
