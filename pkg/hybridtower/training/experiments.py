"""
Ablation runs and token-selection analysis on synthetic data
"""
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np
from scipy.stats import binomtest

from hybridtower.autograd.tensor import no_grad
from hybridtower.config import ModelDims, RunConfig, TrainConfig
from hybridtower.data.synthetic import PairedDataset
from hybridtower.errors import ConfigError
from hybridtower.models.hybrid_tower import HybridTowerModel
from hybridtower.models.its import top_k_order
from hybridtower.training.evaluation import evaluate_split
from hybridtower.training.objectives import RetrievalMetrics
from hybridtower.training.trainer import Trainer
from hybridtower.utils.logger import get_logger
from hybridtower.utils.report import format_table

logger = get_logger("experiments")

# name -> config overrides; every variant runs generator pretraining then fine-tuning
ABLATION_VARIANTS = OrderedDict([
    ("full", []),
    ("no_recon", ["objectives.alpha=0"]),
    ("inputs_video", ["generator.inputs=video"]),
    ("inputs_video_frame", ["generator.inputs=video_frame"]),
    ("inputs_video_patch", ["generator.inputs=video_patch"]),
    ("inputs_frame_patch", ["generator.inputs=frame_patch"]),
    ("fusion_cross_attn", ["fusion.kind=cross_attn"]),
])
VARIANT_STAGES = [1, 2]
BASELINE = "two_tower"


@dataclass
class AblationResult:
    name: str
    t2v: RetrievalMetrics
    v2t: RetrievalMetrics
    stages: List[int] = field(default_factory=list)
    history: List[Dict[str, float]] = field(default_factory=list, repr=False)

    def row(self) -> List[str]:
        return [self.name, f"{self.t2v.r1:.2f}", f"{self.t2v.r5:.2f}", f"{self.t2v.r10:.2f}",
                f"{self.t2v.sum_r:.2f}", f"{self.t2v.mnr:.2f}", f"{self.v2t.r1:.2f}"]


def _variant_config(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    variant = cfg.copy()
    for item in overrides:
        key, value = item.split("=", 1)
        variant.set(key, value)
    variant.require_valid()
    return variant


def run_ablation(cfg: RunConfig, dataset: PairedDataset, variants: Optional[Iterable[str]] = None,
                 split: str = "test", progress: bool = False) -> List[AblationResult]:
    """
    Train every variant from one shared warmed-up backbone and evaluate it

    All variants see the same seed and the same stage-0 weights, then run stages 1
    and 2 on the same budget. The Two-Tower baseline row is the warmed-up backbone itself.

    Args:
        cfg: Base run config
        dataset: Synthetic dataset
        variants: Subset of ABLATION_VARIANTS names (all when None)
        split: Split to report on
        progress: Show progress bars

    Returns:
        list of AblationResult, baseline first
    """
    names = list(variants) if variants is not None else list(ABLATION_VARIANTS)
    unknown = [n for n in names if n not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"Unknown ablation variants {unknown}; expected {list(ABLATION_VARIANTS)}")

    base_model = HybridTowerModel(ModelDims.from_config(cfg))
    base_trainer = Trainer(base_model, dataset, TrainConfig.from_config(cfg),
                           cfg.hash(), cfg.to_text(), progress=progress)
    if cfg.get("train", "stage0_steps") > 0:
        base_trainer.train_stage0()
    backbone = base_trainer.checkpoint()

    results = [AblationResult(BASELINE, *evaluate_split(base_model, dataset, split, mode="two_tower"))]
    logger.info(f"{BASELINE}: {results[0].t2v.to_line()}")

    for name in names:
        variant_cfg = _variant_config(cfg, ABLATION_VARIANTS[name])
        model = HybridTowerModel(ModelDims.from_config(variant_cfg))
        trainer = Trainer(model, dataset, TrainConfig.from_config(variant_cfg),
                          variant_cfg.hash(), variant_cfg.to_text(), progress=progress)
        trainer.restore(backbone)
        trainer.run(VARIANT_STAGES)
        result = AblationResult(name, *evaluate_split(model, dataset, split, mode="hybrid"),
                                stages=list(trainer.completed_stages), history=trainer.history)
        logger.info(f"{name}: {result.t2v.to_line()}")
        results.append(result)
    return results


def format_ablation_table(results: List[AblationResult]) -> str:
    headers = ["variant", "R@1", "R@5", "R@10", "SumR", "MnR", "v2t R@1"]
    return format_table(headers, [r.row() for r in results])


@dataclass
class ItsSignalReport:
    """How often selected patches land on planted signal patches"""
    hits: int
    trials: int
    hit_rate: float
    chance: float
    p_value: float

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_line(self) -> str:
        return (f"its_hits={self.hits} its_trials={self.trials} its_hit_rate={self.hit_rate:.4f} "
                f"its_chance={self.chance:.4f} its_p={self.p_value:.3g}")


def its_signal_report(model: HybridTowerModel, dataset: PairedDataset, split: str = "test",
                      batch_size: int = 64) -> ItsSignalReport:
    """
    One-sided binomial test of signal-patch hits against the p_info / n chance rate

    Args:
        model: Trained model
        dataset: Dataset with planted signal masks
        split: Split to analyze
        batch_size: Videos per forward pass

    Returns:
        ItsSignalReport
    """
    rows = dataset.split_indices(split)
    k = model.dims.k
    hits = 0
    trials = 0
    with no_grad():
        for start in range(0, len(rows), batch_size):
            batch = rows[start:start + batch_size]
            scores = model.informativeness(model.encode_videos(dataset.videos[batch]))
            order = top_k_order(scores, k)
            mask = dataset.signal_mask[batch].reshape(len(batch), -1)
            hits += int(np.take_along_axis(mask, order, axis=1).sum())
            trials += int(order.size)

    chance = dataset.spec.p_info / dataset.spec.patches
    p_value = float(binomtest(hits, trials, chance, alternative="greater").pvalue) if trials else 1.0
    report = ItsSignalReport(hits, trials, hits / trials if trials else 0.0, chance, p_value)
    logger.info(report.to_line())
    return report
