from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Tuple

from slimdet.config import SlimDetConfig, config_to_dict
from slimdet.dataset import DetectionDataset
from slimdet.detector import Detector, build_mfssd
from slimdet.evaluation import evaluate_map
from slimdet.graph import GraphSpec, ParamStore, init_params
from slimdet.optim import TrainResult, Trainer
from slimdet.errors import ConfigError
from slimdet.slimming import (PrunePlan, count_params, finetune, iterative_prune, prune_report,
                              ratio_for_reduction)


@dataclass
class PruneOutcome:
    graph: GraphSpec
    params: ParamStore
    plans: List[PrunePlan]
    report: Dict[str, Any]


class SlimmingPipeline:
    """Main class chaining training, sparse training, pruning, fine-tuning and evaluation."""

    def __init__(self, config: SlimDetConfig):
        """
        Initialize the pipeline.

        Args:
            config: Shared runtime settings and the effective run configuration
        """
        self.config = config
        self.logger = config.logger
        self.trainer = Trainer(config)

    def build(self, seed: Optional[int] = None) -> Tuple[GraphSpec, ParamStore]:
        """Fresh graph and seeded initial parameters for the configured architecture."""
        graph = build_mfssd(self.config.arch)
        seed = self.config.train.seed if seed is None else seed
        params = init_params(graph, seed)
        self.logger.info(f"Built detector: {count_params(graph).trainable} trainable parameters, "
                         f"{len(Detector(graph, params).priors)} priors")
        return graph, params

    def metadata(self, stage: str, **extra) -> Dict[str, Any]:
        """Provenance stored in every checkpoint: stage name plus the effective config."""
        data = {"stage": stage, "config": config_to_dict(self.config.run)}
        data.update(extra)
        return data

    def train(
        self,
        dataset: DetectionDataset,
        graph: Optional[GraphSpec] = None,
        params: Optional[ParamStore] = None,
        sparsity_lambda: float = 0.0,
        log_path: Optional[str] = None,
    ) -> Tuple[GraphSpec, TrainResult]:
        """
        Plain training (lambda = 0) or sparse training of the BN scaling factors.

        Returns:
            The graph and the training result
        """
        if graph is None or params is None:
            graph, params = self.build()
        train_config = replace(self.config.train, sparsity_lambda=sparsity_lambda)
        stage = "sparsify" if sparsity_lambda > 0 else "train"
        self.logger.info(f"Stage {stage}: {len(dataset)} images")
        return graph, self.trainer.train(graph, params, dataset, train_config, log_path=log_path)

    def prune(
        self,
        graph: GraphSpec,
        params: ParamStore,
        ratio: Optional[float] = None,
        iterations: int = 1,
        target_reduction: Optional[float] = None,
    ) -> PruneOutcome:
        """
        Remove ``ratio`` of the prunable channels in ``iterations`` passes.

        Args:
            ratio: Share of prunable channels to drop
            iterations: Number of plan/apply passes
            target_reduction: Instead of ``ratio``, the trainable-parameter reduction in percent
                to reach in a single pass

        Returns:
            PruneOutcome with the rewritten graph, parameters and the prune report
        """
        if (ratio is None) == (target_reduction is None):
            raise ConfigError("give exactly one of a prune ratio and a target reduction")
        if target_reduction is not None:
            if iterations != 1:
                raise ConfigError("a target reduction is reached in a single prune pass")
            ratio = ratio_for_reduction(graph, params, target_reduction)
            self.logger.info(f"Ratio {ratio:.4f} removes at least {target_reduction:g}% of the parameters")
        before = count_params(graph, params)
        new_graph, new_params, plans = iterative_prune(graph, params, ratio, iterations)
        after = count_params(new_graph, new_params)

        report = prune_report(plans[-1], before, after)
        kept = plans[-1].total_channels - plans[-1].pruned_channels
        report["requested_ratio"] = ratio
        report["realized_ratio"] = 1.0 - kept / plans[0].total_channels
        report["iterations"] = iterations
        report["target_reduction_pct"] = target_reduction
        report["passes"] = [plan.to_dict() for plan in plans]

        self.logger.info(
            f"Pruned {report['realized_ratio']:.1%} of channels (requested {ratio:.1%}); "
            f"parameters {before.trainable} -> {after.trainable} "
            f"(-{report['param_reduction_pct']:.1f}%)")
        return PruneOutcome(new_graph, new_params, plans, report)

    def finetune(
        self, graph: GraphSpec, params: ParamStore, dataset: DetectionDataset, log_path: Optional[str] = None
    ) -> TrainResult:
        return finetune(self.trainer, graph, params, dataset, self.config.train,
                        lr_scale=self.config.run.finetune_lr_scale, log_path=log_path)

    def evaluate(
        self,
        graph: GraphSpec,
        params: ParamStore,
        dataset: DetectionDataset,
        iou_threshold: float = 0.5,
        score_threshold: float = 0.05,
        nms_iou: float = 0.45,
        top_k: int = 100,
    ) -> Dict[str, Any]:
        """
        Detect on ``dataset`` and score the result.

        Returns:
            EvalResult document at ``iou_threshold`` plus ``ap50`` / ``ap75`` (mAP at 0.5 and 0.75)
        """
        self.logger.info(f"Evaluating on {len(dataset)} images")
        detections = Detector(graph, params).detect(dataset.images, score_threshold, nms_iou, top_k)
        size = (dataset.image_size, dataset.image_size)
        annotations = dataset.annotations
        result = evaluate_map(detections, annotations, graph.num_classes, size, iou_threshold)
        summary = result.to_dict(dataset.manifest.classes if len(dataset.manifest.classes) == graph.num_classes
                                 else None)
        for key, threshold in (("ap50", 0.5), ("ap75", 0.75)):
            if threshold == iou_threshold:
                summary[key] = result.map
            else:
                summary[key] = evaluate_map(detections, annotations, graph.num_classes, size, threshold).map
        self.logger.info(f"mAP@{iou_threshold:g} = {result.map:.4f}")
        return summary

    def run(
        self,
        train_set: DetectionDataset,
        test_set: DetectionDataset,
        ratio: Optional[float],
        sparsity_lambda: float,
        iterations: int = 1,
        target_reduction: Optional[float] = None,
    ) -> Dict[str, Any]:
        """
        Whole compression procedure: baseline, sparse training, prune, fine-tune.

        The prune step removes ``ratio`` of the channels, or the share that first
        reaches ``target_reduction`` percent fewer trainable parameters.

        Returns:
            Baseline and final evaluation documents plus the prune report
        """
        graph, baseline = self.train(train_set)
        baseline_eval = self.evaluate(graph, baseline.params, test_set)
        graph, sparse = self.train(train_set, graph, baseline.params, sparsity_lambda=sparsity_lambda)
        outcome = self.prune(graph, sparse.params, ratio, iterations, target_reduction)
        tuned = self.finetune(outcome.graph, outcome.params, train_set)
        final_eval = self.evaluate(outcome.graph, tuned.params, test_set)
        return {
            "baseline": baseline_eval,
            "final": final_eval,
            "prune_report": outcome.report,
            "graph": outcome.graph,
            "params": tuned.params,
        }
