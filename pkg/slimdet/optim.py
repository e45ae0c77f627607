"""
SGD training loop with warmup/step learning rates and the L1 penalty on
batch-norm scaling factors used for sparse ("slimming") training.
"""
import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from slimdet.checkpoint import atomic_write
from slimdet.config import SlimDetConfig, TrainConfig
from slimdet.detector import Detector
from slimdet.errors import ConfigError, NumericalError, ShapeError
from slimdet.graph import GraphSpec, ParamStore, check_params, is_bn_param, make_leaves
from slimdet.multibox import multibox_loss
from slimdet.priors import Annotation, match_priors
from slimdet.tensor import Tape, Tensor, no_grad

LOG_FIELDS = ("epoch", "loss", "penalty", "lr", "gamma_min", "gamma_median", "gamma_max",
              "gamma_frac_below_0p01")


def lr_at(config: TrainConfig, epoch: int, step_in_epoch: int, steps_per_epoch: int) -> float:
    """
    Learning rate for one optimisation step.

    Warmup ramps linearly from base_lr/100 to base_lr over the first
    ``warmup_epochs`` epochs; afterwards the rate is multiplied by
    ``lr_step_factor`` once for every boundary in ``lr_step_epochs`` already reached.
    """
    if epoch < 0 or step_in_epoch < 0:
        raise ConfigError(f"epoch and step must be >= 0, got ({epoch}, {step_in_epoch})")
    warmup_steps = config.warmup_epochs * steps_per_epoch
    step = epoch * steps_per_epoch + step_in_epoch
    if step < warmup_steps:
        start = config.base_lr / 100.0
        return start + (config.base_lr - start) * step / warmup_steps
    drops = sum(1 for boundary in config.lr_step_epochs if boundary <= epoch)
    return config.base_lr * config.lr_step_factor ** drops


def sgd_step(
    params: ParamStore,
    grads: Dict[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> Tuple[ParamStore, Dict[str, np.ndarray]]:
    """
    One momentum-SGD update of every parameter that has a gradient.

    Args:
        params: Current parameters (buffers pass through untouched)
        grads: Gradient per trainable parameter name
        velocity: Momentum state; missing entries start at zero
        lr: Learning rate
        momentum: Momentum coefficient
        weight_decay: L2 coefficient, not applied to batch-norm gamma/beta

    Returns:
        (new params, new velocity); the inputs are not modified
    """
    for name, grad in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name}")
        if grad.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for {name}; step rejected")

    new_params = dict(params)
    new_velocity = dict(velocity)
    for name, grad in grads.items():
        value = params[name]
        g = grad if is_bn_param(name) else grad + weight_decay * value
        v = velocity.get(name)
        v = g if v is None else momentum * v + g
        new_velocity[name] = v.astype(value.dtype, copy=False)
        new_params[name] = (value - lr * v).astype(value.dtype, copy=False)
    return new_params, new_velocity


def sparsity_subgradient(gamma: Tensor, lam: float) -> Tensor:
    """lam * sign(gamma), with sign(0) = 0."""
    if lam < 0:
        raise ConfigError(f"sparsity lambda must be >= 0, got {lam}")
    return Tensor(lam * np.sign(gamma.data), dtype=gamma.dtype)


def sparsity_penalty(gammas: Iterable[np.ndarray], lam: float) -> float:
    return float(lam * sum(np.abs(g).astype(np.float64).sum() for g in gammas))


def gamma_names(graph: GraphSpec) -> List[str]:
    return [f"{node.id}.gamma" for node in graph.nodes if node.kind == "batchnorm"]


def gamma_summary(graph: GraphSpec, params: ParamStore) -> Dict[str, float]:
    """min / median / max of |gamma| over every batch norm, plus the share below 0.01."""
    values = np.concatenate([np.abs(params[name]).astype(np.float64) for name in gamma_names(graph)])
    return {
        "gamma_min": float(values.min()),
        "gamma_median": float(np.median(values)),
        "gamma_max": float(values.max()),
        "gamma_frac_below_0p01": float(np.mean(values < 0.01)),
    }


def encode_train_log(records: Sequence[Dict[str, Any]]) -> bytes:
    """One JSON object per line, fields in LOG_FIELDS order."""
    lines = [json.dumps({key: record[key] for key in LOG_FIELDS}) for record in records]
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def write_train_log(path: str, records: Sequence[Dict[str, Any]]) -> None:
    atomic_write(path, encode_train_log(records))


@dataclass
class TrainResult:
    params: ParamStore
    log: List[Dict[str, Any]] = field(default_factory=list)
    steps: int = 0


class Trainer:
    """Runs the training loop for a graph on an in-memory dataset."""

    def __init__(self, config: SlimDetConfig):
        """
        Initialize the trainer.

        Args:
            config: Shared runtime settings (logger)
        """
        self.config = config
        self.logger = config.logger

    def _assignments(self, detector, annotations, iou_threshold: float) -> List[np.ndarray]:
        return [match_priors(detector.priors, truths, iou_threshold) for truths in annotations]

    def batch_loss(
        self,
        graph: GraphSpec,
        params: ParamStore,
        images: np.ndarray,
        annotations: Sequence[Sequence[Annotation]],
        train_config: Optional[TrainConfig] = None,
    ) -> float:
        """Detection loss of one batch with batch statistics; parameters are not changed."""
        train_config = train_config or self.config.train
        detector = Detector(graph, params)
        assignments = self._assignments(detector, annotations, train_config.iou_threshold)
        with no_grad():
            loc, conf = detector.forward(Tensor(images), train=True)
            loss = multibox_loss(loc, conf, detector.priors, assignments, annotations,
                                 train_config.neg_pos_ratio)
        return loss.item()

    def train(
        self,
        graph: GraphSpec,
        params: ParamStore,
        dataset,
        train_config: TrainConfig,
        log_path: Optional[str] = None,
    ) -> TrainResult:
        """
        Train ``params`` on ``dataset``.

        Args:
            graph: Model topology
            params: Initial parameters (not modified)
            dataset: Object exposing ``images`` [N, C, H, W] in [0, 1] and ``annotations``
            train_config: Schedule, sparsity weight, batch size and seed
            log_path: Optional line-delimited JSON log destination

        Returns:
            TrainResult with the final parameters and one log record per epoch
        """
        train_config.validate()
        check_params(graph, params)
        images = np.asarray(dataset.images)
        annotations = list(dataset.annotations)
        n = images.shape[0]
        if n == 0:
            raise ConfigError("training dataset is empty")
        batch_size = train_config.batch_size
        if batch_size > n:
            raise ConfigError(f"train.batch_size {batch_size} exceeds dataset size {n}")
        steps_per_epoch = n // batch_size
        lam = train_config.sparsity_lambda
        gammas = gamma_names(graph)

        self.logger.info(
            f"Training {train_config.epochs} epochs on {n} images "
            f"({steps_per_epoch} steps/epoch, lambda={lam:g})")

        params = {name: value.copy() for name, value in params.items()}
        velocity: Dict[str, np.ndarray] = {}
        detector = Detector(graph, params)
        assignments = self._assignments(detector, annotations, train_config.iou_threshold)
        rng = np.random.default_rng(train_config.seed)
        result = TrainResult(params=params)

        for epoch in range(train_config.epochs):
            order = rng.permutation(n)
            losses = []
            for step in range(steps_per_epoch):
                global_step = result.steps
                lr = lr_at(train_config, epoch, step, steps_per_epoch)
                batch = order[step * batch_size:(step + 1) * batch_size]
                try:
                    params, velocity, loss = self._step(
                        graph, params, velocity, images[batch], [annotations[i] for i in batch],
                        [assignments[i] for i in batch], train_config, lr, gammas)
                except NumericalError as e:
                    if e.step is not None:
                        raise
                    self.logger.warning(f"Rejected step {global_step}: {e}")
                    raise NumericalError(str(e), step=global_step) from e
                self.logger.debug(f"epoch {epoch} step {step} loss {loss:.6f} lr {lr:.6g}")
                losses.append(loss)
                result.steps += 1

            record = {
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "penalty": sparsity_penalty((params[name] for name in gammas), lam),
                "lr": float(lr),
            }
            record.update(gamma_summary(graph, params))
            result.log.append(record)
            self.logger.info(
                f"Epoch {epoch}: loss {record['loss']:.4f} penalty {record['penalty']:.4f} "
                f"lr {record['lr']:.5g} median|gamma| {record['gamma_median']:.4f}")

        result.params = params
        if log_path:
            write_train_log(log_path, result.log)
        self.logger.info(f"Training finished after {result.steps} steps")
        return result

    def _step(self, graph, params, velocity, images, annotations, assignments, train_config, lr, gammas):
        detector = Detector(graph, params)
        leaves = make_leaves(graph, params, requires_grad=True)
        buffers: ParamStore = {}
        with Tape() as tape:
            loc, conf = detector.forward(Tensor(images), train=True, leaves=leaves, buffers_out=buffers)
            loss = multibox_loss(loc, conf, detector.priors, assignments, annotations,
                                 train_config.neg_pos_ratio)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"training loss diverged ({value})")
        tape.backward(loss)

        grads = {}
        for name, leaf in leaves.items():
            grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if train_config.sparsity_lambda > 0:
            for name in gammas:
                grads[name] = grads[name] + sparsity_subgradient(leaves[name], train_config.sparsity_lambda).data
        params, velocity = sgd_step(params, grads, velocity, lr, train_config.momentum,
                                    train_config.weight_decay)
        params.update(buffers)
        return params, velocity, value
