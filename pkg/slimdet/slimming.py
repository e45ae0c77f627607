"""
Channel slimming: rank batch-norm scaling factors globally, plan which
channels to drop, rewrite the graph and its parameters, and count what is left.
"""
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from slimdet.config import TrainConfig
from slimdet.errors import ConfigError, ShapeError
from slimdet.graph import (BN_BUFFERS, BN_TRAINABLE, CONV_KINDS, INPUT, GraphSpec, Node,
                           ParamStore, check_params, infer_shapes)
from slimdet.optim import Trainer, TrainResult

ELEMENT_BYTES = 4


@dataclass
class PrunePlan:
    """Keep masks over the prunable batch norms and the threshold that produced them."""

    threshold: float
    masks: Dict[str, np.ndarray]
    requested_ratio: float
    realized_ratio: float
    protected: List[str] = field(default_factory=list)

    @property
    def total_channels(self) -> int:
        return int(sum(mask.size for mask in self.masks.values()))

    @property
    def pruned_channels(self) -> int:
        return int(sum((~mask).sum() for mask in self.masks.values()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": float(self.threshold),
            "requested_ratio": float(self.requested_ratio),
            "realized_ratio": float(self.realized_ratio),
            "total_channels": self.total_channels,
            "pruned_channels": self.pruned_channels,
            "protected": list(self.protected),
            "nodes": {
                node_id: {"kept": int(mask.sum()), "dropped": int((~mask).sum())}
                for node_id, mask in self.masks.items()
            },
        }


@dataclass
class ParamReport:
    """Trainable parameter counts per node plus buffer and byte totals."""

    per_node: Dict[str, int]
    kinds: Dict[str, str]
    buffers: int
    byte_size: int

    @property
    def trainable(self) -> int:
        return int(sum(self.per_node.values()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trainable": self.trainable,
            "buffers": self.buffers,
            "byte_size": self.byte_size,
            "per_node": dict(self.per_node),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(node_id, self.kinds[node_id], count) for node_id, count in self.per_node.items()],
            columns=["node", "kind", "params"],
        )


def prunable_pairs(graph: GraphSpec) -> Dict[str, str]:
    """batch-norm id -> id of the (non-head) conv feeding it, when that BN is the conv's only consumer."""
    pairs = {}
    for node in graph.nodes:
        if node.kind != "batchnorm":
            continue
        source = node.inputs[0]
        if source == INPUT or graph.node(source).kind != "conv":
            continue
        if [c.id for c in graph.consumers(source)] == [node.id]:
            pairs[node.id] = source
    return pairs


def downstream_gates(graph: GraphSpec) -> Dict[str, List[Tuple[str, int]]]:
    """
    Protected batch norms each prunable batch norm feeds, with its channel offset there.

    The walk passes through ReLU, pooling and up-sampling unchanged, shifts the
    offset at a concat by the channels of the blocks before it, and stops at a conv.
    """
    pairs = prunable_pairs(graph)
    shapes = infer_shapes(graph)
    gates = {}
    for bn in pairs:
        found = []
        frontier = [(bn, 0)]
        while frontier:
            node_id, offset = frontier.pop()
            for consumer in graph.consumers(node_id):
                if consumer.kind in ("relu", "maxpool", "upsample"):
                    frontier.append((consumer.id, offset))
                elif consumer.kind == "concat":
                    before = consumer.inputs[:consumer.inputs.index(node_id)]
                    frontier.append((consumer.id, offset + sum(shapes[s][0] for s in before)))
                elif consumer.kind == "batchnorm" and consumer.id not in pairs:
                    found.append((consumer.id, offset))
        gates[bn] = found
    return gates


def channel_scores(graph: GraphSpec, params: ParamStore) -> Dict[str, np.ndarray]:
    """
    Ranking score per prunable channel: |gamma|, raised to the |gamma| of any
    protected batch norm the channel reaches.

    Dropping a concat-fed channel leaves the output unchanged only when both
    the channel and its slot in the later batch norm have gamma = beta = 0.
    """
    scores = {}
    for bn, gates in downstream_gates(graph).items():
        score = np.abs(params[f"{bn}.gamma"]).astype(np.float64)
        for gate, offset in gates:
            downstream = np.abs(params[f"{gate}.gamma"][offset:offset + score.size]).astype(np.float64)
            score = np.maximum(score, downstream)
        scores[bn] = score
    return scores


def plan_prune(graph: GraphSpec, params: ParamStore, ratio: float) -> PrunePlan:
    """
    Choose channels to remove by a single global threshold on the channel scores.

    Args:
        graph: Trained topology
        params: Parameters holding the scaling factors
        ratio: Share of prunable channels to drop, in (0, 1)

    Returns:
        PrunePlan keeping at least one channel in every node
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"prune ratio must lie in (0, 1), got {ratio}")
    pairs = prunable_pairs(graph)
    if not pairs:
        raise ShapeError("graph has no prunable batch-norm nodes")
    node_ids = list(pairs)
    scores = channel_scores(graph, params)
    values = np.concatenate([scores[b] for b in node_ids])
    bounds = np.cumsum([0] + [graph.node(b).attrs["channels"] for b in node_ids])
    total = values.size
    drop = int(math.floor(ratio * total))

    # ascending score, earlier index first among ties
    order = np.lexsort((np.arange(total), values))
    keep = np.ones(total, dtype=bool)
    keep[order[:drop]] = False
    threshold = float(values[order[drop]])

    masks = {}
    for k, node_id in enumerate(node_ids):
        mask = keep[bounds[k]:bounds[k + 1]].copy()
        if not mask.any():
            local = values[bounds[k]:bounds[k + 1]]
            mask[local.size - 1 - int(np.argmax(local[::-1]))] = True
        masks[node_id] = mask

    protected = [n.id for n in graph.nodes if n.kind in ("head_loc", "head_conf")]
    protected += [n.id for n in graph.nodes if n.kind == "batchnorm" and n.id not in pairs]
    plan = PrunePlan(threshold=threshold, masks=masks, requested_ratio=ratio, realized_ratio=0.0,
                     protected=protected)
    plan.realized_ratio = plan.pruned_channels / total
    return plan


def _check_plan(graph: GraphSpec, plan: PrunePlan, pairs: Dict[str, str]) -> None:
    for node_id, mask in plan.masks.items():
        if node_id not in pairs:
            raise ShapeError(f"plan masks {node_id}, which is not a prunable batch norm")
        channels = graph.node(node_id).attrs["channels"]
        if mask.shape != (channels,):
            raise ShapeError(f"mask for {node_id} has {mask.size} entries, node has {channels} channels")
        if not mask.any():
            raise ShapeError(f"mask for {node_id} removes every channel")


def _output_masks(graph: GraphSpec, plan: PrunePlan, pairs: Dict[str, str]) -> Dict[str, np.ndarray]:
    conv_to_bn = {conv: bn for bn, conv in pairs.items() if bn in plan.masks}
    masks = {INPUT: np.ones(graph.input_channels, dtype=bool)}
    for node in graph.nodes:
        a = node.attrs
        if node.kind in CONV_KINDS:
            bn = conv_to_bn.get(node.id)
            masks[node.id] = plan.masks[bn].astype(bool) if bn else np.ones(a["out_channels"], dtype=bool)
        elif node.kind == "batchnorm" and node.id in plan.masks:
            masks[node.id] = plan.masks[node.id].astype(bool)
        elif node.kind == "concat":
            blocks = [masks[s] for s in node.inputs]
            for source, block in zip(node.inputs, blocks):
                if not block.any():
                    raise ShapeError(f"pruning would empty the {source} block of concat {node.id}")
            masks[node.id] = np.concatenate(blocks)
        else:
            masks[node.id] = masks[node.inputs[0]]
    return masks


def apply_prune(graph: GraphSpec, params: ParamStore, plan: PrunePlan) -> Tuple[GraphSpec, ParamStore]:
    """
    Remove the planned channels and every weight slice that reads them.

    A dropped channel of batch norm ``b`` removes the matching filter of the
    conv feeding ``b``, the channel's gamma/beta/running stats, and the input
    slice of each conv downstream, reached through ReLU, pooling, up-sampling,
    concatenation (block offsets shift) or a non-prunable batch norm.

    Returns:
        New graph and parameter store; the inputs are left untouched
    """
    check_params(graph, params)
    pairs = prunable_pairs(graph)
    _check_plan(graph, plan, pairs)
    masks = _output_masks(graph, plan, pairs)

    nodes: List[Node] = []
    new_params: ParamStore = {}
    for node in graph.nodes:
        attrs = dict(node.attrs)
        out_mask = masks[node.id]
        if node.kind in CONV_KINDS:
            in_mask = masks[node.inputs[0]]
            attrs["in_channels"] = int(in_mask.sum())
            attrs["out_channels"] = int(out_mask.sum())
            new_params[f"{node.id}.weight"] = params[f"{node.id}.weight"][out_mask][:, in_mask].copy()
            new_params[f"{node.id}.bias"] = params[f"{node.id}.bias"][out_mask].copy()
        elif node.kind == "batchnorm":
            attrs["channels"] = int(out_mask.sum())
            for f in BN_TRAINABLE + BN_BUFFERS:
                new_params[f"{node.id}.{f}"] = params[f"{node.id}.{f}"][out_mask].copy()
        nodes.append(Node(node.id, node.kind, node.inputs, attrs))

    pruned = GraphSpec(nodes=nodes, outputs=list(graph.outputs), input_channels=graph.input_channels,
                       input_size=graph.input_size, num_classes=graph.num_classes, priors=graph.priors)
    infer_shapes(pruned)
    check_params(pruned, new_params)
    return pruned, new_params


def count_params(graph: GraphSpec, params: Optional[ParamStore] = None) -> ParamReport:
    """Closed-form counts: conv Cout*Cin*K^2 + Cout, batch norm 2*C (plus 2*C buffers)."""
    if params is not None:
        check_params(graph, params)
    per_node, kinds = {}, {}
    buffers = 0
    for node in graph.nodes:
        a = node.attrs
        if node.kind in CONV_KINDS:
            k = a["kernel"]
            per_node[node.id] = a["out_channels"] * a["in_channels"] * k * k + a["out_channels"]
        elif node.kind == "batchnorm":
            per_node[node.id] = 2 * a["channels"]
            buffers += 2 * a["channels"]
        else:
            continue
        kinds[node.id] = node.kind
    trainable = sum(per_node.values())
    byte_size = (trainable + buffers) * ELEMENT_BYTES + len(graph.canonical_json())
    return ParamReport(per_node=per_node, kinds=kinds, buffers=buffers, byte_size=byte_size)


def prune_report(plan: PrunePlan, before: ParamReport, after: ParamReport) -> Dict[str, Any]:
    """Structured summary of one prune: ratios, threshold, per-node counts and reductions."""
    report = plan.to_dict()
    report["before"] = before.to_dict()
    report["after"] = after.to_dict()
    report["param_reduction_pct"] = 100.0 * (1.0 - after.trainable / before.trainable)
    report["byte_reduction_pct"] = 100.0 * (1.0 - after.byte_size / before.byte_size)
    return report


def ratio_for_reduction(graph: GraphSpec, params: ParamStore, target_pct: float) -> float:
    """
    Smallest single-pass channel ratio whose prune removes at least ``target_pct``
    percent of the trainable parameters.

    Searches over whole drop counts; the returned ratio sits half a channel
    above the count so plan_prune's floor lands on it.
    """
    if not 0.0 < target_pct < 100.0:
        raise ConfigError(f"target reduction must lie in (0, 100) percent, got {target_pct}")
    total = sum(graph.node(b).attrs["channels"] for b in prunable_pairs(graph))
    before = count_params(graph, params).trainable

    def reduction(drop: int) -> float:
        pruned, _ = apply_prune(graph, params, plan_prune(graph, params, (drop + 0.5) / total))
        return 100.0 * (1.0 - count_params(pruned).trainable / before)

    lo, hi = 1, total - 1
    if hi < lo or reduction(hi) < target_pct:
        raise ConfigError(f"no prune ratio removes {target_pct:g}% of the parameters")
    while lo < hi:
        mid = (lo + hi) // 2
        if reduction(mid) >= target_pct:
            hi = mid
        else:
            lo = mid + 1
    return (lo + 0.5) / total


def per_pass_ratio(ratio: float, iterations: int) -> float:
    """Ratio that removes ``ratio`` of the channels when applied ``iterations`` times."""
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    return 1.0 - (1.0 - ratio) ** (1.0 / iterations)


def iterative_prune(
    graph: GraphSpec, params: ParamStore, ratio: float, iterations: int = 1
) -> Tuple[GraphSpec, ParamStore, List[PrunePlan]]:
    """Repeated plan/apply passes whose compound ratio is ``ratio``."""
    step_ratio = per_pass_ratio(ratio, iterations)
    plans = []
    for _ in range(iterations):
        plan = plan_prune(graph, params, step_ratio)
        graph, params = apply_prune(graph, params, plan)
        plans.append(plan)
    return graph, params, plans


def finetune(
    trainer: Trainer,
    graph: GraphSpec,
    params: ParamStore,
    dataset,
    train_config: TrainConfig,
    lr_scale: float = 0.1,
    log_path: Optional[str] = None,
) -> TrainResult:
    """Retrain a pruned model without the sparsity term and at a reduced learning rate."""
    infer_shapes(graph)
    config = replace(train_config, sparsity_lambda=0.0, base_lr=train_config.base_lr * lr_scale)
    trainer.logger.info(f"Fine-tuning at base_lr {config.base_lr:g}")
    return trainer.train(graph, params, dataset, config, log_path=log_path)
