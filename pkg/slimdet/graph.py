"""
Layer graph shared by the detector builder, the trainer and the pruner.

A ``GraphSpec`` is an ordered list of typed nodes. Node ``INPUT`` is the image
batch; every other node lists the ids it consumes, and all of those precede
it. Parameters are kept outside the graph in a flat ``ParamStore``
(``"<node id>.<field>"`` -> numpy array) so that pruning can build a new graph
and a new store without touching the originals.
"""
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from slimdet.config import PriorConfig
from slimdet.errors import ShapeError
from slimdet.layers import (BatchNormParams, Conv2dParams, batchnorm_forward_eval,
                            batchnorm_forward_train, conv_forward, init_batchnorm_arrays,
                            init_conv_arrays)
from slimdet.tensor import Tensor, concat_channels, maxpool2d, relu, upsample_bilinear

INPUT = "input"
CONV_KINDS = ("conv", "head_loc", "head_conf")
NODE_KINDS = ("conv", "batchnorm", "relu", "maxpool", "upsample", "concat", "head_loc", "head_conf")
CONV_FIELDS = ("weight", "bias")
BN_TRAINABLE = ("gamma", "beta")
BN_BUFFERS = ("running_mean", "running_var")

ParamStore = Dict[str, np.ndarray]
Shape = Tuple[int, int, int]


@dataclass
class Node:
    id: str
    kind: str
    inputs: Tuple[str, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "kind": self.kind, "inputs": list(self.inputs), "attrs": dict(self.attrs)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Node":
        return cls(id=data["id"], kind=data["kind"], inputs=tuple(data["inputs"]), attrs=dict(data["attrs"]))


@dataclass
class GraphSpec:
    """Detector topology: typed nodes in evaluation order plus head ids."""

    nodes: List[Node]
    outputs: List[str]
    input_channels: int
    input_size: int
    num_classes: int
    priors: PriorConfig

    def __post_init__(self):
        self._index = {node.id: node for node in self.nodes}
        self.validate_topology()

    def node(self, node_id: str) -> Node:
        return self._index[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def consumers(self, node_id: str) -> List[Node]:
        return [node for node in self.nodes if node_id in node.inputs]

    def head_pairs(self) -> List[Tuple[str, str]]:
        """(head_loc id, head_conf id) per detection level, finest first."""
        pairs = []
        for k in range(0, len(self.outputs), 2):
            pairs.append((self.outputs[k], self.outputs[k + 1]))
        return pairs

    def validate_topology(self) -> None:
        seen = {INPUT}
        for node in self.nodes:
            if node.kind not in NODE_KINDS:
                raise ShapeError(f"node {node.id}: unknown kind '{node.kind}'")
            if node.id in seen:
                raise ShapeError(f"duplicate node id {node.id}")
            for source in node.inputs:
                if source not in seen:
                    raise ShapeError(f"node {node.id} consumes {source}, which does not precede it")
            if node.kind != "concat" and len(node.inputs) != 1:
                raise ShapeError(f"node {node.id} ({node.kind}) must have exactly one input")
            seen.add(node.id)
        if len(self.outputs) % 2:
            raise ShapeError("graph outputs must come in (head_loc, head_conf) pairs")
        for k, output in enumerate(self.outputs):
            expected = "head_loc" if k % 2 == 0 else "head_conf"
            if output not in self._index or self._index[output].kind != expected:
                raise ShapeError(f"graph output {output} must be a {expected} node")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "priors": {
                "feature_maps": list(self.priors.feature_maps),
                "priors_per_cell": list(self.priors.priors_per_cell),
                "min_scale": self.priors.min_scale,
                "max_scale": self.priors.max_scale,
                "aspect_ratios": [list(r) for r in self.priors.aspect_ratios],
            },
            "nodes": [node.to_dict() for node in self.nodes],
            "outputs": list(self.outputs),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GraphSpec":
        return cls(
            nodes=[Node.from_dict(n) for n in data["nodes"]],
            outputs=list(data["outputs"]),
            input_channels=int(data["input_channels"]),
            input_size=int(data["input_size"]),
            num_classes=int(data["num_classes"]),
            priors=PriorConfig(**data["priors"]).validate(),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Parameter naming
# ---------------------------------------------------------------------------

def param_fields(node: Node) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
    """(trainable field names, buffer field names) of a node."""
    if node.kind in CONV_KINDS:
        return CONV_FIELDS, ()
    if node.kind == "batchnorm":
        return BN_TRAINABLE, BN_BUFFERS
    return (), ()


def param_names(graph: GraphSpec, include_buffers: bool = True) -> List[str]:
    names = []
    for node in graph.nodes:
        trainable, buffers = param_fields(node)
        names.extend(f"{node.id}.{f}" for f in trainable)
        if include_buffers:
            names.extend(f"{node.id}.{f}" for f in buffers)
    return names


def is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BN_BUFFERS


def is_bn_param(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BN_TRAINABLE


def expected_param_shapes(node: Node) -> Dict[str, Tuple[int, ...]]:
    a = node.attrs
    if node.kind in CONV_KINDS:
        k = a["kernel"]
        return {"weight": (a["out_channels"], a["in_channels"], k, k), "bias": (a["out_channels"],)}
    if node.kind == "batchnorm":
        return {f: (a["channels"],) for f in BN_TRAINABLE + BN_BUFFERS}
    return {}


def check_params(graph: GraphSpec, params: ParamStore) -> None:
    """Every parameter the graph names exists with the shape its node declares."""
    expected = set()
    for node in graph.nodes:
        for f, shape in expected_param_shapes(node).items():
            name = f"{node.id}.{f}"
            expected.add(name)
            if name not in params:
                raise ShapeError(f"missing parameter {name}")
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"parameter {name} has shape {params[name].shape}, node declares {shape}")
    extra = sorted(set(params) - expected)
    if extra:
        raise ShapeError(f"parameter {extra[0]} belongs to no node")


def init_params(graph: GraphSpec, seed: int, dtype=np.float32) -> ParamStore:
    """Seeded initial parameters for every conv and batch-norm node, in graph order."""
    rng = np.random.default_rng(seed)
    params: ParamStore = {}
    for node in graph.nodes:
        a = node.attrs
        if node.kind in CONV_KINDS:
            arrays = init_conv_arrays(a["in_channels"], a["out_channels"], a["kernel"], rng, dtype)
        elif node.kind == "batchnorm":
            arrays = init_batchnorm_arrays(a["channels"], dtype)
        else:
            continue
        for f, value in arrays.items():
            params[f"{node.id}.{f}"] = value
    return params


# ---------------------------------------------------------------------------
# Shape propagation
# ---------------------------------------------------------------------------

def infer_shapes(graph: GraphSpec) -> Dict[str, Shape]:
    """
    Propagate (C, H, W) through the whole graph.

    Raises ShapeError at the first node whose declared channels or spatial
    extents disagree with what its inputs produce.
    """
    shapes: Dict[str, Shape] = {INPUT: (graph.input_channels, graph.input_size, graph.input_size)}
    for node in graph.nodes:
        a = node.attrs
        if node.kind == "concat":
            sources = [shapes[s] for s in node.inputs]
            spatial = {s[1:] for s in sources}
            if len(spatial) != 1:
                raise ShapeError(f"concat {node.id} joins different spatial sizes {sorted(spatial)}")
            if any(s[0] < 1 for s in sources):
                raise ShapeError(f"concat {node.id} has an empty channel block")
            shapes[node.id] = (sum(s[0] for s in sources),) + sources[0][1:]
            continue
        c, h, w = shapes[node.inputs[0]]
        if node.kind in CONV_KINDS:
            if a["in_channels"] != c:
                raise ShapeError(f"conv {node.id} declares Cin={a['in_channels']} but receives {c} channels")
            k, s, p = a["kernel"], a["stride"], a["pad"]
            if (h + 2 * p - k) % s or (w + 2 * p - k) % s or h + 2 * p < k:
                raise ShapeError(f"conv {node.id} has non-integral output for {h}x{w}")
            shapes[node.id] = (a["out_channels"], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif node.kind == "batchnorm":
            if a["channels"] != c:
                raise ShapeError(f"batchnorm {node.id} declares C={a['channels']} but receives {c} channels")
            shapes[node.id] = (c, h, w)
        elif node.kind == "relu":
            shapes[node.id] = (c, h, w)
        elif node.kind == "maxpool":
            k, s = a["kernel"], a["stride"]
            if (h - k) % s or (w - k) % s or h < k:
                raise ShapeError(f"maxpool {node.id} has non-integral output for {h}x{w}")
            shapes[node.id] = (c, (h - k) // s + 1, (w - k) // s + 1)
        elif node.kind == "upsample":
            if a["out_h"] < h or a["out_w"] < w:
                raise ShapeError(f"upsample {node.id} cannot shrink {h}x{w}")
            shapes[node.id] = (c, a["out_h"], a["out_w"])
    return shapes


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def make_leaves(graph: GraphSpec, params: ParamStore, requires_grad: bool, dtype=None) -> Dict[str, Tensor]:
    """Wrap trainable arrays as tape leaves."""
    leaves = {}
    for name in param_names(graph, include_buffers=False):
        value = params[name]
        leaves[name] = Tensor(value, dtype=dtype or value.dtype, requires_grad=requires_grad)
    return leaves


def run_graph(
    graph: GraphSpec,
    params: ParamStore,
    x: Tensor,
    train: bool = False,
    leaves: Optional[Dict[str, Tensor]] = None,
    buffers_out: Optional[ParamStore] = None,
    keep: Sequence[str] = (),
) -> Dict[str, Tensor]:
    """
    Evaluate every node in order.

    Args:
        graph: Topology
        params: Parameter store (buffers are read from here)
        x: Input batch [N, C, H, W]
        train: Batch statistics for batch norm when True
        leaves: Tensors to use for trainable parameters (for gradients)
        buffers_out: Receives updated running statistics in training mode
        keep: Extra node ids whose values should be returned besides the heads

    Returns:
        Mapping from node id to value for the graph outputs and ``keep``
    """
    if x.ndim != 4 or x.shape[1:] != (graph.input_channels, graph.input_size, graph.input_size):
        raise ShapeError(
            f"input must be [N, {graph.input_channels}, {graph.input_size}, {graph.input_size}], got {x.shape}")
    if leaves is None:
        leaves = make_leaves(graph, params, requires_grad=False)
    wanted = set(graph.outputs) | set(keep)
    last_use = {}
    for position, node in enumerate(graph.nodes):
        for source in node.inputs:
            last_use[source] = position

    values: Dict[str, Tensor] = {INPUT: x}
    results: Dict[str, Tensor] = {}
    for position, node in enumerate(graph.nodes):
        a = node.attrs
        args = [values[s] for s in node.inputs]
        if node.kind in CONV_KINDS:
            conv = Conv2dParams(leaves[f"{node.id}.weight"], leaves[f"{node.id}.bias"], a["stride"], a["pad"])
            out = conv_forward(args[0], conv)
        elif node.kind == "batchnorm":
            bn = BatchNormParams(
                gamma=leaves[f"{node.id}.gamma"], beta=leaves[f"{node.id}.beta"],
                running_mean=Tensor(params[f"{node.id}.running_mean"]),
                running_var=Tensor(params[f"{node.id}.running_var"]),
                eps=a.get("eps", 1e-5), momentum=a.get("momentum", 0.1))
            if train:
                out = batchnorm_forward_train(args[0], bn)
                if buffers_out is not None:
                    buffers_out[f"{node.id}.running_mean"] = bn.running_mean.data
                    buffers_out[f"{node.id}.running_var"] = bn.running_var.data
            else:
                out = batchnorm_forward_eval(args[0], bn)
        elif node.kind == "relu":
            out = relu(args[0])
        elif node.kind == "maxpool":
            out = maxpool2d(args[0], a["kernel"], a["stride"])
        elif node.kind == "upsample":
            out = upsample_bilinear(args[0], a["out_h"], a["out_w"])
        else:
            out = concat_channels(args)
        values[node.id] = out
        if node.id in wanted:
            results[node.id] = out
        for source in node.inputs:
            if last_use.get(source) == position and source not in wanted:
                values.pop(source, None)
    return results
