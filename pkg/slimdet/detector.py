"""
Toy-scale feature-fusion single-shot detector.

Topology built by ``build_mfssd`` (input S x S, default S = 96)::

    stage A   conv-BN-ReLU x2 @S, pool                -> S/2
    stage B   conv-BN-ReLU @S/2, pool, conv-BN-ReLU    -> S/4   fusion source a
    stage C   pool, conv-BN-ReLU                       -> S/8   fusion source b
    stage D   3x3 conv-BN-ReLU                         -> S/8   fusion source c
    fusion    1x1 projections (2:1:1) of a, up(b), up(c), concat, BN, ReLU -> level 0
    pyramid   conv-BN-ReLU + pool per extra level      -> S/8, S/16, ...
    heads     3x3 loc / conf convs on every level
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from slimdet.config import ArchConfig
from slimdet.errors import ConfigError, ShapeError
from slimdet.graph import (INPUT, GraphSpec, Node, ParamStore, infer_shapes, make_leaves,
                           run_graph)
from slimdet.layers import (BatchNormParams, Conv2dParams, batchnorm_forward_eval,
                            batchnorm_forward_train, conv_forward)
from slimdet.multibox import decode_detections
from slimdet.priors import Detection, generate_priors
from slimdet.tensor import Tensor, concat, concat_channels, no_grad, relu, reshape, transpose, upsample_bilinear


@dataclass
class FusionSpec:
    """Three fused sources, their projection widths and the common target size."""

    sources: Tuple[str, str, str]
    channels: Tuple[int, int, int]
    target_size: Tuple[int, int]

    @property
    def fused_channels(self) -> int:
        return sum(self.channels)

    def blocks(self) -> List[Tuple[int, int]]:
        """[start, stop) channel range of each source inside the fused map."""
        bounds = np.cumsum((0,) + tuple(self.channels))
        return [(int(bounds[k]), int(bounds[k + 1])) for k in range(3)]

    def validate(self) -> "FusionSpec":
        u_a, u_b, u_c = self.channels
        if min(self.channels) < 1:
            raise ConfigError(f"fusion projections must be positive, got {self.channels}")
        if u_b != u_c or u_a != u_b + u_c:
            raise ConfigError(f"fusion projections must be in ratio 2:1:1, got {u_a}:{u_b}:{u_c}")
        return self

    @classmethod
    def from_graph(cls, graph: GraphSpec) -> "FusionSpec":
        concat_node = graph.node("fusion.concat")
        channels, sources = [], []
        for relu_id in concat_node.inputs:
            block = relu_id.rsplit(".", 1)[0]
            channels.append(graph.node(f"{block}.conv").attrs["out_channels"])
            conv_input = graph.node(f"{block}.conv").inputs[0]
            if graph.node(conv_input).kind == "upsample":
                conv_input = graph.node(conv_input).inputs[0]
            sources.append(conv_input)
        shapes = infer_shapes(graph)
        return cls(tuple(sources), tuple(channels), shapes["fusion.concat"][1:])


class _Builder:
    def __init__(self):
        self.nodes: List[Node] = []

    def add(self, node_id: str, kind: str, inputs: Sequence[str], **attrs) -> str:
        self.nodes.append(Node(node_id, kind, tuple(inputs), attrs))
        return node_id

    def conv(self, node_id: str, src: str, cin: int, cout: int, kernel: int = 3, kind: str = "conv") -> str:
        return self.add(node_id, kind, [src], in_channels=int(cin), out_channels=int(cout),
                        kernel=kernel, stride=1, pad=kernel // 2)

    def block(self, prefix: str, src: str, cin: int, cout: int, kernel: int = 3) -> str:
        """conv-BN-ReLU; returns the ReLU id."""
        conv = self.conv(f"{prefix}.conv", src, cin, cout, kernel)
        bn = self.add(f"{prefix}.bn", "batchnorm", [conv], channels=int(cout), eps=1e-5, momentum=0.1)
        return self.add(f"{prefix}.relu", "relu", [bn])

    def pool(self, node_id: str, src: str) -> str:
        return self.add(node_id, "maxpool", [src], kernel=2, stride=2)


def build_mfssd(config: ArchConfig) -> GraphSpec:
    """
    Build the fused-feature detector graph described by ``config``.

    Args:
        config: Input resolution, stage widths, fusion projections, pyramid depth, class count

    Returns:
        GraphSpec whose heads line up with ``config.priors``
    """
    config.validate()
    s = config.input_size
    u_a, u_b, u_c = (int(c) for c in config.fusion)
    b = _Builder()

    x = b.block("stage_a.block1", INPUT, config.in_channels, config.stage_a[0])
    for k in range(1, len(config.stage_a)):
        x = b.block(f"stage_a.block{k + 1}", x, config.stage_a[k - 1], config.stage_a[k])
    x = b.pool("stage_a.pool", x)

    x = b.block("stage_b.block1", x, config.stage_a[-1], config.stage_b[0])
    x = b.pool("stage_b.pool", x)
    source_a = b.block("stage_b.block2", x, config.stage_b[0], config.stage_b[1])

    x = b.pool("stage_c.pool", source_a)
    source_b = b.block("stage_c.block1", x, config.stage_b[1], config.stage_c)
    source_c = b.block("stage_d.block1", source_b, config.stage_c, config.stage_d)

    fusion = FusionSpec((source_a, source_b, source_c), (u_a, u_b, u_c), (s // 4, s // 4)).validate()
    proj_a = b.block("fusion.proj_a", source_a, config.stage_b[1], u_a, kernel=1)
    up_b = b.add("fusion.up_b", "upsample", [source_b], out_h=s // 4, out_w=s // 4)
    proj_b = b.block("fusion.proj_b", up_b, config.stage_c, u_b, kernel=1)
    up_c = b.add("fusion.up_c", "upsample", [source_c], out_h=s // 4, out_w=s // 4)
    proj_c = b.block("fusion.proj_c", up_c, config.stage_d, u_c, kernel=1)
    fused = b.add("fusion.concat", "concat", [proj_a, proj_b, proj_c])
    fused = b.add("fusion.bn", "batchnorm", [fused], channels=fusion.fused_channels, eps=1e-5, momentum=0.1)
    level = b.add("fusion.relu", "relu", [fused])

    levels = [(level, fusion.fused_channels)]
    for k, width in enumerate(config.pyramid, start=1):
        x = b.block(f"pyramid.level{k}", levels[-1][0], levels[-1][1], width)
        levels.append((b.pool(f"pyramid.level{k}.pool", x), int(width)))

    priors = config.priors
    if len(levels) != priors.num_levels:
        raise ConfigError(f"graph has {len(levels)} detection levels, priors describe {priors.num_levels}")
    outputs = []
    for k, ((src, width), n_k) in enumerate(zip(levels, priors.priors_per_cell)):
        outputs.append(b.conv(f"head.level{k}.loc", src, width, n_k * 4, kind="head_loc"))
        outputs.append(b.conv(f"head.level{k}.conf", src, width, n_k * (config.num_classes + 1), kind="head_conf"))

    graph = GraphSpec(nodes=b.nodes, outputs=outputs, input_channels=config.in_channels,
                      input_size=s, num_classes=config.num_classes, priors=priors)
    validate_heads(graph)
    return graph


def validate_heads(graph: GraphSpec) -> None:
    """Head widths and map sizes must agree with the graph's prior layout."""
    shapes = infer_shapes(graph)
    priors = graph.priors
    pairs = graph.head_pairs()
    if len(pairs) != priors.num_levels:
        raise ConfigError(f"graph has {len(pairs)} head pairs, priors describe {priors.num_levels} levels")
    for k, (loc_id, conf_id) in enumerate(pairs):
        n_k, f_k = priors.priors_per_cell[k], priors.feature_maps[k]
        loc, conf = shapes[loc_id], shapes[conf_id]
        if loc[0] != n_k * 4 or conf[0] != n_k * (graph.num_classes + 1):
            raise ConfigError(
                f"level {k} heads have {loc[0]}/{conf[0]} channels, priors need "
                f"{n_k * 4}/{n_k * (graph.num_classes + 1)}")
        if loc[1:] != (f_k, f_k) or conf[1:] != (f_k, f_k):
            raise ConfigError(f"level {k} map is {loc[1]}x{loc[2]}, priors expect {f_k}x{f_k}")


def fuse_features(
    a: Tensor,
    b: Tensor,
    c: Tensor,
    spec: FusionSpec,
    projections: Sequence[Tuple[Conv2dParams, BatchNormParams]],
    norm: BatchNormParams,
    train: bool = False,
) -> Tensor:
    """
    X_f = BN(concat(proj_a(a), proj_b(up(b)), proj_c(up(c)))).

    Args:
        a, b, c: Source maps; ``a`` has the largest spatial size
        spec: Fusion layout (2:1:1 projection widths, target size)
        projections: (conv, batch norm) of the three 1x1 conv-BN-ReLU projections
        norm: Batch norm applied after the concat
        train: Use batch statistics

    Returns:
        Fused map with spec.fused_channels channels at spec.target_size
    """
    spec.validate()
    bn_forward = batchnorm_forward_train if train else batchnorm_forward_eval
    target = tuple(spec.target_size)
    if a.shape[2:] != target:
        raise ShapeError(f"fusion source a is {a.shape[2:]}, target size is {target}")
    blocks = []
    for source, (conv, bn), width in zip((a, b, c), projections, spec.channels):
        if source.shape[2:] != target:
            source = upsample_bilinear(source, *target)
        if source.shape[2:] != target:
            raise ShapeError(f"fusion source resized to {source.shape[2:]}, expected {target}")
        if conv.out_channels != width:
            raise ShapeError(f"projection produces {conv.out_channels} channels, the fusion layout expects {width}")
        blocks.append(relu(bn_forward(conv_forward(source, conv), bn)))
    return bn_forward(concat_channels(blocks), norm)


def assemble_heads(graph: GraphSpec, outputs: Dict[str, Tensor]) -> Tuple[Tensor, Tensor]:
    """Reorder per-level head maps into [N, P, 4] offsets and [N, P, C+1] logits."""
    locs, confs = [], []
    for (loc_id, conf_id), n_k in zip(graph.head_pairs(), graph.priors.priors_per_cell):
        for head, width, bucket in ((outputs[loc_id], 4, locs), (outputs[conf_id], graph.num_classes + 1, confs)):
            n, _, h, w = head.shape
            bucket.append(reshape(transpose(head, (0, 2, 3, 1)), (n, h * w * n_k, width)))
    return concat(locs, axis=1), concat(confs, axis=1)


class Detector:
    """A graph plus its parameters and prior boxes."""

    def __init__(self, graph: GraphSpec, params: ParamStore):
        self.graph = graph
        self.params = params
        self.priors = generate_priors(graph.priors)

    def forward(
        self,
        x: Tensor,
        train: bool = False,
        leaves: Optional[Dict[str, Tensor]] = None,
        buffers_out: Optional[ParamStore] = None,
    ) -> Tuple[Tensor, Tensor]:
        outputs = run_graph(self.graph, self.params, x, train=train, leaves=leaves, buffers_out=buffers_out)
        return assemble_heads(self.graph, outputs)

    def detect(
        self,
        images: np.ndarray,
        score_threshold: float = 0.05,
        nms_iou: float = 0.45,
        top_k: int = 100,
        batch_size: int = 32,
    ) -> List[List[Detection]]:
        """Eval-mode inference over [N, C, H, W] images; results in input order."""
        leaves = make_leaves(self.graph, self.params, requires_grad=False)
        results = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                loc, conf = self.forward(Tensor(images[start:start + batch_size]), leaves=leaves)
                for i in range(loc.shape[0]):
                    results.append(decode_detections(loc.data[i], conf.data[i], self.priors,
                                                     score_threshold, nms_iou, top_k))
        return results
