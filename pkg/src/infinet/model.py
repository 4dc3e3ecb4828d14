"""InfiBlock, the four-stage InfiNet family and the eight-block demo network."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter
from .interaction import (BranchStack, InteractionKind, Rbf, interact, kind_from_params,
                          kind_params)
from .nn import (DepthwiseConv, LayerNormLayer, LinearLayer, MlpLayer, Module, StridedConv,
                 dwconv_group_forward, global_avg_pool, load_tensors, save_tensors)
from .tensor import Tensor, full


@dataclass(frozen=True)
class BlockConfig:
    channels: int = 64
    r: int = 7
    kind: InteractionKind = field(default_factory=Rbf)
    mlp_ratio: float = 4.0
    kernel_size: int = 7
    layer_scale: float | None = 1e-6  # per-channel residual gain init; None disables it

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"branch count r must be >= 1, got {self.r}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")


class InfiBlock(Module):
    """LN -> two projected r-branch depthwise groups -> interaction (+ bypass conv) -> LN -> MLP, residual.

    The interaction branches (projections and their depthwise convs) use a
    fan-in scaled init so branch activations start at O(1), the scale where a
    unit-bandwidth RBF has usable gradients; everything else uses std 0.02.
    The MLP output is scaled per channel by ``layer_scale`` before the residual.
    """

    def __init__(self, config: BlockConfig, rng=None, dtype=np.float64):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        C, K = config.channels, config.kernel_size
        self.norm1 = LayerNormLayer(C, dtype=dtype)
        self.proj_a = LinearLayer(C, C, rng, dtype, std=C ** -0.5)
        self.proj_b = LinearLayer(C, C, rng, dtype, std=C ** -0.5)
        self.branch_convs_a = [DepthwiseConv(C, K, rng, dtype, std=1.0 / K) for _ in range(config.r)]
        self.branch_convs_b = [DepthwiseConv(C, K, rng, dtype, std=1.0 / K) for _ in range(config.r)]
        self.conv_c = DepthwiseConv(C, K, rng, dtype)
        self.norm2 = LayerNormLayer(C, dtype=dtype)
        self.mlp = MlpLayer(C, config.mlp_ratio, rng, dtype)
        self.layer_scale = (None if config.layer_scale is None
                            else Parameter(full((C,), config.layer_scale, dtype), decay=False))
        self.kind = config.kind
        self.config = config

    def forward(self, x: Node) -> Node:
        return infiblock_forward(self, x)


def infiblock_forward(block: InfiBlock, x: Node) -> Node:
    C = block.config.channels
    if x.shape[-1] != C:
        raise ValueError(f"block expects {C} channels, got {x.shape[-1]}")
    xh = block.norm1(x)
    za = BranchStack(ag.relu(dwconv_group_forward(block.branch_convs_a, block.proj_a(xh))))
    zb = BranchStack(ag.relu(dwconv_group_forward(block.branch_convs_b, block.proj_b(xh))))
    zc = block.conv_c(xh)
    mixed = interact(za, zb, block.kind) + zc
    out = block.mlp(block.norm2(mixed))
    if block.layer_scale is not None:
        out = out * block.layer_scale
    return out + x


# ---------------------------------------------------------------------------
# hierarchical family

@dataclass(frozen=True)
class ModelConfig:
    variant: str
    channels: int
    depths: tuple[int, ...]
    num_classes: int = 1000
    block: BlockConfig = field(default_factory=BlockConfig)
    stem_size: int = 4
    input_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if len(self.depths) != 4:
            raise ValueError(f"InfiNet has 4 stages, got depths {self.depths}")
        if any(d < 1 for d in self.depths):
            raise ValueError(f"stage depths must be >= 1, got {self.depths}")
        if self.channels < 1 or self.num_classes < 1:
            raise ValueError("channels and num_classes must be >= 1")

    @property
    def stage_channels(self) -> list[int]:
        return [self.channels * m for m in (1, 2, 4, 8)]

    def with_kind(self, kind: InteractionKind) -> "ModelConfig":
        return replace(self, block=replace(self.block, kind=kind))


def _variant(name, C, depths, num_classes=1000, stem=4, size=224):
    return ModelConfig(name, C, depths, num_classes, BlockConfig(C), stem, size)


VARIANTS: dict[str, ModelConfig] = {
    "tiny": _variant("tiny", 64, (2, 2, 18, 2)),
    "small": _variant("small", 96, (2, 2, 18, 2)),
    "base": _variant("base", 128, (2, 2, 18, 2)),
    "large": _variant("large", 128, (3, 3, 27, 3)),
    "xlarge": _variant("xlarge", 192, (3, 3, 27, 3)),
    # desk-scale configs
    "test": _variant("test", 8, (1, 1, 1, 1), 10, 4, 32),
    "micro": _variant("micro", 4, (1, 1, 1, 1), 10, 2, 16),
}
ALIASES = {"t": "tiny", "s": "small", "b": "base", "l": "large", "xl": "xlarge"}
FAMILY = ("tiny", "small", "base", "large", "xlarge")


def get_variant(name: str, **overrides) -> ModelConfig:
    key = ALIASES.get(name.lower(), name.lower())
    if key not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    cfg = VARIANTS[key]
    block_fields = {k: overrides.pop(k) for k in ("r", "kind", "mlp_ratio") if k in overrides}
    if block_fields:
        cfg = replace(cfg, block=replace(cfg.block, **block_fields))
    return replace(cfg, **overrides)


class InfiNet(Module):
    """stem -> 4 stages of InfiBlocks joined by 2x2 downsampling -> GAP -> LN -> linear head."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        chans = config.stage_channels
        s = config.stem_size
        self.stem = StridedConv(3, chans[0], s, s, rng, dtype)
        self.stem_norm = LayerNormLayer(chans[0], dtype=dtype)
        self.stages = []
        self.downsamples = []
        for i, (C, depth) in enumerate(zip(chans, config.depths)):
            if i > 0:
                self.downsamples.append([LayerNormLayer(chans[i - 1], dtype=dtype),
                                         StridedConv(chans[i - 1], C, 2, 2, rng, dtype)])
            bc = replace(config.block, channels=C)
            self.stages.append([InfiBlock(bc, rng, dtype) for _ in range(depth)])
        self.head_norm = LayerNormLayer(chans[-1], dtype=dtype)
        self.head = LinearLayer(chans[-1], config.num_classes, rng, dtype)
        self.config = config
        self.dtype = np.dtype(dtype)

    def forward(self, x: Node) -> Node:
        x = self.stem_norm(self.stem(x))
        for i, blocks in enumerate(self.stages):
            if i > 0:
                norm, down = self.downsamples[i - 1]
                x = down(norm(x))
            for blk in blocks:
                x = blk(x)
        return self.head(self.head_norm(global_avg_pool(x)))

    def stage_param_counts(self) -> dict[str, int]:
        out = {"stem": self.stem.num_params() + self.stem_norm.num_params()}
        for i, blocks in enumerate(self.stages):
            n = sum(b.num_params() for b in blocks)
            if i > 0:
                n += sum(m.num_params() for m in self.downsamples[i - 1])
            out[f"stage{i + 1}"] = n
        out["head"] = self.head_norm.num_params() + self.head.num_params()
        return out


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float64) -> InfiNet:
    return InfiNet(config, seed, dtype)


def block_param_count(block: BlockConfig) -> int:
    C, K, r = block.channels, block.kernel_size, block.r
    hidden = int(round(C * block.mlp_ratio))
    dw = K * K * C + C
    return (2 * C                     # norm1
            + 2 * (C * C + C)         # proj_a, proj_b
            + (2 * r + 1) * dw        # branch convs + bypass conv
            + 2 * C                   # norm2
            + C * hidden + hidden + hidden * C + C
            + (C if block.layer_scale is not None else 0))


def count_parameters(config: ModelConfig) -> dict[str, int]:
    """Per-part parameter counts computed from the config alone (no allocation)."""
    chans = config.stage_channels
    s = config.stem_size
    out = {"stem": s * s * 3 * chans[0] + chans[0] + 2 * chans[0]}
    for i, (C, depth) in enumerate(zip(chans, config.depths)):
        n = depth * block_param_count(replace(config.block, channels=C))
        if i > 0:
            n += 2 * chans[i - 1] + 4 * chans[i - 1] * C + C
        out[f"stage{i + 1}"] = n
    out["head"] = 2 * chans[-1] + chans[-1] * config.num_classes + config.num_classes
    out["total"] = sum(out.values())
    return out


# ---------------------------------------------------------------------------
# demo network

DEMO_BLOCKS = 8
DEMO_WIDTH = 64


class DemoNet(Module):
    """Stem to a fixed width, eight same-width InfiBlocks, then GAP -> LN -> linear."""

    def __init__(self, kind: InteractionKind, num_classes: int = 10, width: int = DEMO_WIDTH,
                 depth: int = DEMO_BLOCKS, r: int = 7, mlp_ratio: float = 4.0, stem_size: int = 4,
                 seed: int = 0, dtype=np.float64, layer_scale: float | None = 1e-6):
        rng = np.random.default_rng(seed)
        self.stem = StridedConv(3, width, stem_size, stem_size, rng, dtype)
        self.stem_norm = LayerNormLayer(width, dtype=dtype)
        bc = BlockConfig(width, r, kind, mlp_ratio, layer_scale=layer_scale)
        self.blocks = [InfiBlock(bc, rng, dtype) for _ in range(depth)]
        self.head_norm = LayerNormLayer(width, dtype=dtype)
        self.head = LinearLayer(width, num_classes, rng, dtype)
        self.kind = kind
        self.config = dict(width=width, depth=depth, r=r, mlp_ratio=mlp_ratio, stem_size=stem_size,
                           num_classes=num_classes, layer_scale=layer_scale)
        self.dtype = np.dtype(dtype)

    def forward(self, x: Node) -> Node:
        x = self.stem_norm(self.stem(x))
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.head_norm(global_avg_pool(x)))


def build_demo_net(kind: InteractionKind, num_classes: int = 10, seed: int = 0, dtype=np.float64,
                   **kwargs) -> DemoNet:
    return DemoNet(kind, num_classes, seed=seed, dtype=dtype, **kwargs)


# ---------------------------------------------------------------------------
# checkpoints: INFN tensors + JSON sidecar

def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def model_metadata(model: Module) -> dict:
    if isinstance(model, InfiNet):
        cfg = model.config
        kind = cfg.block.kind
        return {"variant": cfg.variant, "C": cfg.channels, "depths": list(cfg.depths), "r": cfg.block.r,
                "kind": kind.name, "sigma_or_c_d": kind_params(kind), "mlp_ratio": cfg.block.mlp_ratio,
                "num_classes": cfg.num_classes, "stem_size": cfg.stem_size, "input_size": cfg.input_size,
                "layer_scale": cfg.block.layer_scale}
    if isinstance(model, DemoNet):
        c = model.config
        return {"variant": "demo", "C": c["width"], "depths": [c["depth"]], "r": c["r"],
                "kind": model.kind.name, "sigma_or_c_d": kind_params(model.kind),
                "mlp_ratio": c["mlp_ratio"], "num_classes": c["num_classes"], "stem_size": c["stem_size"],
                "layer_scale": c["layer_scale"]}
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model: Module, path):
    path = Path(path)
    save_tensors(path, model.state_dict())
    meta = model_metadata(model)
    meta["precision"] = "f32" if model.dtype == np.float32 else "f64"
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def model_from_metadata(meta: dict, dtype=None) -> Module:
    kind = kind_from_params(meta["kind"], meta.get("sigma_or_c_d", {}))
    if dtype is None:
        dtype = np.float32 if meta.get("precision") == "f32" else np.float64
    if meta["variant"] == "demo":
        return DemoNet(kind, meta["num_classes"], width=meta["C"], depth=meta["depths"][0], r=meta["r"],
                       mlp_ratio=meta["mlp_ratio"], stem_size=meta.get("stem_size", 4), dtype=dtype,
                       layer_scale=meta.get("layer_scale"))
    cfg = ModelConfig(meta["variant"], meta["C"], tuple(meta["depths"]), meta["num_classes"],
                      BlockConfig(meta["C"], meta["r"], kind, meta["mlp_ratio"], layer_scale=meta.get("layer_scale")),
                      meta.get("stem_size", 4), meta.get("input_size", 224))
    return InfiNet(cfg, dtype=dtype)


def load_checkpoint(path, dtype=None) -> Module:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    model = model_from_metadata(meta, dtype)
    model.load_state_dict(load_tensors(path))
    return model


def predict_logits(model: Module, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward ``(N, H, W, 3)`` images without recording a graph."""
    outs = []
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            x = Node(Tensor(images[i:i + batch_size], dtype=model.dtype))
            outs.append(model(x).data)
    return np.concatenate(outs) if outs else np.zeros((0, 0))

