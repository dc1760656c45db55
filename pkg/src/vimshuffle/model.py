"""Non-hierarchical Vim encoder: patch embed, stacked Mamba blocks, head.

Every block is wrapped in the layer-wise shuffle machinery; with no schedule
(or training=False) the wrapping is a strict no-op so the same weights give
bitwise-identical inference either way.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import rng
from . import tensor as T
from .slws import ShuffleSchedule, slws_layer_forward
from .ssm import init_mamba_layer
from .tensor import Tensor, broadcast_to, concat, index_rows, layer_norm, matmul, narrow

DIRECTION_MODES = ("forward", "bidirectional")


@dataclass
class VimConfig:
    depth: int = 6
    width: int = 64
    state_size: int = 8
    patch_size: int = 4
    image_size: int = 32
    num_classes: int = 10
    cls_token: bool = True
    drop_path: float = 0.0
    direction: str = "bidirectional"
    expand: int = 2
    dt_rank: int = 0  # 0 means ceil(expand*width / 16)
    conv_width: int = 4
    euler: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.direction not in DIRECTION_MODES:
            raise ValueError(f"direction must be one of {DIRECTION_MODES}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.patch_tokens + (1 if self.cls_token else 0)

    @property
    def inner_width(self) -> int:
        return self.expand * self.width

    @property
    def dt_rank_effective(self) -> int:
        return self.dt_rank if self.dt_rank > 0 else max(1, -(-self.inner_width // 16))


@dataclass
class VimParams:
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    cls: Tensor | None
    layers: list
    norm_gamma: Tensor
    norm_beta: Tensor
    head_w: Tensor
    head_b: Tensor


def init_vim_params(config: VimConfig, seed: int, dtype=np.float32) -> VimParams:
    gen = rng.stream(seed, rng.TAG_INIT, 0, 0).gen
    d = config.width
    patch_dim = config.patch_size * config.patch_size * 3
    layers = []
    for i in range(config.depth):
        layers.append(init_mamba_layer(
            d_model=d, expand=config.expand, n_state=config.state_size,
            conv_width=config.conv_width, dt_rank=config.dt_rank_effective,
            bidirectional=(config.direction == "bidirectional"),
            stream=rng.stream(seed, rng.TAG_INIT, 0, i + 1),
            dtype=dtype, euler=config.euler))
    return VimParams(
        patch_w=T.parameter(gen.normal(0.0, patch_dim ** -0.5, size=(patch_dim, d)), dtype),
        patch_b=T.parameter(np.zeros(d), dtype),
        pos=T.parameter(gen.normal(0.0, 0.02, size=(config.patch_tokens, d)), dtype),
        cls=T.parameter(gen.normal(0.0, 0.02, size=(1, 1, d)), dtype) if config.cls_token else None,
        layers=layers,
        norm_gamma=T.parameter(np.ones(d), dtype),
        norm_beta=T.parameter(np.zeros(d), dtype),
        head_w=T.parameter(gen.normal(0.0, 0.02, size=(d, config.num_classes)), dtype),
        head_b=T.parameter(np.zeros(config.num_classes), dtype),
    )


def named_parameters(obj, prefix: str = "") -> dict:
    """Flatten nested params dataclasses into an ordered {name: Tensor} dict."""
    out: dict[str, Tensor] = {}

    def walk(node, path):
        if node is None:
            return
        if isinstance(node, Tensor):
            if node.requires_grad:
                out[path] = node
            return
        if dataclasses.is_dataclass(node):
            for f in dataclasses.fields(node):
                value = getattr(node, f.name)
                if isinstance(value, (Tensor, list)) or dataclasses.is_dataclass(value):
                    walk(value, f"{path}.{f.name}" if path else f.name)
            return
        if isinstance(node, list):
            for i, item in enumerate(node):
                walk(item, f"{path}.{i}")

    walk(obj, prefix)
    return out


def patchify(images: Tensor, patch: int) -> Tensor:
    b, h, w, ch = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape((b, gh, patch, gw, patch, ch))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((b, gh * gw, patch * patch * ch))


def _as_image_tensor(images, config: VimConfig) -> Tensor:
    t = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    if t.ndim != 4 or t.shape[3] != 3:
        raise ValueError(f"expected images [B,H,W,3], got {t.shape}")
    if t.shape[1] % config.patch_size or t.shape[2] % config.patch_size:
        raise ValueError(
            f"image dims {t.shape[1]}x{t.shape[2]} not divisible by patch {config.patch_size}")
    return t


def vim_encode(config: VimConfig, params: VimParams, images, training: bool = False,
               schedule: ShuffleSchedule | None = None, seed: int = 0, step: int = 0,
               visible=None, forced_decisions=None) -> Tensor:
    """Token features after the final norm; [B, T, D].

    ``visible`` restricts the patch tokens to an index subset before the
    layer stack (masked pre-training encodes only what the mask left).
    """
    images = _as_image_tensor(images, config)
    x = matmul(patchify(images, config.patch_size), params.patch_w) + params.patch_b
    x = x + params.pos
    if visible is not None:
        x = index_rows(x, np.asarray(visible, dtype=np.int64))
    if params.cls is not None:
        cls_tok = broadcast_to(params.cls, (x.shape[0], 1, config.width))
        x = concat([cls_tok, x], axis=1)
    for i, layer in enumerate(params.layers):
        shuffle_stream = None
        if training and schedule is not None:
            shuffle_stream = rng.stream(seed, rng.TAG_SHUFFLE, step, i)
        dp_stream = None
        if training and config.drop_path > 0:
            dp_stream = rng.stream(seed, rng.TAG_DROP_PATH, step, i)
        forced = forced_decisions[i] if forced_decisions is not None else None
        x = slws_layer_forward(layer, x, schedule, i, training, shuffle_stream,
                               drop_path_rate=config.drop_path,
                               drop_path_stream=dp_stream, decision=forced)
    return layer_norm(x, params.norm_gamma, params.norm_beta)


def vim_forward(config: VimConfig, params: VimParams, images, training: bool = False,
                schedule: ShuffleSchedule | None = None, seed: int = 0, step: int = 0) -> Tensor:
    """Class logits [B, num_classes] from the [CLS] position."""
    feats = vim_encode(config, params, images, training=training, schedule=schedule,
                       seed=seed, step=step)
    if config.cls_token:
        pooled = narrow(feats, 1, 0, 1).reshape((feats.shape[0], config.width))
    else:
        pooled = feats.mean(axis=1)
    return matmul(pooled, params.head_w) + params.head_b


@dataclass
class VimModel:
    """Config + params bundle with the forward entry points as methods."""

    config: VimConfig
    params: VimParams

    @classmethod
    def create(cls, config: VimConfig, seed: int = 0, dtype=np.float32) -> "VimModel":
        return cls(config=config, params=init_vim_params(config, seed, dtype))

    def forward(self, images, **kw) -> Tensor:
        return vim_forward(self.config, self.params, images, **kw)

    def encode(self, images, **kw) -> Tensor:
        return vim_encode(self.config, self.params, images, **kw)

    def named_parameters(self) -> dict:
        return named_parameters(self.params)
