"""Masked feature distillation pre-training at desk scale.

A frozen teacher encoder tokenizes the full image into per-patch features; the
student encodes only the visible patches (layer-wise shuffle applies to that
visible subsequence), and a small self-attention decoder fills in mask tokens
and regresses the teacher's normalized features under a smooth-L1 loss,
by default on the masked positions only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from . import tensor as T
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import MfdConfig, TrainConfig
from .model import VimConfig, VimModel, named_parameters, vim_encode
from .optim import OptimizerState, adamw_step, cosine_lr
from .slws import ShuffleSchedule
from .tensor import (Tensor, broadcast_to, index_rows, layer_norm, matmul,
                     scatter_rows, silu, softmax, zero_grad)


@dataclass
class MaskSpec:
    total: int
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    def __post_init__(self):
        joined = np.sort(np.concatenate([self.visible, self.masked]))
        if not np.array_equal(joined, np.arange(self.total)):
            raise ValueError("visible and masked sets must partition 0..T-1")


def sample_mask(total: int, ratio: float, stream: rng.Stream,
                cls_visible: bool = False) -> MaskSpec:
    """Uniform random mask of exactly round(ratio*T) positions.

    With cls_visible the position-0 slot is excluded from the maskable pool.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie strictly in (0, 1), got {ratio}")
    if total < 2:
        raise ValueError("need at least 2 tokens to mask")
    n_masked = int(round(ratio * total))
    pool = np.arange(1, total) if cls_visible else np.arange(total)
    if n_masked > pool.size:
        raise ValueError(f"ratio {ratio} masks {n_masked} of {pool.size} maskable tokens")
    masked = np.sort(stream.gen.choice(pool, size=n_masked, replace=False))
    visible = np.setdiff1d(np.arange(total), masked)
    return MaskSpec(total=total, visible=visible, masked=masked, ratio=ratio)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Mean over elements of the Huber-style piecewise loss with knee beta."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if pred.shape != target.shape:
        raise T.ShapeError(f"smooth_l1: shapes {pred.shape} vs {target.shape}")
    diff = pred - target
    dist = diff.abs()
    quad_zone = Tensor((dist.data < beta).astype(pred.dtype))
    quadratic = diff * diff * (0.5 / beta)
    linear = dist - (0.5 * beta)
    return (quad_zone * quadratic + (1.0 - quad_zone) * linear).mean()


# -- frozen teacher ------------------------------------------------------------


def freeze(params) -> None:
    for p in named_parameters(params).values():
        p.requires_grad = False


@dataclass
class TeacherModel:
    """Frozen tokenizer: a small Vim encoder whose outputs are the targets."""

    config: VimConfig
    params: object

    def features(self, images) -> Tensor:
        return vim_encode(self.config, self.params, images, training=False)

    def named(self) -> dict:
        return _all_tensors(self.params)


def _all_tensors(params) -> dict:
    # named_parameters skips frozen tensors by design, so walk with grads on.
    out = {}

    def walk(node, path):
        if node is None:
            return
        if isinstance(node, Tensor):
            out[path] = node
            return
        if dataclasses.is_dataclass(node):
            for f in dataclasses.fields(node):
                v = getattr(node, f.name)
                if isinstance(v, (Tensor, list)) or dataclasses.is_dataclass(v):
                    walk(v, f"{path}.{f.name}" if path else f.name)
            return
        if isinstance(node, list):
            for i, item in enumerate(node):
                walk(item, f"{path}.{i}")

    walk(params, "")
    return out


def teacher_config(mfd: MfdConfig, model: VimConfig) -> VimConfig:
    return VimConfig(depth=mfd.teacher_depth, width=mfd.teacher_width,
                     state_size=mfd.teacher_state_size, patch_size=model.patch_size,
                     image_size=model.image_size, num_classes=model.num_classes,
                     cls_token=False, direction="bidirectional",
                     expand=model.expand)


def create_teacher(mfd: MfdConfig, model: VimConfig) -> TeacherModel:
    cfg = teacher_config(mfd, model)
    m = VimModel.create(cfg, seed=mfd.teacher_seed)
    freeze(m.params)
    return TeacherModel(config=cfg, params=m.params)


def save_teacher(teacher: TeacherModel, path) -> None:
    save_checkpoint(path, {k: p.data for k, p in teacher.named().items()})


def load_teacher(mfd: MfdConfig, model: VimConfig, path) -> TeacherModel:
    teacher = create_teacher(mfd, model)
    load_into(teacher.named(), load_checkpoint(path))
    return teacher


# -- decoder -------------------------------------------------------------------


@dataclass
class DecoderBlockParams:
    norm1_g: Tensor
    norm1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class DecoderParams:
    in_proj: Tensor
    mask_token: Tensor
    pos: Tensor
    blocks: list
    out_proj: Tensor


def init_decoder(student_width: int, width: int, blocks: int, seq_len: int,
                 target_width: int, seed: int, dtype=np.float32) -> DecoderParams:
    gen = rng.stream(seed, rng.TAG_INIT, 1, 0).gen
    blist = []
    for _ in range(blocks):
        blist.append(DecoderBlockParams(
            norm1_g=T.parameter(np.ones(width), dtype),
            norm1_b=T.parameter(np.zeros(width), dtype),
            wq=T.parameter(gen.normal(0, width ** -0.5, (width, width)), dtype),
            wk=T.parameter(gen.normal(0, width ** -0.5, (width, width)), dtype),
            wv=T.parameter(gen.normal(0, width ** -0.5, (width, width)), dtype),
            wo=T.parameter(gen.normal(0, width ** -0.5, (width, width)), dtype),
            norm2_g=T.parameter(np.ones(width), dtype),
            norm2_b=T.parameter(np.zeros(width), dtype),
            mlp_w1=T.parameter(gen.normal(0, width ** -0.5, (width, 2 * width)), dtype),
            mlp_b1=T.parameter(np.zeros(2 * width), dtype),
            mlp_w2=T.parameter(gen.normal(0, (2 * width) ** -0.5, (2 * width, width)), dtype),
            mlp_b2=T.parameter(np.zeros(width), dtype),
        ))
    return DecoderParams(
        in_proj=T.parameter(gen.normal(0, student_width ** -0.5, (student_width, width)), dtype),
        mask_token=T.parameter(gen.normal(0, 0.02, (1, 1, width)), dtype),
        pos=T.parameter(gen.normal(0, 0.02, (seq_len, width)), dtype),
        blocks=blist,
        out_proj=T.parameter(gen.normal(0, width ** -0.5, (width, target_width)), dtype),
    )


def _self_attention(x: Tensor, blk: DecoderBlockParams) -> Tensor:
    width = blk.wq.shape[0]
    q = matmul(x, blk.wq)
    k = matmul(x, blk.wk)
    v = matmul(x, blk.wv)
    scores = matmul(q, k.transpose((0, 2, 1))) * (width ** -0.5)
    return matmul(matmul(softmax(scores), v), blk.wo)


def decoder_forward(dec: DecoderParams, visible_feats: Tensor, visible, total: int) -> Tensor:
    """Predictions [B, total, D_t] from visible features plus mask tokens."""
    b = visible_feats.shape[0]
    width = dec.mask_token.shape[2]
    proj = matmul(visible_feats, dec.in_proj)
    x = scatter_rows(proj, visible, total)
    mask_flag = np.ones((total, 1), dtype=x.dtype)
    mask_flag[np.asarray(visible, dtype=np.int64)] = 0.0
    x = x + broadcast_to(dec.mask_token, (b, total, width)) * Tensor(mask_flag)
    x = x + dec.pos
    for blk in dec.blocks:
        x = x + _self_attention(layer_norm(x, blk.norm1_g, blk.norm1_b), blk)
        h = layer_norm(x, blk.norm2_g, blk.norm2_b)
        h = matmul(silu(matmul(h, blk.mlp_w1) + blk.mlp_b1), blk.mlp_w2) + blk.mlp_b2
        x = x + h
    return layer_norm(matmul(x, dec.out_proj))


# -- distillation step and loop --------------------------------------------------


def mfd_step(student: VimModel, decoder: DecoderParams, teacher: TeacherModel,
             images, mfd_cfg: MfdConfig, schedule: ShuffleSchedule | None,
             seed: int, step: int, training: bool = True,
             mask: MaskSpec | None = None) -> Tensor:
    """One distillation loss: teacher targets vs decoder predictions.

    The student sees only the visible patch tokens; gradients reach the
    student and decoder but never the teacher.
    """
    if student.config.cls_token:
        raise ValueError("masked pre-training expects a cls-free student encoder")
    total = student.config.patch_tokens
    if mask is None:
        mask = sample_mask(total, mfd_cfg.ratio, rng.stream(seed, rng.TAG_MASK, step, 0))
    targets = layer_norm(teacher.features(images))
    feats = vim_encode(student.config, student.params, images, training=training,
                       schedule=schedule, seed=seed, step=step, visible=mask.visible)
    preds = decoder_forward(decoder, feats, mask.visible, total)
    if mfd_cfg.loss_on_all or mask.masked.size == 0:
        return smooth_l1(preds, Tensor(targets.data), mfd_cfg.beta)
    pred_m = index_rows(preds, mask.masked)
    target_m = Tensor(np.ascontiguousarray(targets.data[:, mask.masked]))
    return smooth_l1(pred_m, target_m, mfd_cfg.beta)


def mfd_train(cfg: TrainConfig, out_dir, serial: bool = False):
    """Pre-training loop; returns a TrainResult like the supervised path."""
    from .data import load_dataset
    from .train import (METRICS_HEADER, InterruptedTraining, NanLossError, TrainResult,
                        _SignalCheckpoint, make_schedule)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = dataclasses.replace(cfg.model, cls_token=False,
                                    drop_path=cfg.drop_path_rate)
    student = VimModel.create(model_cfg, seed=cfg.seed)
    schedule = make_schedule(dataclasses.replace(cfg, model=model_cfg))

    teacher_path = Path(cfg.mfd.teacher_ckpt) if cfg.mfd.teacher_ckpt else out / "teacher.ckpt"
    if teacher_path.exists():
        teacher = load_teacher(cfg.mfd, model_cfg, teacher_path)
    else:
        teacher = create_teacher(cfg.mfd, model_cfg)
        save_teacher(teacher, teacher_path)

    decoder = init_decoder(model_cfg.width, cfg.mfd.decoder_width, cfg.mfd.decoder_blocks,
                           model_cfg.patch_tokens, teacher.config.width, seed=cfg.seed)
    # The classification head plays no part in distillation; leave it out of
    # the optimizer so the missing-grad guard stays meaningful.
    params = {f"student.{k}": v for k, v in student.named_parameters().items()
              if not k.startswith("head_")}
    params.update({f"decoder.{k}": v for k, v in named_parameters(decoder).items()})
    opt = OptimizerState()
    train_ds = load_dataset(cfg.dataset, n=cfg.train_samples, seed=cfg.seed, serial=serial) \
        if cfg.dataset == "synthetic" else load_dataset(cfg.dataset, n=cfg.train_samples)

    steps_per_epoch = max(1, len(train_ds) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    metrics_path = out / "metrics.csv"
    ckpt_path = out / "model.ckpt"
    rows: list[dict] = []
    step = 0
    lr = 0.0
    with open(metrics_path, "w") as fh, _SignalCheckpoint() as stopper:
        fh.write(METRICS_HEADER + "\n")
        for epoch in range(1, cfg.epochs + 1):
            epoch_loss = 0.0
            epoch_n = 0
            for images, labels in train_ds.batches(cfg.batch_size, seed=cfg.seed,
                                                   epoch=epoch, shuffle=True,
                                                   drop_last=True):
                if stopper.requested:
                    save_checkpoint(ckpt_path, {name: p.data for name, p in params.items()})
                    raise InterruptedTraining(step, str(ckpt_path))
                lr = cosine_lr(step, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr)
                try:
                    loss = mfd_step(student, decoder, teacher, images, cfg.mfd,
                                    schedule, cfg.seed, step, training=True)
                except FloatingPointError as exc:
                    raise NanLossError(step) from exc
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise NanLossError(step)
                zero_grad(params)
                loss.backward()
                adamw_step(params, opt, lr, cfg.weight_decay)
                epoch_loss += loss_val * len(labels)
                epoch_n += len(labels)
                step += 1
            mean_loss = epoch_loss / epoch_n
            fh.write(f"{epoch},train,{mean_loss:.6f},nan,{lr:.8g},0\n")
            fh.flush()
            rows.append(dict(epoch=epoch, split="train", loss=mean_loss,
                             top1=float("nan"), lr=lr, ema=0))

    save_checkpoint(ckpt_path, {name: p.data for name, p in params.items()})
    return TrainResult(rows=rows, metrics_path=str(metrics_path),
                       checkpoint_path=str(ckpt_path),
                       final_train_loss=rows[-1]["loss"],
                       final_eval_loss=float("nan"),
                       final_eval_top1=float("nan"))
