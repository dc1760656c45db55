"""Supervised training loop, evaluation, metrics CSV, and the overfitting A/B."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import Dataset, load_dataset, worker_count
from .model import VimModel, vim_forward
from .optim import (OptimizerState, adamw_step, cosine_lr, ema_update, init_ema,
                    label_smoothing_ce, swap_in_ema)
from .slws import ShuffleSchedule
from .tensor import zero_grad

METRICS_HEADER = "epoch,split,loss,top1,lr,ema"


class NanLossError(RuntimeError):
    """Training hit a non-finite loss; carries the offending step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class InterruptedTraining(RuntimeError):
    """SIGINT/SIGTERM arrived; a checkpoint was written before exiting."""

    def __init__(self, step: int, checkpoint_path: str):
        super().__init__(f"interrupted at step {step}; checkpoint saved to {checkpoint_path}")
        self.step = step
        self.checkpoint_path = checkpoint_path


class _SignalCheckpoint:
    """Installs SIGINT/SIGTERM handlers that request a clean stop."""

    def __init__(self):
        self.requested = False
        self._previous = {}

    def __enter__(self):
        import signal
        import threading
        if threading.current_thread() is not threading.main_thread():
            return self  # worker processes/threads keep default handling

        def handler(signum, frame):
            self.requested = True

        for sig in (signal.SIGINT, signal.SIGTERM):
            self._previous[sig] = signal.signal(sig, handler)
        return self

    def __exit__(self, *exc):
        import signal
        for sig, prev in self._previous.items():
            signal.signal(sig, prev)
        return False


@dataclass
class TrainResult:
    rows: list
    metrics_path: str
    checkpoint_path: str
    final_train_loss: float
    final_eval_loss: float
    final_eval_top1: float


def build_model(cfg: TrainConfig) -> VimModel:
    model_cfg = dataclasses.replace(cfg.model, drop_path=cfg.drop_path_rate)
    return VimModel.create(model_cfg, seed=cfg.seed)


def make_schedule(cfg: TrainConfig) -> ShuffleSchedule | None:
    if cfg.slws is None:
        return None
    return ShuffleSchedule(kind=cfg.slws.kind, p_l=cfg.slws.p_l,
                           layers=cfg.model.depth, include_cls=cfg.slws.include_cls)


def load_train_eval(cfg: TrainConfig, serial: bool = False) -> tuple[Dataset, Dataset]:
    """Training and held-out evaluation splits.

    Synthetic data uses disjoint index ranges of the same generator; a record
    file is split front/back unless a separate eval file is given.
    """
    if cfg.dataset == "synthetic":
        train_ds = load_dataset("synthetic", n=cfg.train_samples, seed=cfg.seed, serial=serial)
        eval_ds = load_dataset("synthetic", n=cfg.eval_samples, seed=cfg.seed,
                               offset=cfg.train_samples, serial=serial)
        return train_ds, eval_ds
    train_ds = load_dataset(cfg.dataset, n=cfg.train_samples)
    if cfg.eval_dataset:
        eval_ds = load_dataset(cfg.eval_dataset, n=cfg.eval_samples)
    else:
        eval_ds = load_dataset(cfg.dataset, n=cfg.eval_samples, offset=cfg.train_samples)
    return train_ds, eval_ds


def _batch_top1(logits: np.ndarray, labels: np.ndarray) -> int:
    return int((logits.argmax(axis=-1) == labels).sum())


def evaluate(model: VimModel, dataset: Dataset, batch_size: int) -> tuple[float, float]:
    """Plain cross-entropy and top-1 with training=False (no shuffle, no drop path)."""
    total_loss = 0.0
    hits = 0
    for images, labels in dataset.batches(batch_size):
        logits = model.forward(images, training=False)
        loss = label_smoothing_ce(logits, labels, 0.0)
        total_loss += loss.item() * len(labels)
        hits += _batch_top1(logits.data, labels)
    n = len(dataset)
    return total_loss / n, hits / n


def _format_row(epoch: int, split: str, loss: float, top1: float, lr: float, ema: int) -> str:
    return f"{epoch},{split},{loss:.6f},{top1:.4f},{lr:.8g},{ema}"


def train(cfg: TrainConfig, out_dir, serial: bool = False) -> TrainResult:
    """Run the configured training mode, writing metrics CSV and a checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.mode == "mfd":
        from .mfd import mfd_train
        return mfd_train(cfg, out, serial=serial)

    model = build_model(cfg)
    schedule = make_schedule(cfg)
    params = model.named_parameters()
    opt = OptimizerState()
    ema = init_ema(params, cfg.ema_decay)
    train_ds, eval_ds = load_train_eval(cfg, serial=serial)

    steps_per_epoch = max(1, len(train_ds) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    metrics_path = out / "metrics.csv"
    ckpt_path = out / "model.ckpt"

    def save(path):
        to_save = {name: p.data for name, p in params.items()}
        if cfg.eval_ema:
            to_save.update({f"ema.{name}": arr for name, arr in ema.shadow.items()})
        save_checkpoint(path, to_save)

    rows: list[dict] = []
    step = 0
    lr = 0.0
    with open(metrics_path, "w") as fh, _SignalCheckpoint() as stopper:
        fh.write(METRICS_HEADER + "\n")
        for epoch in range(1, cfg.epochs + 1):
            epoch_loss = 0.0
            epoch_hits = 0
            epoch_n = 0
            for images, labels in train_ds.batches(
                    cfg.batch_size, seed=cfg.seed, epoch=epoch, shuffle=True,
                    augment=cfg.augment, drop_last=True):
                if stopper.requested:
                    save(ckpt_path)
                    raise InterruptedTraining(step, str(ckpt_path))
                lr = cosine_lr(step, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr)
                try:
                    logits = vim_forward(model.config, model.params, images, training=True,
                                         schedule=schedule, seed=cfg.seed, step=step)
                    loss = label_smoothing_ce(logits, labels, cfg.label_smoothing)
                except FloatingPointError as exc:
                    raise NanLossError(step) from exc
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise NanLossError(step)
                zero_grad(params)
                loss.backward()
                adamw_step(params, opt, lr, cfg.weight_decay)
                ema_update(ema, params)
                epoch_loss += loss_val * len(labels)
                epoch_hits += _batch_top1(logits.data, labels)
                epoch_n += len(labels)
                step += 1

            def emit(split, loss_v, top1_v, ema_flag):
                fh.write(_format_row(epoch, split, loss_v, top1_v, lr, ema_flag) + "\n")
                rows.append(dict(epoch=epoch, split=split, loss=loss_v, top1=top1_v,
                                 lr=lr, ema=ema_flag))

            emit("train", epoch_loss / epoch_n, epoch_hits / epoch_n, 0)
            ev_loss, ev_top1 = evaluate(model, eval_ds, cfg.batch_size)
            emit("eval", ev_loss, ev_top1, 0)
            if cfg.eval_ema:
                with swap_in_ema(ema, params):
                    ema_loss, ema_top1 = evaluate(model, eval_ds, cfg.batch_size)
                emit("eval", ema_loss, ema_top1, 1)
            fh.flush()

    save(ckpt_path)

    train_rows = [r for r in rows if r["split"] == "train"]
    eval_rows = [r for r in rows if r["split"] == "eval" and r["ema"] == 0]
    return TrainResult(rows=rows, metrics_path=str(metrics_path),
                       checkpoint_path=str(ckpt_path),
                       final_train_loss=train_rows[-1]["loss"],
                       final_eval_loss=eval_rows[-1]["loss"],
                       final_eval_top1=eval_rows[-1]["top1"])


@dataclass
class AbReport:
    rows: list
    summary: dict
    report_path: str


def _run_ab_arm(job) -> dict:
    arm, seed, arm_cfg, run_dir, limit_blas = job
    if limit_blas:
        # Parallel arms each get one core; nested BLAS threads would thrash.
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(1)
        except ImportError:
            pass
    res = train(arm_cfg, run_dir, serial=True)
    return dict(arm=arm, seed=seed, train_loss=res.final_train_loss,
                eval_loss=res.final_eval_loss, eval_top1=res.final_eval_top1)


def overfit_ab_experiment(cfg: TrainConfig, seeds, out_dir, serial: bool = False) -> AbReport:
    """Paired runs (shuffle regularizer on vs off) per seed, otherwise identical.

    The useful signature of regularization here: the regularized arm should sit
    at a higher final training loss without giving up evaluation accuracy.
    Runs are independent and seed-keyed, so with SLWS_THREADS > 1 they execute
    in parallel worker processes with bitwise-identical results.
    """
    if cfg.slws is None:
        raise ValueError("A/B experiment needs an slws config for the 'on' arm")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = min(worker_count(serial), 2 * len(seeds))
    jobs = []
    for seed in seeds:
        for arm in ("baseline", "slws"):
            arm_cfg = dataclasses.replace(
                cfg, seed=seed, slws=None if arm == "baseline" else cfg.slws)
            jobs.append((arm, seed, arm_cfg, str(out / f"{arm}-seed{seed}"), workers > 1))
    if workers > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(workers) as pool:
            rows = pool.map(_run_ab_arm, jobs)
    else:
        rows = [_run_ab_arm(job) for job in jobs]
    report_path = out / "ab_report.csv"
    with open(report_path, "w") as fh:
        fh.write("arm,seed,train_loss,eval_loss,eval_top1\n")
        for r in rows:
            fh.write(f"{r['arm']},{r['seed']},{r['train_loss']:.6f},"
                     f"{r['eval_loss']:.6f},{r['eval_top1']:.4f}\n")
    summary = {}
    for arm in ("baseline", "slws"):
        arm_rows = [r for r in rows if r["arm"] == arm]
        summary[arm] = {
            "train_loss": float(np.mean([r["train_loss"] for r in arm_rows])),
            "eval_loss": float(np.mean([r["eval_loss"] for r in arm_rows])),
            "eval_top1": float(np.mean([r["eval_top1"] for r in arm_rows])),
        }
    return AbReport(rows=rows, summary=summary, report_path=str(report_path))
