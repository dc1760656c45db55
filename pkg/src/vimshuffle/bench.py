"""Wall-clock throughput benchmark: shuffle regularizer on vs off.

Both arms run the identical model, parameters, and inputs through a full
forward+backward; the only difference is whether the per-layer shuffle
machinery is active. The shuffled arm deliberately recovers inverse
permutations through the argsort path, so the measured overhead includes the
O(T log T) restoration cost.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .config import SlwsConfig
from .model import VimConfig, VimModel, vim_forward
from .slws import ShuffleSchedule
from .tensor import zero_grad

DEFAULT_SEQ_LENS = (64, 196, 576, 1024)


class BenchTimingError(RuntimeError):
    pass


@dataclass
class BenchRow:
    seq_len: int
    batch: int
    ips_off: float
    ips_with: float
    overhead_pct: float
    iqr_off: float
    iqr_with: float
    ips_worst: float = float("nan")
    overhead_worst_pct: float = float("nan")


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    warmup_iters: int = 5
    measured_iters: int = 20
    timer_resolution: float = 0.0

    def __post_init__(self):
        if self.measured_iters < 20:
            raise ValueError("need at least 20 measured iterations")
        if self.warmup_iters < 5:
            raise ValueError("need at least 5 warmup iterations")


def _config_for_seq(base: VimConfig, seq_len: int) -> VimConfig:
    grid = int(round(seq_len ** 0.5))
    if grid * grid != seq_len:
        raise ValueError(f"sequence length {seq_len} is not a square patch grid")
    return dataclasses.replace(base, image_size=grid * base.patch_size)


def _time_interleaved(step_fns: dict, warmup: int, iters: int) -> dict:
    """Per-arm step times with arms interleaved within each round.

    Interleaving makes clock/thermal drift hit every arm in the same round
    equally, so paired per-round comparisons cancel it; GC stays off while
    the clock runs.
    """
    import gc

    for _ in range(warmup):
        for fn in step_fns.values():
            fn()
    times = {name: np.empty(iters) for name in step_fns}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(iters):
            for name, fn in step_fns.items():
                t0 = time.perf_counter()
                fn()
                times[name][i] = time.perf_counter() - t0
            gc.collect(0)
    finally:
        if gc_was_enabled:
            gc.enable()
    return times


def _median_iqr(arr: np.ndarray) -> tuple[float, float]:
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return float(med), float(q3 - q1)


def _paired_overhead_pct(arm: np.ndarray, off: np.ndarray) -> float:
    """Median of per-round relative slowdowns; robust to drift and tails."""
    return float(np.median((arm - off) / off)) * 100.0


def run_bench(base_config: VimConfig, seq_lens=DEFAULT_SEQ_LENS, batch: int = 8,
              iters: int = 20, warmup: int = 5, slws: SlwsConfig | None = None,
              seed: int = 0, include_worst_case: bool = True) -> BenchReport:
    """Measure images/sec per sequence length for both arms.

    The worst-case arm forces a shuffle in every layer (constant schedule at
    probability 1), bounding the overhead of the training-default setting.
    """
    slws = slws or SlwsConfig()
    resolution = time.get_clock_info("perf_counter").resolution
    report = BenchReport(warmup_iters=warmup, measured_iters=iters,
                         timer_resolution=resolution)
    gen = rng.stream(seed, rng.TAG_BENCH, 0, 0).gen

    for seq_len in seq_lens:
        cfg = _config_for_seq(base_config, seq_len)
        model = VimModel.create(cfg, seed=seed)
        params = model.named_parameters()
        images = gen.normal(0.0, 1.0, size=(batch, cfg.image_size, cfg.image_size, 3)) \
            .astype(np.float32)
        schedule = ShuffleSchedule(kind=slws.kind, p_l=slws.p_l, layers=cfg.depth,
                                   include_cls=slws.include_cls, argsort_inverse=True)
        worst = ShuffleSchedule(kind="constant", p_l=1.0, layers=cfg.depth,
                                include_cls=slws.include_cls, argsort_inverse=True)

        def make_step(sched):
            counter = {"step": 0}

            def step_fn():
                logits = vim_forward(cfg, model.params, images, training=True,
                                     schedule=sched, seed=seed, step=counter["step"])
                zero_grad(params)
                logits.sum().backward()
                counter["step"] += 1

            return step_fn

        arms = {"off": make_step(None), "slws": make_step(schedule)}
        if include_worst_case:
            arms["slws_worst"] = make_step(worst)
        times = _time_interleaved(arms, warmup, iters)
        med_off, iqr_off = _median_iqr(times["off"])
        if med_off < 100.0 * max(resolution, 1e-9):
            raise BenchTimingError(
                f"step time {med_off:.2e}s too close to timer resolution {resolution:.2e}s; "
                "re-run with a larger batch")
        med_with, iqr_with = _median_iqr(times["slws"])
        row = BenchRow(
            seq_len=seq_len, batch=batch,
            ips_off=batch / med_off, ips_with=batch / med_with,
            overhead_pct=_paired_overhead_pct(times["slws"], times["off"]),
            iqr_off=iqr_off, iqr_with=iqr_with)
        if include_worst_case:
            med_worst, _ = _median_iqr(times["slws_worst"])
            row.ips_worst = batch / med_worst
            row.overhead_worst_pct = _paired_overhead_pct(times["slws_worst"], times["off"])
        report.rows.append(row)
    return report


def write_bench_csv(report: BenchReport, path) -> None:
    """Long-form CSV: seq_len,batch,arm,images_per_sec,overhead_pct."""
    with open(path, "w") as fh:
        fh.write("seq_len,batch,arm,images_per_sec,overhead_pct\n")
        for r in report.rows:
            fh.write(f"{r.seq_len},{r.batch},off,{r.ips_off:.3f},0.000\n")
            fh.write(f"{r.seq_len},{r.batch},slws,{r.ips_with:.3f},{r.overhead_pct:.3f}\n")
            if np.isfinite(r.ips_worst):
                fh.write(f"{r.seq_len},{r.batch},slws_worst,{r.ips_worst:.3f},"
                         f"{r.overhead_worst_pct:.3f}\n")


def format_report(report: BenchReport) -> str:
    lines = ["seq_len  batch  img/s(off)  img/s(slws)  loss%   img/s(worst)  loss%(worst)"]
    for r in report.rows:
        worst = f"{r.ips_worst:12.2f}  {r.overhead_worst_pct:12.2f}" \
            if np.isfinite(r.ips_worst) else "           -             -"
        lines.append(f"{r.seq_len:7d}  {r.batch:5d}  {r.ips_off:10.2f}  "
                     f"{r.ips_with:11.2f}  {r.overhead_pct:5.2f}  {worst}")
    return "\n".join(lines)
