import csv
import os

import numpy as np
import pytest

from pegeqat.config import TrainConfig
from pegeqat.data import Dataset, synth_dataset
from pegeqat.errors import ConfigError, ContractError, NonFiniteError
from pegeqat.harness import (
    METRICS_HEADER,
    MetricsRecord,
    emit_metrics,
    evaluate,
    replacement_family,
    thread_limit,
    train,
)
from pegeqat.curriculum import ScheduleFamily
from pegeqat.models import ModelSpec, QuantConfig, build_model
from pegeqat.tensor import Tensor


def cfg(**kw):
    base = dict(
        data__synth_n=256, data__synth_classes=4, data__batch=32, train__epochs=2, model__width=0.25, train__lr=1e-2
    )
    base.update(kw)
    return TrainConfig().with_overrides(**base)


def rec(**kw):
    base = dict(epoch=0, step=1, train_loss=1.0, train_acc=50.0, test_acc=40.0, p_t=0.3, mu_t=0.0, lr=0.1)
    base.update(kw)
    return MetricsRecord(**base)


class TestMetrics:
    def test_single_record_csv(self, tmp_path):
        p = tmp_path / "m.csv"
        emit_metrics([rec(disc_err=[0.1, 0.3])], str(p))
        rows = list(csv.reader(p.open()))
        assert len(rows) == 2 and tuple(rows[0]) == METRICS_HEADER
        assert rows[1][METRICS_HEADER.index("disc_err_mean")] == "0.200000"

    def test_reemission_identical(self, tmp_path):
        series = [rec(), rec(epoch=1, step=2)]
        emit_metrics(series, str(tmp_path / "a.csv"))
        emit_metrics(series, str(tmp_path / "b.csv"))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_empty_series(self, tmp_path):
        with pytest.raises(ContractError):
            emit_metrics([], str(tmp_path / "x.csv"))

    @pytest.mark.parametrize("bad", [dict(test_acc=101.0), dict(train_acc=-1.0), dict(disc_err=[-0.1])])
    def test_record_validation(self, bad):
        with pytest.raises(ContractError):
            rec(**bad)


class TestEvaluate:
    def model(self):
        return build_model(ModelSpec(arch="MLP", width=0.25, in_shape=(1, 8, 8), num_classes=10, quant=QuantConfig(bits_w=32, bits_a=32)))

    def test_single_sample(self):
        m = self.model()
        x = np.random.default_rng(0).standard_normal((1, 1, 8, 8)).astype(np.float32)
        from pegeqat.models import Mode, forward_quantized

        y = np.argmax(forward_quantized(m, x, 0, Mode.EVAL).data, axis=1)
        assert evaluate(m, Dataset(x, y)) == 100.0

    def test_constant_predictor_on_balanced_set(self):
        m = self.model()
        last = list(m.layers.values())[-1]
        last.w.data[:] = 0
        last.b.data[:] = 0
        last.b.data[0] = 1.0
        ds = Dataset(np.zeros((100, 1, 8, 8), np.float32), np.arange(100) % 10)
        assert evaluate(m, ds, batch_size=7) == 10.0

    def test_empty(self):
        with pytest.raises(ContractError):
            evaluate(self.model(), Dataset(np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64)))


class TestTrain:
    def test_zero_steps_leaves_model(self):
        res = train(cfg(train__max_steps=0))
        ref = build_model(res.model.spec)
        assert res.steps == 0 and res.metrics == []
        for (_, a, _), (_, b, _) in zip(res.model.named_parameters(), ref.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    @pytest.mark.slow
    def test_full_precision_fits_synthetic(self):
        c = cfg(
            quant__bits_w=32, quant__bits_a=32, data__synth_n=512, data__synth_classes=2,
            train__epochs=25, train__lr=1e-2, data__batch=64, estimator__kind="STE",
        )
        res = train(c, prefetch_batches=False)
        assert res.steps == 200
        assert res.metrics[-1].train_acc >= 99.0
        assert all(r.disc_err_mean == 0.0 for r in res.metrics)

    def test_no_prefetch_runs_are_bitwise_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        train(cfg(), str(a), prefetch_batches=False)
        train(cfg(), str(b), prefetch_batches=False)
        for name in ("metrics.csv", "final.ckpt", "best.ckpt"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
        assert (a / "timing.csv").exists()

    def test_prefetch_matches_no_prefetch_values(self):
        r1 = train(cfg(), prefetch_batches=False)
        r2 = train(cfg(), prefetch_batches=True)
        assert [m.train_loss for m in r1.metrics] == [m.train_loss for m in r2.metrics]

    def test_series_shape(self, tmp_path):
        res = train(cfg(train__epochs=4, data__synth_n=128), str(tmp_path), prefetch_batches=False)
        assert [m.epoch for m in res.metrics] == [0, 1, 2, 3]
        p = [m.p_t for m in res.metrics]
        assert p == sorted(p) and p[-1] == 1.0
        assert res.metrics[-1].lr == 0.0
        assert all(m.mu_t >= 0 for m in res.metrics)
        rows = list(csv.reader(open(tmp_path / "metrics.csv")))
        assert len(rows) == 5 and all(r[-1] == "0.000000" for r in rows[1:])

    def test_eval_period(self):
        res = train(cfg(train__epochs=5, train__eval_period=2, data__synth_n=64))
        assert [m.epoch for m in res.metrics] == [1, 3, 4]

    def test_best_checkpoint_tie_goes_to_latest(self, tmp_path):
        # a 2-class set evaluated on one sample: accuracy is either 0 or 100
        train_set = synth_dataset(64, 2, seed=0)
        test_set = Dataset(train_set.images[:1], train_set.labels[:1], classes=2)
        res = train(cfg(train__epochs=3, train__lr=1e-9), str(tmp_path), datasets=(train_set, test_set))
        accs = [m.test_acc for m in res.metrics]
        assert accs[0] == accs[-1]
        assert res.best_epoch == 2

    def test_baseline_has_no_mu_and_full_replacement(self):
        res = train(cfg(estimator__kind="STE"))
        assert all(m.mu_t == 0.0 and m.p_t == 1.0 for m in res.metrics)

    def test_auto_family(self):
        assert replacement_family(cfg()) is ScheduleFamily.LOGARITHMIC
        assert replacement_family(cfg(estimator__kind="EWGS")) is ScheduleFamily.NONE
        assert replacement_family(cfg(estimator__kind="STE", replace__family="LINEAR")) is ScheduleFamily.LINEAR

    def test_nan_aborts_with_diagnostic(self, tmp_path, monkeypatch):
        from pegeqat import harness, ops

        calls, real = [], ops.cross_entropy

        def poisoned(logits, y):
            calls.append(1)
            loss = real(logits, y)
            return ops.mul(loss, Tensor(np.array(np.nan, loss.dtype))) if len(calls) == 3 else loss

        monkeypatch.setattr(harness.ops, "cross_entropy", poisoned)
        with np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteError):
                train(cfg(), str(tmp_path))
        assert "step 2" in (tmp_path / "nan_abort.txt").read_text()

    def test_pretrained_start(self, tmp_path):
        fp = train(cfg(quant__bits_w=32, quant__bits_a=32), str(tmp_path / "fp"), prefetch_batches=False)
        res = train(cfg(model__pretrained_path=str(tmp_path / "fp" / "final.ckpt"), train__max_steps=1))
        assert res.steps == 1 and fp.steps > 0


class TestThreads:
    def test_env_cap(self, monkeypatch):
        from threadpoolctl import threadpool_info

        monkeypatch.setenv("PEGE_THREADS", "1")
        with thread_limit():
            assert all(p["num_threads"] == 1 for p in threadpool_info())

    def test_bad_env(self, monkeypatch):
        monkeypatch.setenv("PEGE_THREADS", "lots")
        with pytest.raises(ConfigError):
            with thread_limit():
                pass

    def test_unset_is_noop(self, monkeypatch):
        monkeypatch.delenv("PEGE_THREADS", raising=False)
        with thread_limit():
            pass


class TestCifarPlumbing:
    def test_short_cifar_run(self, cifar_dir, tmp_path):
        c = TrainConfig().with_overrides(
            data__name="cifar10", data__dir=str(cifar_dir), data__subset_n=256, data__batch=64,
            model__arch="SMALL_CNN", model__width=0.25, train__epochs=1, train__max_steps=3, train__eval_batch=1000,
        )
        res = train(c, str(tmp_path))
        assert res.steps == 3 and len(res.metrics) == 1
        assert 0.0 <= res.metrics[0].test_acc <= 100.0
        assert res.metrics[0].secs > 0
