import numpy as np
import pytest

from pegeqat import ops
from pegeqat.checkpoint import load_checkpoint, save_checkpoint, to_bytes, make_checkpoint
from pegeqat.curriculum import ReplacementState, ScheduleSpec
from pegeqat.errors import CheckpointError, ConfigError
from pegeqat.estimators import EstimatorConfig
from pegeqat.models import Mode, ModelSpec, QuantConfig, build_model, forward_quantized, init_from_pretrained
from pegeqat.tensor import Tensor

SMALL = dict(in_shape=(1, 8, 8), num_classes=4)
FP = QuantConfig(bits_w=32, bits_a=32)


def mlp(seed=0, quant=None, dtype=np.float32, width=0.25):
    return build_model(ModelSpec(arch="MLP", width=width, seed=seed, quant=quant or QuantConfig(), **SMALL), dtype)


def batch(rng, n=8, shape=(1, 8, 8), dtype=np.float32):
    return rng.standard_normal((n,) + shape).astype(dtype), rng.integers(0, 4, n)


def weights(model):
    return {n: t.data.copy() for n, t, _ in model.named_parameters()}


class TestBuild:
    def test_mlp_parameter_count(self):
        m = build_model(ModelSpec(arch="MLP"))
        assert m.count_weights() == 784 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10 == 235_146

    def test_zero_width(self):
        with pytest.raises(ConfigError):
            ModelSpec(arch="MLP", width=0)

    def test_unknown_arch(self):
        with pytest.raises(ConfigError):
            ModelSpec(arch="VGG16")

    @pytest.mark.parametrize("arch", ["MLP", "SMALL_CNN", "RESNET20_LITE"])
    def test_seeded_init_is_reproducible(self, arch):
        a, b = (build_model(ModelSpec(arch=arch, seed=5, **SMALL)) for _ in range(2))
        for (na, ta, _), (nb, tb, _) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and ta.data.tobytes() == tb.data.tobytes()

    @pytest.mark.parametrize("arch", ["MLP", "SMALL_CNN", "RESNET20_LITE"])
    def test_first_and_last_layers_full_precision(self, arch):
        m = build_model(ModelSpec(arch=arch, **SMALL))
        layers = list(m.layers.values())
        assert not layers[0].quantized and not layers[-1].quantized
        assert all(l.quantized for l in layers[1:-1])

    @pytest.mark.parametrize("arch", ["MLP", "SMALL_CNN", "RESNET20_LITE"])
    def test_first_last_weights_ignore_quant_config(self, arch):
        a = build_model(ModelSpec(arch=arch, seed=2, quant=QuantConfig(bits_w=2, bits_a=4), **SMALL))
        b = build_model(ModelSpec(arch=arch, seed=2, quant=FP, **SMALL))
        first, last = list(a.layers)[0], list(a.layers)[-1]
        for name in (first, last):
            assert a.layers[name].w.data.tobytes() == b.layers[name].w.data.tobytes()

    def test_resnet_topology(self):
        m = build_model(ModelSpec(arch="RESNET20_LITE"))
        convs = [l for l in m.layers.values() if l.kind == "conv"]
        assert len(convs) == 19 and m.spec.width == 0.25
        assert len(m.layers) == 20

    def test_descriptor_round_trip(self):
        spec = ModelSpec(arch="SMALL_CNN", width=0.5, quant=QuantConfig(clip_family="PACT", bits_a=3), **SMALL)
        again = ModelSpec.from_descriptor(spec.descriptor())
        assert again.descriptor() == spec.descriptor()


class TestForward:
    @pytest.mark.parametrize("arch", ["MLP", "SMALL_CNN", "RESNET20_LITE"])
    def test_train_step_reaches_every_parameter(self, arch, rng):
        m = build_model(ModelSpec(arch=arch, **SMALL))
        x, y = batch(rng)
        m.calibrate(x)
        out = forward_quantized(m, x, 0, Mode.TRAIN, EstimatorConfig(kind="PEGE", mu=0.1))
        assert out.shape == (8, 4)
        ops.cross_entropy(out, y).backward()
        missing = [n for n, t, _ in m.named_parameters() if t.grad is None]
        assert not missing

    def test_unreplaced_layers_skip_weight_quantizer(self, rng):
        m = build_model(ModelSpec(arch="RESNET20_LITE", **SMALL))
        x, y = batch(rng)
        m.calibrate(x)
        rep = ReplacementState(rng_seed=0, granularity="PER_LAYER")
        sched = ScheduleSpec(family="CONSTANT", p_const=0.5)
        ops.cross_entropy(forward_quantized(m, x, 0, Mode.TRAIN, EstimatorConfig(), sched, rep), y).backward()
        used = [l.quant_w.params["p1"].grad is not None for l in m.quant_layers]
        assert any(used) and not all(used)
        assert all(l.w.grad is not None for l in m.layers.values())

    def test_eval_is_deterministic_and_pure(self, rng):
        m = build_model(ModelSpec(arch="SMALL_CNN", **SMALL))
        x, _ = batch(rng)
        m.calibrate(x)
        before = m.state_arrays()
        before = {k: v.copy() for k, v in before.items()}
        a = forward_quantized(m, x, 3, Mode.EVAL).data
        b = forward_quantized(m, x, 3, Mode.EVAL).data
        assert a.tobytes() == b.tobytes()
        after = m.state_arrays()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_eval_records_no_graph(self, rng):
        m = mlp()
        x, _ = batch(rng)
        m.calibrate(x)
        assert forward_quantized(m, x, 0, Mode.EVAL).node is None

    def test_zero_rate_equals_full_precision(self, rng):
        x, _ = batch(rng)
        q = mlp(seed=4)
        fp = mlp(seed=4, quant=FP)
        q.calibrate(x)
        sched = ScheduleSpec(family="CONSTANT", p_const=0.0)
        for gran in ("GLOBAL", "PER_LAYER", "PER_ELEMENT"):
            rep = ReplacementState(rng_seed=1, granularity=gran)
            a = forward_quantized(q, x, 5, Mode.TRAIN, EstimatorConfig(), sched, rep, replace_activations=True).data
            b = forward_quantized(fp, x, 5, Mode.TRAIN).data
            assert a.tobytes() == b.tobytes()

    def test_bypass_equals_plain_network(self, rng):
        m = mlp(seed=1, quant=FP, dtype=np.float64)
        x, _ = batch(rng, dtype=np.float64)
        out = forward_quantized(m, x, 0, Mode.EVAL).data
        h = x.reshape(len(x), -1)
        for name, act in (("fc1", True), ("fc2", True), ("fc3", False)):
            l = m.layers[name]
            h = h @ l.w.data.T + l.b.data
            h = np.maximum(h, 0) if act else h
        np.testing.assert_allclose(out, h, rtol=1e-12, atol=1e-12)

    def test_discretization_errors(self, rng):
        x, _ = batch(rng)
        q, fp = mlp(), mlp(quant=FP)
        q.calibrate(x)
        for m in (q, fp):
            forward_quantized(m, x, 0, Mode.TRAIN, EstimatorConfig(kind="STE"))
        assert all(e > 0 for e in q.discretization_errors())
        assert all(e == 0 for e in fp.discretization_errors())


class TestGradientPlumbing:
    def grads(self, model, x, y, kind, mu):
        model.zero_grad()
        sched = ScheduleSpec(family="NONE", mu_family="CONSTANT", mu_max=mu)
        out = forward_quantized(model, x, 0, Mode.TRAIN, EstimatorConfig(kind=kind), sched)
        ops.cross_entropy(out, y).backward()
        return {n: t.grad.copy() for n, t, _ in model.named_parameters()}

    def setup_model(self, rng):
        m = mlp(seed=3, dtype=np.float64)
        x, y = batch(rng, dtype=np.float64)
        m.calibrate(x)
        return m, x, y

    def test_mu_zero_equals_ste(self, rng):
        m, x, y = self.setup_model(rng)
        ste = self.grads(m, x, y, "STE", 0.0)
        pege = self.grads(m, x, y, "PEGE", 0.0)
        for k in ste:
            assert ste[k].tobytes() == pege[k].tobytes(), k

    def test_weight_node_difference(self, rng):
        m, x, y = self.setup_model(rng)
        mu = 0.05
        ste = self.grads(m, x, y, "STE", 0.0)
        pege = self.grads(m, x, y, "PEGE", mu)
        q = m.layers["fc2"].quant_w
        lo, inv, _ = q.spec.geometry()
        u = np.clip((m.layers["fc2"].w.data - lo) * inv, 0, 1)
        r = np.floor(u * q.spec.levels + 0.5) / q.spec.levels
        want = np.where((u > 0) & (u < 1), mu * (u - r) * inv, 0.0)
        np.testing.assert_allclose(pege["fc2.w"] - ste["fc2.w"], want, rtol=0, atol=1e-12)
        # the last layer sits downstream of every quantizer
        assert pege["fc3.w"].tobytes() == ste["fc3.w"].tobytes()


class TestPretrained:
    def test_load_keeps_weights_and_logits(self, rng, tmp_path):
        x, _ = batch(rng)
        src = mlp(seed=9, quant=FP)
        path = str(tmp_path / "fp.ckpt")
        save_checkpoint(src, {"step": 0}, path)
        dst = mlp(seed=1, quant=FP)
        init_from_pretrained(dst, path)
        a = forward_quantized(src, x, 0, Mode.EVAL).data
        b = forward_quantized(dst, x, 0, Mode.EVAL).data
        assert a.tobytes() == b.tobytes()
        assert to_bytes(make_checkpoint(dst)) == to_bytes(make_checkpoint(src))

    def test_quantizers_rederived(self, rng, tmp_path):
        src = mlp(seed=9, quant=FP)
        path = str(tmp_path / "fp.ckpt")
        save_checkpoint(src, None, path)
        dst = mlp(seed=1)
        init_from_pretrained(dst, path)
        w = dst.layers["fc2"].w.data
        assert dst.layers["fc2"].quant_w.spec.p2 == pytest.approx(np.abs(w).max())
        assert not dst.layers["fc2"].quant_a.calibrated

    def test_wrong_layer_count(self, tmp_path):
        path = str(tmp_path / "cnn.ckpt")
        save_checkpoint(build_model(ModelSpec(arch="SMALL_CNN", **SMALL)), None, path)
        with pytest.raises(CheckpointError):
            init_from_pretrained(mlp(), path)

    def test_width_mismatch(self, tmp_path):
        path = str(tmp_path / "w.ckpt")
        save_checkpoint(mlp(width=0.5), None, path)
        with pytest.raises(CheckpointError):
            init_from_pretrained(mlp(width=0.25), path)
