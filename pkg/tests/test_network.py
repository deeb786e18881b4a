import numpy as np
import pytest

from siamret.errors import FormatError, ShapeError, ValidationError
from siamret.layers import (
    BatchNormSpec,
    Conv2dSpec,
    DenseSpec,
    DropoutSpec,
    GlobalAvgPoolSpec,
    ReluSpec,
)
from siamret.network import (
    Network,
    NetworkSpec,
    backward_network,
    build_network,
    default_network_spec,
    embed,
    forward_network,
    infer_shapes,
    load_checkpoint,
    parameter_entries,
    save_checkpoint,
    validate_network_spec,
)
from siamret.rngstreams import rng_stream

F32 = np.float32


def tiny_spec(dropout=0.0):
    """8x8 single-block network, cheap enough for exhaustive checks."""
    layers = (
        Conv2dSpec(1, 4, 3, padding=1),
        BatchNormSpec(4),
        ReluSpec(),
        Conv2dSpec(4, 4, 3, padding=1),
        BatchNormSpec(4),
        ReluSpec(),
        GlobalAvgPoolSpec(),
        DropoutSpec(dropout),
        DenseSpec(4, 6),
    )
    return NetworkSpec(
        layers=layers,
        embedding_dim=6,
        input_shape=(1, 8, 8),
        residual_blocks=((3, 5),),
    )


class TestBuild:
    def test_same_seed_is_bitwise_identical(self):
        spec = default_network_spec()
        a = build_network(spec, 42)
        b = build_network(spec, 42)
        for (_, _, pa), (_, _, pb) in zip(parameter_entries(a), parameter_entries(b)):
            assert pa.tobytes() == pb.tobytes()

    def test_different_seeds_differ(self):
        spec = tiny_spec()
        a = build_network(spec, 0)
        b = build_network(spec, 1)
        assert a.states[0].params["weight"].tobytes() != b.states[0].params["weight"].tobytes()

    def test_batchnorm_init(self):
        net = build_network(tiny_spec(), 0)
        bn = net.states[1]
        np.testing.assert_array_equal(bn.params["gamma"], 1.0)
        np.testing.assert_array_equal(bn.params["beta"], 0.0)
        np.testing.assert_array_equal(bn.buffers["running_mean"], 0.0)
        np.testing.assert_array_equal(bn.buffers["running_var"], 1.0)

    def test_bias_init_zero(self):
        net = build_network(tiny_spec(), 3)
        np.testing.assert_array_equal(net.states[0].params["bias"], 0.0)
        np.testing.assert_array_equal(net.states[-1].params["bias"], 0.0)

    def test_he_variance(self):
        # conv with fan_in = 16*3*3 = 144 and 16*16*9 = 2304 weights: the
        # sample variance should sit near 2/fan_in
        spec = NetworkSpec(
            layers=(Conv2dSpec(16, 16, 3, padding=1),),
            embedding_dim=16 * 32 * 32,
            input_shape=(16, 32, 32),
        )
        with pytest.raises(ValidationError):
            validate_network_spec(spec)  # conv output is not flat
        w = []
        for i in range(8):
            net_spec = default_network_spec(channels=16)
            net = build_network(net_spec, 100 + i)
            w.append(net.states[3].params["weight"].ravel())
        w = np.concatenate(w)
        assert w.size >= 10000
        fan_in = 16 * 3 * 3
        assert abs(w.var() - 2.0 / fan_in) / (2.0 / fan_in) < 0.2
        assert abs(w.mean()) < 0.01


class TestValidation:
    def test_residual_shape_mismatch_names_block(self):
        layers = (
            Conv2dSpec(1, 2, 3, padding=1),
            Conv2dSpec(2, 4, 3, padding=1),
            GlobalAvgPoolSpec(),
            DenseSpec(4, 4),
        )
        spec = NetworkSpec(layers, 4, (1, 8, 8), residual_blocks=((0, 1),))
        with pytest.raises(ValidationError, match=r"\(0, 1\)"):
            validate_network_spec(spec)

    def test_residual_out_of_range(self):
        spec = NetworkSpec((GlobalAvgPoolSpec(), DenseSpec(1, 1)), 1, (1, 4, 4), ((0, 5),))
        with pytest.raises(ValidationError, match="out of range"):
            validate_network_spec(spec)

    def test_duplicate_residual_start(self):
        layers = (
            Conv2dSpec(2, 2, 3, padding=1),
            Conv2dSpec(2, 2, 3, padding=1),
            GlobalAvgPoolSpec(),
            DenseSpec(2, 2),
        )
        spec = NetworkSpec(layers, 2, (2, 6, 6), residual_blocks=((0, 0), (0, 1)))
        with pytest.raises(ValidationError, match="share"):
            validate_network_spec(spec)

    def test_wrong_embedding_dim(self):
        spec = NetworkSpec((GlobalAvgPoolSpec(), DenseSpec(3, 8)), 9, (3, 4, 4))
        with pytest.raises(ValidationError, match="expected"):
            validate_network_spec(spec)

    def test_chaining_error_names_layer_index(self):
        layers = (Conv2dSpec(1, 2, 3), Conv2dSpec(3, 2, 3), GlobalAvgPoolSpec(), DenseSpec(2, 2))
        spec = NetworkSpec(layers, 2, (1, 8, 8))
        with pytest.raises(ValidationError, match="layer 1"):
            infer_shapes(spec)

    def test_empty_network(self):
        with pytest.raises(ValidationError):
            validate_network_spec(NetworkSpec((), 1, (1, 1, 1)))


class TestForwardBackward:
    def test_embed_shape_and_determinism(self):
        net = build_network(tiny_spec(), 5)
        img = rng_stream(20, 0).standard_normal((1, 8, 8)).astype(F32)
        e1 = embed(net, img)
        e2 = embed(net, img)
        assert e1.shape == (6,)
        assert e1.tobytes() == e2.tobytes()

    def test_embed_rejects_wrong_shape(self):
        net = build_network(tiny_spec(), 5)
        with pytest.raises(ShapeError):
            embed(net, np.zeros((1, 9, 9), dtype=F32))

    def test_shared_store_twins_are_bitwise_equal(self):
        # the two branch outputs come from one parameter store, so feeding the
        # same image down each branch has to agree bit for bit
        net = build_network(tiny_spec(), 6)
        img = rng_stream(21, 0).standard_normal((1, 8, 8)).astype(F32)
        both = forward_network(net, np.stack([img, img]))
        assert both[0].tobytes() == both[1].tobytes()

    def test_residual_skip_adds_input(self):
        # zero the block's conv weight and freeze BN to identity: the block
        # then computes relu(beta)=0 and the skip should pass x through
        layers = (
            Conv2dSpec(1, 1, 3, padding=1),
            BatchNormSpec(1, momentum=0.0),
        )
        spec = NetworkSpec(
            layers=layers + (GlobalAvgPoolSpec(), DenseSpec(1, 1)),
            embedding_dim=1,
            input_shape=(1, 4, 4),
            residual_blocks=((0, 1),),
        )
        net = build_network(spec, 0)
        net.states[0].params["weight"][:] = 0.0
        net.states[3].params["weight"][:] = 1.0
        x = rng_stream(22, 0).standard_normal((2, 1, 4, 4)).astype(F32)
        out = forward_network(net, x, mode="infer")
        # block output is BN(0) = 0 (running stats at init), so GAP sees x
        want = x.astype(np.float64).mean(axis=(2, 3))
        np.testing.assert_allclose(out, want, atol=1e-5)

    @staticmethod
    def _fd_sweep(net, x, probe, eps, rng, per_param=4):
        """Central differences over sampled parameter coordinates.

        Returns the worst relative error against backward_network.
        """

        def loss(n):
            out = forward_network(n, x, mode="train", rng=rng_stream(99, 0))
            return float((out.astype(np.float64) * probe).sum())

        forward_network(net, x, mode="train", rng=rng_stream(99, 0))
        grads = backward_network(net, probe.astype(F32))
        entries = parameter_entries(net)
        assert len(grads) == len(entries)
        worst = 0.0
        checked = 0
        for (li, name, param), g in zip(entries, grads):
            assert g.shape == param.shape
            flat = param.reshape(-1)
            for idx in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = np.float32(orig + eps)
                hi_val = flat[idx]
                lp = loss(net)
                flat[idx] = np.float32(orig - eps)
                lo_val = flat[idx]
                lm = loss(net)
                flat[idx] = orig
                fd = (lp - lm) / (float(hi_val) - float(lo_val))
                an = float(g.reshape(-1)[idx])
                worst = max(worst, abs(fd - an) / max(1.0, abs(an)))
                checked += 1
        assert checked >= 20
        return worst

    def test_backward_routing_finite_difference_smooth(self):
        # relu-free stack: the loss is smooth in the parameters, so central
        # differences isolate the residual gradient routing at tight tolerance
        layers = (
            Conv2dSpec(1, 4, 3, padding=1),
            BatchNormSpec(4),
            Conv2dSpec(4, 4, 3, padding=1),
            BatchNormSpec(4),
            GlobalAvgPoolSpec(),
            DenseSpec(4, 6),
        )
        spec = NetworkSpec(layers, 6, (1, 8, 8), residual_blocks=((2, 3),))
        net = build_network(spec, 7)
        x = rng_stream(23, 0).standard_normal((3, 1, 8, 8)).astype(F32)
        probe = rng_stream(24, 0).standard_normal((3, 6))
        worst = self._fd_sweep(net, x, probe, eps=1e-2, rng=rng_stream(25, 0))
        assert worst < 2e-3

    def test_backward_routing_finite_difference_full_stack(self):
        # with relus, parameter bumps cross activation kinks and the quotient
        # picks up O(eps) kink error; a dropped or doubled skip path would
        # still show up as an O(1) discrepancy
        net = build_network(tiny_spec(), 7)
        x = rng_stream(23, 1).standard_normal((3, 1, 8, 8)).astype(F32)
        probe = rng_stream(24, 1).standard_normal((3, 6))
        worst = self._fd_sweep(net, x, probe, eps=1e-2, rng=rng_stream(25, 1))
        assert worst < 5e-2

    def test_backward_with_dropout_uses_saved_mask(self):
        net = build_network(tiny_spec(dropout=0.5), 8)
        x = rng_stream(26, 0).standard_normal((4, 1, 8, 8)).astype(F32)
        forward_network(net, x, mode="train", rng=rng_stream(27, 0))
        grads = backward_network(net, np.ones((4, 6), dtype=F32))
        assert all(np.isfinite(g).all() for g in grads)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        net = build_network(default_network_spec(input_size=16), 9)
        # perturb away from init so the test is not vacuous, and give the BN
        # buffers non-default content
        x = rng_stream(28, 0).standard_normal((4, 3, 16, 16)).astype(F32)
        forward_network(net, x, mode="train", rng=rng_stream(29, 0))
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.spec == net.spec
        for (ia, na, pa), (ib, nb, pb) in zip(parameter_entries(net), parameter_entries(back)):
            assert (ia, na) == (ib, nb)
            assert pa.tobytes() == pb.tobytes()
        for sa, sb in zip(net.states, back.states):
            for name, buf in sa.buffers.items():
                assert buf.tobytes() == sb.buffers[name].tobytes()

    def test_roundtrip_embeddings_agree(self, tmp_path):
        net = build_network(tiny_spec(), 10)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        img = rng_stream(30, 0).standard_normal((1, 8, 8)).astype(F32)
        assert embed(net, img).tobytes() == embed(back, img).tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        net = build_network(tiny_spec(), 0)
        path = tmp_path / "v.ckpt"
        save_checkpoint(net, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        net = build_network(tiny_spec(), 0)
        path = tmp_path / "t.ckpt"
        save_checkpoint(net, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 10])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        net = build_network(tiny_spec(), 0)
        path = tmp_path / "x.ckpt"
        save_checkpoint(net, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)


def test_default_spec_shapes():
    spec = default_network_spec()
    validate_network_spec(spec)
    shapes = infer_shapes(spec)
    assert shapes[0] == (3, 32, 32)
    assert shapes[-1] == (32,)
    assert spec.residual_blocks == ((3, 5), (6, 8))


def test_parameter_entries_cover_all_layers():
    net = build_network(default_network_spec(), 0)
    kinds = [net.spec.layers[i].kind for i, _, _ in parameter_entries(net)]
    assert "conv2d" in kinds and "batch_norm" in kinds and "dense" in kinds
