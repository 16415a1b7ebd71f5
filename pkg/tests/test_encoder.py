import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invspread import autodiff as ad
from invspread import encoder as enc
from invspread.encoder import EncoderConfig
from invspread.errors import ContractError, FormatError, IncompatibleCheckpointError, VersionError
from invspread.losses import instance_loss
from invspread.serialization import read_tensor_file, write_tensor_file

MLP = EncoderConfig(kind="mlp", hidden=(64,), embed_dim=8)


def batch(n=4, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3, 32, 32)).astype(np.float32)


class TestInit:
    def test_deterministic(self):
        a, b = enc.init(EncoderConfig()), enc.init(EncoderConfig())
        for (ka, ta), (kb, tb) in zip(a.items(), b.items()):
            assert ka == kb and ta.data.tobytes() == tb.data.tobytes()
        c = enc.init(EncoderConfig(init_seed=1))
        assert c["conv0.weight"].data.tobytes() != a["conv0.weight"].data.tobytes()

    def test_mlp_shapes(self):
        p = enc.init(MLP)
        assert p["fc0.weight"].shape == (64, 3072)
        assert p["fc1.weight"].shape == (8, 64)
        assert sorted(k for k in p.tensors if k.endswith("weight")) == ["fc0.weight", "fc1.weight"]
        assert all(t.requires_grad for t in p)

    def test_he_variance(self):
        w = enc.init(MLP)["fc0.weight"].data.astype(np.float64)
        assert abs(w.mean()) < 1e-3
        assert abs(w.var() / (2 / 3072) - 1) < 0.1

    def test_biases_zero(self):
        p = enc.init(EncoderConfig())
        assert all(not t.data.any() for k, t in p.items() if k.endswith("bias"))

    def test_small_conv_plan(self):
        cfg = EncoderConfig()
        shapes = cfg.layer_shapes()
        assert shapes["conv0.weight"] == (32, 3, 3, 3)
        assert shapes["conv1.weight"] == (64, 32, 3, 3)
        assert shapes["conv2.weight"] == (128, 64, 3, 3)
        assert shapes["fc.weight"] == (128, 128)
        expected = sum(int(np.prod(s)) for s in shapes.values())
        assert enc.init(cfg).num_parameters() == expected == 109_760
        assert expected < 1_000_000

    def test_config_invariants(self):
        with pytest.raises(ContractError):
            EncoderConfig(embed_dim=1)
        with pytest.raises(ContractError):
            EncoderConfig(kind="resnet18")
        with pytest.raises(ContractError):
            EncoderConfig(channels=(8, 8, 8, 8, 8, 8))


class TestEmbed:
    @pytest.mark.parametrize("cfg", [EncoderConfig(embed_dim=16, channels=(4, 8, 8)), MLP])
    def test_unit_rows(self, cfg):
        out = enc.embed(enc.init(cfg), batch(5)).data
        assert out.shape == (5, cfg.embed_dim)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_duplicate_rows(self):
        x = batch(3)
        out = enc.embed(enc.init(MLP), np.concatenate([x, x[:1]])).data
        np.testing.assert_array_equal(out[0], out[3])

    def test_scale_invariance(self):
        p, x = enc.init(MLP), batch(4)
        a = enc.embed(p, x).data
        b = enc.embed(p, x, pre_norm_scale=3.7).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_zero_activation_no_crash(self):
        p = enc.init(MLP)
        for t in p:
            t.data = np.zeros_like(t.data)
        out = enc.embed(p, batch(2)).data
        assert np.all(np.isfinite(out))

    def test_shape_contract(self):
        with pytest.raises(ContractError):
            enc.embed(enc.init(MLP), np.zeros((2, 3, 16, 16), np.float32))

    def test_embed_numpy_matches(self):
        p, x = enc.init(MLP), batch(7)
        # blocked float32 matmuls round differently per batch size
        np.testing.assert_allclose(enc.embed_numpy(p, x, batch_size=3), enc.embed(p, x).data, atol=1e-5)
        assert enc.embed_numpy(p, x, batch_size=3).tobytes() == enc.embed_numpy(p, x, batch_size=3).tobytes()

    def test_gradient_orthogonal_to_activation(self):
        p, x = enc.init(MLP), batch(4)
        with ad.no_grad():
            z0 = enc.pre_normalization(p, x).data.astype(np.float64)
        z = ad.Tensor(z0, requires_grad=True, dtype=np.float64)
        with ad.Tape():
            F = ad.l2_normalize_rows(z)
            ad.backward(instance_loss(ad.take_rows(F, [0, 1]), ad.take_rows(F, [2, 3]), 0.1))
        dots = np.sum(z.data * z.grad, axis=1)
        assert np.all(np.abs(dots) <= 1e-5 * np.linalg.norm(z.grad))

    def test_end_to_end_gradient(self):
        cfg = EncoderConfig(kind="mlp", hidden=(3,), embed_dim=2, input_shape=(3, 2, 2))
        p = enc.init(cfg)
        x = np.random.default_rng(0).normal(size=(3, 3, 2, 2))
        w = p["fc0.weight"].data.astype(np.float64)

        def f(w_t):
            q = enc.EncoderParams(cfg, {**p.tensors, "fc0.weight": w_t})
            for k, t in q.items():
                if k != "fc0.weight":
                    q.tensors[k] = ad.Tensor(t.data, dtype=np.float64)
            F = enc.embed(q, ad.Tensor(x, dtype=np.float64))
            return ad.sum(ad.mul(F, ad.Tensor(np.arange(6.0).reshape(3, 2), dtype=np.float64)))

        assert ad.grad_check(f, w).passed


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        p = enc.init(EncoderConfig(embed_dim=16, channels=(4, 8, 8)))
        enc.save_params(p, tmp_path / "e.bin")
        q = enc.load_params(tmp_path / "e.bin", p.config)
        for k, t in p.items():
            assert q[k].data.tobytes() == t.data.tobytes()

    def test_incompatible_shapes(self, tmp_path):
        enc.save_params(enc.init(MLP), tmp_path / "e.bin")
        with pytest.raises(IncompatibleCheckpointError):
            enc.load_params(tmp_path / "e.bin", EncoderConfig(kind="mlp", hidden=(32,), embed_dim=8))
        with pytest.raises(IncompatibleCheckpointError):
            enc.load_params(tmp_path / "e.bin", EncoderConfig())


class TestContainer:
    def write(self, tmp_path):
        arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([np.pi], np.float32)}
        path = tmp_path / "t.bin"
        write_tensor_file(path, arrays, meta={"x": 1}, kind="demo")
        return path, arrays

    def test_round_trip(self, tmp_path):
        path, arrays = self.write(tmp_path)
        out, meta = read_tensor_file(path, kind="demo")
        assert meta == {"x": 1}
        for k in arrays:
            assert out[k].tobytes() == arrays[k].tobytes()

    def test_header_magic(self, tmp_path):
        path, _ = self.write(tmp_path)
        assert path.read_bytes()[:8] == b"INVSPRD\0"

    def test_bad_magic(self, tmp_path):
        path, _ = self.write(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as info:
            read_tensor_file(path)
        assert info.value.offset == 0

    def test_version(self, tmp_path):
        path, _ = self.write(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[8:12] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError, match="99"):
            read_tensor_file(path)

    def test_kind_mismatch(self, tmp_path):
        path, _ = self.write(tmp_path)
        with pytest.raises(FormatError):
            read_tensor_file(path, kind="encoder")

    @settings(max_examples=40, deadline=None)
    @given(cut=st.integers(1, 60))
    def test_truncation_detected(self, tmp_path_factory, cut):
        path, _ = self.write(tmp_path_factory.mktemp("t"))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - cut])
        with pytest.raises(FormatError):
            read_tensor_file(path)

    def test_single_bit_flip_detected(self, tmp_path):
        path, _ = self.write(tmp_path)
        blob = path.read_bytes()
        for pos in range(0, len(blob), 7):
            bad = bytearray(blob)
            bad[pos] ^= 0x01
            path.write_bytes(bytes(bad))
            with pytest.raises(FormatError):
                read_tensor_file(path)

    def test_trailing_bytes(self, tmp_path):
        path, _ = self.write(tmp_path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            read_tensor_file(path)
