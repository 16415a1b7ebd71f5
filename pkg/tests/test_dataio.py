import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cifar_dir, needs_cifar
from invspread.dataio import (
    CIFAR_RECORD,
    Dataset,
    SyntheticSpec,
    channel_stats,
    epoch_permutation,
    load_cifar10,
    make_synthetic,
    minibatches,
    read_cifar_file,
    split_per_class,
    write_records,
)
from invspread.errors import ContractError, FormatError, IngestionError


def two_record_bytes():
    rec0 = bytes([3]) + bytes(range(256)) * 12
    rec1 = bytes([7]) + bytes((i * 7) % 256 for i in range(3072))
    return rec0 + rec1


class TestCifarFormat:
    def test_two_records_exact(self, tmp_path):
        raw = two_record_bytes()
        p = tmp_path / "batch.bin"
        p.write_bytes(raw)
        pixels, labels = read_cifar_file(p)
        assert labels.tolist() == [3, 7]
        assert pixels.shape == (2, 3, 32, 32)
        np.testing.assert_array_equal(pixels[0].reshape(-1), np.frombuffer(raw[1:3073], np.uint8))
        np.testing.assert_array_equal(pixels[1].reshape(-1), np.frombuffer(raw[3074:], np.uint8))
        # plane order: red block first, row-major
        assert pixels[1, 1, 0, 0] == raw[3074 + 1024]
        assert pixels[1, 0, 1, 0] == raw[3074 + 32]

    def test_truncated_offset(self, tmp_path):
        p = tmp_path / "short.bin"
        p.write_bytes(bytes(3072))
        with pytest.raises(FormatError) as info:
            read_cifar_file(p)
        assert info.value.offset == 3072

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(IngestionError, match="data_batch_1.bin"):
            load_cifar10(tmp_path, "train")

    def test_bad_label(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(bytes([10]) + bytes(3072))
        with pytest.raises(FormatError):
            read_cifar_file(p)

    def test_lossless_round_trip(self, tmp_path):
        raw = two_record_bytes()
        src = tmp_path / "in.bin"
        src.write_bytes(raw)
        pixels, labels = read_cifar_file(src)
        out = tmp_path / "out.bin"
        write_records(Dataset(pixels, labels, 10), out)
        assert out.read_bytes() == raw

    def test_synthetic_export_uses_record_format(self, tmp_path):
        ds = make_synthetic(SyntheticSpec(num_clusters=3, points_per_cluster=4))
        out = tmp_path / "syn.bin"
        write_records(ds, out)
        assert out.stat().st_size == len(ds) * CIFAR_RECORD
        pixels, labels = read_cifar_file(out)
        np.testing.assert_array_equal(pixels, ds.pixels)
        np.testing.assert_array_equal(labels, ds.labels)


@needs_cifar
class TestRealCifar:
    def test_train_counts(self):
        ds = load_cifar10(cifar_dir(), "train")
        assert len(ds) == 50000
        assert np.bincount(ds.labels, minlength=10).tolist() == [5000] * 10

    def test_test_counts(self):
        assert len(load_cifar10(cifar_dir(), "test")) == 10000

    def test_normalisation_constants(self):
        mean, std = channel_stats(load_cifar10(cifar_dir(), "train"))
        np.testing.assert_allclose(mean, [0.4914, 0.4822, 0.4465], atol=5e-5)
        np.testing.assert_allclose(std, [0.2470, 0.2435, 0.2616], atol=5e-5)


class TestDataset:
    def test_immutable(self):
        ds = make_synthetic(SyntheticSpec(points_per_cluster=2))
        with pytest.raises(ValueError):
            ds.pixels[0, 0, 0, 0] = 1

    def test_rejects_empty_and_bad_labels(self):
        with pytest.raises(ContractError):
            Dataset(np.zeros((0, 3, 32, 32), np.uint8), np.zeros(0, int), 2)
        with pytest.raises(ContractError):
            Dataset(np.zeros((1, 3, 32, 32), np.uint8), np.array([2]), 2)

    def test_channel_stats_oracle(self):
        gen = np.random.default_rng(0)
        ds = Dataset(gen.integers(0, 256, size=(5, 3, 32, 32), dtype=np.uint8), np.zeros(5, int), 1)
        mean, std = channel_stats(ds)
        x = ds.pixels.astype(np.float64) / 255.0
        for c in range(3):
            np.testing.assert_allclose(mean[c], x[:, c].mean(), rtol=1e-12)
            np.testing.assert_allclose(std[c], x[:, c].std(), rtol=1e-12)


class TestSynthetic:
    def test_zero_spread_collapses(self):
        ds = make_synthetic(SyntheticSpec(num_clusters=2, points_per_cluster=3, dim=4, cluster_spread=0.0, seed=7))
        assert len(ds) == 6
        for c in range(2):
            members = ds.pixels[ds.labels == c]
            assert all(np.array_equal(members[0], m) for m in members)
        assert not np.array_equal(ds.pixels[0], ds.pixels[3])

    def test_deterministic(self):
        spec = SyntheticSpec(seed=11)
        assert make_synthetic(spec) == make_synthetic(spec)
        assert make_synthetic(spec) != make_synthetic(SyntheticSpec(seed=12))

    def test_raw_pixel_loo_1nn(self):
        ds = make_synthetic(SyntheticSpec(num_clusters=4, points_per_cluster=50, dim=32, cluster_spread=0.1))
        x = ds.pixels.reshape(len(ds), -1).astype(np.float64)
        d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        acc = np.mean(ds.labels[d.argmin(1)] == ds.labels)
        assert acc >= 0.99

    def test_uses_full_byte_range(self):
        ds = make_synthetic(SyntheticSpec())
        assert ds.pixels.min() == 0 and ds.pixels.max() == 255

    @pytest.mark.parametrize("kw", [dict(num_clusters=1), dict(dim=1), dict(cluster_spread=-0.1)])
    def test_spec_invariants(self, kw):
        with pytest.raises(ContractError):
            SyntheticSpec(**kw)

    def test_split_per_class(self):
        ds = make_synthetic(SyntheticSpec(num_clusters=3, points_per_cluster=10))
        tr, te = split_per_class(ds, 4, seed=1)
        assert np.bincount(te.labels).tolist() == [4, 4, 4]
        assert len(tr) == 18
        again = split_per_class(ds, 4, seed=1)
        assert again[1] == te


class TestMinibatches:
    def make(self, n):
        return Dataset(np.zeros((n, 3, 32, 32), np.uint8), np.zeros(n, int), 1)

    def test_partition(self):
        batches = list(minibatches(self.make(4), 2, epoch_seed=3))
        assert len(batches) == 2
        assert sorted(np.concatenate([b for b, _ in batches]).tolist()) == [0, 1, 2, 3]

    def test_drop_last(self):
        batches = list(minibatches(self.make(5), 2, epoch_seed=3))
        assert len(batches) == 2
        assert len(set(np.concatenate([b for b, _ in batches]).tolist())) == 4

    def test_seeds(self):
        assert np.array_equal(epoch_permutation(50, 1), epoch_permutation(50, 1))
        assert not np.array_equal(epoch_permutation(50, 1), epoch_permutation(50, 2))

    def test_batch_size_bounds(self):
        with pytest.raises(ContractError):
            list(minibatches(self.make(3), 4, 0))
        with pytest.raises(ContractError):
            list(minibatches(self.make(3), 0, 0))

    def test_records_follow_ids(self):
        gen = np.random.default_rng(0)
        ds = Dataset(gen.integers(0, 256, size=(6, 3, 32, 32), dtype=np.uint8), np.zeros(6, int), 1)
        for ids, pixels in minibatches(ds, 3, 9):
            np.testing.assert_array_equal(pixels, ds.pixels[ids])


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 60), data=st.data())
def test_epoch_is_permutation(n, data):
    batch = data.draw(st.integers(1, n))
    seed = data.draw(st.integers(0, 2**63 - 1))
    ids = [i for b, _ in minibatches(TestMinibatches().make(n), batch, seed) for i in b.tolist()]
    assert len(ids) == (n // batch) * batch
    assert len(set(ids)) == len(ids)
    assert set(ids) <= set(range(n))
