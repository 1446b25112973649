"""On-disk format tests: bit-exact round-trips, malformed-input diagnostics."""

import numpy as np
import pytest

from mgpvae import io as mio
from mgpvae.errors import ValidationError
from mgpvae.gp import PresenceMask
from mgpvae.metrics import MetricRow
from mgpvae.synthdata import PhantomSpec, ViewGrid, generate


class TestVolumeFormat:
    def test_roundtrip_bytes_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        vol = rng.standard_normal((5, 6, 7)).astype(np.float32)
        p1, p2 = tmp_path / "a.vol", tmp_path / "b.vol"
        mio.write_volume(p1, vol)
        loaded = mio.read_volume(p1)
        np.testing.assert_array_equal(loaded, vol)
        mio.write_volume(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.vol"
        path.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(ValidationError, match="magic"):
            mio.read_volume(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.vol"
        mio.write_volume(path, np.zeros((2, 2, 2), np.float32))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValidationError, match="payload"):
            mio.read_volume(path)

    def test_non_3d_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            mio.write_volume(tmp_path / "x.vol", np.zeros((2, 2), np.float32))


class TestManifest:
    def test_roundtrip(self, tmp_path):
        entries = [
            mio.ManifestEntry(0, 0, "volumes/p000_m00.vol", True),
            mio.ManifestEntry(0, 1, "volumes/p000_m01.vol", False),
        ]
        path = tmp_path / "manifest.tsv"
        mio.write_manifest(path, entries)
        assert mio.read_manifest(path) == entries

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("0\t0\tx.vol\t1\nbroken line\n")
        with pytest.raises(ValidationError, match=":2"):
            mio.read_manifest(path)


class TestDataset:
    @pytest.fixture
    def grid(self):
        grid = generate(PhantomSpec(patients=2, modalities=2, side=8, seed=1))
        mask = PresenceMask(np.array([[True, True], [True, False]]))
        return grid.with_mask(mask)

    def test_write_load_roundtrip(self, tmp_path, grid):
        mio.write_dataset(tmp_path, grid)
        loaded = mio.load_dataset(tmp_path)
        np.testing.assert_array_equal(loaded.volumes, grid.volumes)
        assert loaded.mask == grid.mask

    def test_rerun_byte_identical(self, tmp_path, grid):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        mio.write_dataset(d1, grid)
        mio.write_dataset(d2, grid)
        for rel in sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file()):
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel

    def test_absent_sidecar_optional(self, tmp_path, grid):
        mio.write_dataset(tmp_path, grid)
        (tmp_path / mio.volume_filename(1, 1)).unlink()  # drop the held-out truth
        loaded = mio.load_dataset(tmp_path)
        assert not loaded.mask.grid[1, 1]
        assert np.all(loaded.volumes[1, 1] == 0.0)

    def test_incomplete_manifest_rejected(self, tmp_path, grid):
        mio.write_dataset(tmp_path, grid)
        manifest = tmp_path / mio.MANIFEST_NAME
        lines = manifest.read_text().splitlines()
        manifest.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValidationError, match="full"):
            mio.load_dataset(tmp_path)


class TestCheckpointFormat:
    def make_checkpoint(self):
        rng = np.random.default_rng(3)
        tensors = {
            "enc.w": rng.standard_normal((3, 4)).astype(np.float32),
            "gp.x": rng.standard_normal((2, 2)).astype(np.float32),
            "scalar": np.float32(1.5).reshape(()),
        }
        return mio.Checkpoint(
            tensors=tensors,
            config_text="[net]\ninput_side = 8\n",
            stage=2,
            epoch=17,
            rng_state=np.random.default_rng(9).bit_generator.state,
        )

    def test_roundtrip_bytes_identical(self, tmp_path):
        ckpt = self.make_checkpoint()
        p1, p2 = tmp_path / "a.mgpc", tmp_path / "b.mgpc"
        mio.save_checkpoint(p1, ckpt)
        loaded = mio.load_checkpoint(p1)
        assert loaded.stage == 2 and loaded.epoch == 17
        assert loaded.config_text == ckpt.config_text
        assert loaded.rng_state == ckpt.rng_state
        for name, arr in ckpt.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name], arr)
        mio.save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rng_state_restores_generator(self, tmp_path):
        gen = np.random.default_rng(42)
        gen.standard_normal(17)  # advance
        ckpt = self.make_checkpoint()
        ckpt.rng_state = gen.bit_generator.state
        path = tmp_path / "c.mgpc"
        mio.save_checkpoint(path, ckpt)
        restored = np.random.default_rng(0)
        restored.bit_generator.state = mio.load_checkpoint(path).rng_state
        np.testing.assert_array_equal(restored.standard_normal(5), gen.standard_normal(5))

    def test_corrupt_files_rejected(self, tmp_path):
        path = tmp_path / "bad.mgpc"
        path.write_bytes(b"XXXX" + b"\0" * 20)
        with pytest.raises(ValidationError, match="magic"):
            mio.load_checkpoint(path)
        ckpt = self.make_checkpoint()
        mio.save_checkpoint(path, ckpt)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValidationError, match="truncated"):
            mio.load_checkpoint(path)


class TestMetricRows:
    def test_roundtrip_exact(self, tmp_path):
        rows = [
            MetricRow(0, 1, 3, "mgpvae", 0.012345678901234, 21.75, 7.25),
            MetricRow(4, 2, 2, "mean", 1.5e-8, 99.0, 3.0),
        ]
        path = tmp_path / "rows.tsv"
        mio.write_metric_rows(path, rows)
        assert mio.read_metric_rows(path) == rows

    def test_malformed_row_lineno(self, tmp_path):
        path = tmp_path / "rows.tsv"
        path.write_text("0\t0\t3\tmgpvae\tnot-a-number\t1.0\t1.0\n")
        with pytest.raises(ValidationError, match=":1"):
            mio.read_metric_rows(path)


class TestEpochLog:
    def test_written_and_parsable(self, tmp_path):
        from mgpvae.training import EpochRecord

        records = [
            EpochRecord(1, 0, 10.0, 5.0, 3.0, 1.0, 1.0, 0.25),
            EpochRecord(2, 0, 9.0, 5.0, 2.0, 1.0, 1.0, 0.125),
        ]
        path = tmp_path / "log.tsv"
        mio.write_epoch_log(path, records)
        lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
        assert len(lines) == 2
        fields = lines[0].split("\t")
        assert fields[0] == "1" and float(fields[2]) == 10.0
