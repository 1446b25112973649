"""On-disk formats: volumes, dataset manifests, checkpoints, metric rows.

All binary payloads are little-endian float32 and round-trip bit-exactly:
writing what was just read reproduces the original bytes.  Text formats are
tab-separated, one record per line, with ``#`` comment lines allowed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .gp import PresenceMask
from .metrics import MetricRow
from .synthdata import ViewGrid

VOLUME_MAGIC = b"MGPV"
CHECKPOINT_MAGIC = b"MGPC"
FORMAT_VERSION = 1
DTYPE_F32_LE = 1


# -- volume files -------------------------------------------------------------


def write_volume(path, volume: np.ndarray) -> None:
    """Write one [D, H, W] float32 volume."""
    volume = np.asarray(volume, dtype="<f4")
    if volume.ndim != 3:
        raise ValidationError(f"{path}: volumes are 3-d, got shape {volume.shape}")
    header = VOLUME_MAGIC + struct.pack("<IIIII", FORMAT_VERSION, DTYPE_F32_LE, *volume.shape)
    Path(path).write_bytes(header + volume.tobytes())


def read_volume(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 24 or blob[:4] != VOLUME_MAGIC:
        raise ValidationError(f"{path}: not a volume file (bad magic)")
    version, dtype_code, d, h, w = struct.unpack("<IIIII", blob[4:24])
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported volume format version {version}")
    if dtype_code != DTYPE_F32_LE:
        raise ValidationError(f"{path}: unsupported dtype code {dtype_code}")
    expected = 24 + 4 * d * h * w
    if len(blob) != expected:
        raise ValidationError(f"{path}: payload length {len(blob) - 24} != {4 * d * h * w}")
    return np.frombuffer(blob[24:], dtype="<f4").reshape(d, h, w).copy()


# -- dataset manifests ----------------------------------------------------------


@dataclass
class ManifestEntry:
    patient: int
    modality: int
    path: str
    present: bool


MANIFEST_NAME = "manifest.tsv"


def write_manifest(path, entries) -> None:
    lines = ["# patient\tmodality\tpath\tpresent"]
    for e in entries:
        lines.append(f"{e.patient}\t{e.modality}\t{e.path}\t{int(e.present)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    entries = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValidationError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            entries.append(
                ManifestEntry(
                    patient=int(parts[0]),
                    modality=int(parts[1]),
                    path=parts[2],
                    present=bool(int(parts[3])),
                )
            )
        except ValueError as err:
            raise ValidationError(f"{path}:{lineno}: {err}") from None
    return entries


def volume_filename(patient: int, modality: int) -> str:
    return f"volumes/p{patient:03d}_m{modality:02d}.vol"


def write_dataset(out_dir, grid: ViewGrid) -> Path:
    """Write every cell's volume (absent ones are the held-out ground truth)
    plus the manifest recording presence flags."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    entries = []
    for p in range(grid.n_patients):
        for m in range(grid.n_modalities):
            rel = volume_filename(p, m)
            write_volume(out_dir / rel, grid.volumes[p, m])
            entries.append(
                ManifestEntry(patient=p, modality=m, path=rel, present=bool(grid.mask.grid[p, m]))
            )
    manifest = out_dir / MANIFEST_NAME
    write_manifest(manifest, entries)
    return manifest


def load_dataset(data_dir) -> ViewGrid:
    """Rebuild the grid (volumes plus presence mask) from a dataset directory.

    Present cells must have their volume on disk.  Absent cells may lack
    theirs (no ground-truth sidecar); those load as zeros.
    """
    data_dir = Path(data_dir)
    entries = read_manifest(data_dir / MANIFEST_NAME)
    if not entries:
        raise ValidationError(f"{data_dir}: empty manifest")
    n_p = max(e.patient for e in entries) + 1
    n_m = max(e.modality for e in entries) + 1
    seen = {(e.patient, e.modality) for e in entries}
    if len(seen) != len(entries):
        raise ValidationError(f"{data_dir}: duplicate manifest cells")
    if len(entries) != n_p * n_m:
        raise ValidationError(f"{data_dir}: manifest does not cover the full {n_p}x{n_m} grid")
    present = np.zeros((n_p, n_m), dtype=bool)
    loaded = []
    shape = None
    for e in entries:
        present[e.patient, e.modality] = e.present
        target = data_dir / e.path
        if not e.present and not target.exists():
            continue
        vol = read_volume(target)
        if shape is None:
            shape = vol.shape
        elif vol.shape != shape:
            raise ValidationError(f"{target}: volume shape {vol.shape} differs from {shape}")
        loaded.append((e.patient, e.modality, vol))
    if shape is None:
        raise ValidationError(f"{data_dir}: no volume files found")
    volumes = np.zeros((n_p, n_m) + shape, dtype=np.float32)
    for p, m, vol in loaded:
        volumes[p, m] = vol
    return ViewGrid(volumes=volumes, mask=PresenceMask(present))


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Named-tensor archive plus everything needed to resume bit-for-bit."""

    tensors: dict
    config_text: str
    stage: int
    epoch: int
    rng_state: dict


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.tensors)
    header = {
        "version": FORMAT_VERSION,
        "config": ckpt.config_text,
        "cursor": {"stage": ckpt.stage, "epoch": ckpt.epoch},
        "rng": ckpt.rng_state,
        "tensors": [
            {"name": n, "shape": list(np.asarray(ckpt.tensors[n]).shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(blob)), blob]
    for n in names:
        parts.append(np.ascontiguousarray(ckpt.tensors[n], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ValidationError(f"{path}: corrupt checkpoint header: {err}") from None
    offset = 16 + header_len
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise ValidationError(f"{path}: truncated payload for tensor {spec['name']!r}")
        tensors[spec["name"]] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise ValidationError(f"{path}: {len(blob) - offset} trailing bytes after payloads")
    rng_state = header["rng"]
    return Checkpoint(
        tensors=tensors,
        config_text=header["config"],
        stage=int(header["cursor"]["stage"]),
        epoch=int(header["cursor"]["epoch"]),
        rng_state=rng_state,
    )


# -- metric rows and the epoch log ------------------------------------------------


def write_metric_rows(path, rows) -> None:
    lines = ["# patient\tmodality\tn_present\tmethod\tmse\tpsnr\tpeak"]
    for r in rows:
        lines.append(
            f"{r.patient}\t{r.modality}\t{r.n_present}\t{r.method}"
            f"\t{r.mse!r}\t{r.psnr!r}\t{r.peak!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_metric_rows(path):
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise ValidationError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
        try:
            rows.append(
                MetricRow(
                    patient=int(parts[0]),
                    modality=int(parts[1]),
                    n_present=int(parts[2]),
                    method=parts[3],
                    mse=float(parts[4]),
                    psnr=float(parts[5]),
                    peak=float(parts[6]),
                )
            )
        except ValueError as err:
            raise ValidationError(f"{path}:{lineno}: {err}") from None
    return rows


def write_epoch_log(path, records) -> None:
    lines = ["# stage\tepoch\ttotal\trecon\tgp\treg\tnoise\tseconds"]
    for r in records:
        lines.append(
            f"{r.stage}\t{r.epoch}\t{r.total!r}\t{r.recon!r}\t{r.gp!r}"
            f"\t{r.reg!r}\t{r.noise!r}\t{r.seconds:.3f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
