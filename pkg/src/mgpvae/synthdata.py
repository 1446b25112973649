"""Deterministic multi-view phantom volumes for desk-scale experiments.

Each patient gets a private anatomy field (a sum of seeded Gaussian blobs,
optionally one compact high-amplitude "tumor" blob); every modality view of
that patient is a fixed contrast transform of the same field,
``gain * anatomy**gamma + bias`` plus voxel noise, then z-scored per modality
across the dataset.  Views of one patient therefore share structure while
differing in contrast, which is exactly the correlation the latent GP prior
is supposed to pick up and exploit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .gp import PresenceMask

_DEFAULT_CONTRASTS = (
    # gain, bias, gamma per modality; cycled when more modalities are asked for
    (1.0, 0.0, 1.0),
    (1.6, 0.3, 0.7),
    (-0.9, 0.1, 1.5),
    (1.3, -0.2, 2.2),
)


@dataclass
class PhantomSpec:
    """Recipe for one synthetic dataset; every field has a workable default."""

    patients: int = 8
    modalities: int = 4
    side: int = 16
    blobs: int = 4
    tumor: bool = True
    gains: tuple = ()
    biases: tuple = ()
    gammas: tuple = ()
    noise_sd: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.patients < 2 or self.modalities < 2:
            raise ValidationError("phantom needs at least 2 patients and 2 modalities")
        if self.side < 8 or self.side & (self.side - 1):
            raise ValidationError(f"side must be a power of two >= 8, got {self.side}")
        if self.blobs < 1:
            raise ValidationError("blobs must be >= 1")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")
        defaults = [
            _DEFAULT_CONTRASTS[m % len(_DEFAULT_CONTRASTS)] for m in range(self.modalities)
        ]
        self.gains = tuple(self.gains) or tuple(d[0] for d in defaults)
        self.biases = tuple(self.biases) or tuple(d[1] for d in defaults)
        self.gammas = tuple(self.gammas) or tuple(d[2] for d in defaults)
        for name, seq in (("gains", self.gains), ("biases", self.biases), ("gammas", self.gammas)):
            if len(seq) != self.modalities:
                raise ValidationError(f"{name} must list one value per modality")
        if any(g == 0 for g in self.gains):
            raise ValidationError("gains must be nonzero")
        if any(g <= 0 for g in self.gammas):
            raise ValidationError("gammas must be positive")


@dataclass
class ViewGrid:
    """The dataset: a patients x modalities grid of volumes plus its presence mask.

    Absent cells still carry their ground-truth volume (a held-out sidecar
    for evaluation); training code must only read cells the mask marks
    present.
    """

    volumes: np.ndarray  # [P, M, S, S, S] float32
    mask: PresenceMask

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        if self.volumes.ndim != 5:
            raise ShapeError("view grid", "[P, M, S, S, S]", f"{self.volumes.shape}")
        if self.mask.grid.shape != self.volumes.shape[:2]:
            raise ShapeError("presence mask", f"{self.volumes.shape[:2]}", f"{self.mask.grid.shape}")

    @property
    def n_patients(self) -> int:
        return self.volumes.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.volumes.shape[1]

    @property
    def side(self) -> int:
        return self.volumes.shape[2]

    @property
    def n_samples(self) -> int:
        return self.n_patients * self.n_modalities

    @property
    def sample_dim(self) -> int:
        return int(np.prod(self.volumes.shape[2:]))

    def present_volumes(self) -> np.ndarray:
        """Present cells' volumes stacked in the mask's patient-major order."""
        cells = self.mask.present_cells()
        return np.stack([self.volumes[p, m] for p, m in cells])

    def with_mask(self, mask: PresenceMask) -> "ViewGrid":
        return ViewGrid(volumes=self.volumes, mask=mask)


def _gaussian_blob(coords, center, widths, amplitude) -> np.ndarray:
    gx, gy, gz = coords
    q = (
        ((gx - center[0]) / widths[0]) ** 2
        + ((gy - center[1]) / widths[1]) ** 2
        + ((gz - center[2]) / widths[2]) ** 2
    )
    return amplitude * np.exp(-0.5 * q)


def generate(spec: PhantomSpec) -> ViewGrid:
    """Render the phantom dataset; a pure function of the spec (seed included)."""
    rng = np.random.default_rng(spec.seed)
    s = spec.side
    axes = np.arange(s, dtype=np.float64)
    coords = np.meshgrid(axes, axes, axes, indexing="ij")
    volumes = np.empty((spec.patients, spec.modalities, s, s, s), dtype=np.float64)
    for p in range(spec.patients):
        anatomy = np.zeros((s, s, s), dtype=np.float64)
        for _ in range(spec.blobs):
            center = rng.uniform(0.2 * s, 0.8 * s, size=3)
            widths = rng.uniform(0.10 * s, 0.25 * s, size=3)
            amplitude = rng.uniform(0.5, 1.0)
            anatomy += _gaussian_blob(coords, center, widths, amplitude)
        if spec.tumor:
            center = rng.uniform(0.3 * s, 0.7 * s, size=3)
            widths = rng.uniform(0.06 * s, 0.14 * s, size=3)
            amplitude = rng.uniform(1.5, 2.0)
            anatomy += _gaussian_blob(coords, center, widths, amplitude)
        for m in range(spec.modalities):
            view = spec.gains[m] * anatomy ** spec.gammas[m] + spec.biases[m]
            if spec.noise_sd > 0:
                view = view + rng.normal(0.0, spec.noise_sd, size=view.shape)
            volumes[p, m] = view
    # z-score each modality over the whole dataset
    flat = volumes.reshape(spec.patients, spec.modalities, -1)
    mean = flat.mean(axis=(0, 2), keepdims=True)
    sd = flat.std(axis=(0, 2), keepdims=True)
    if np.any(sd == 0):
        raise ValidationError("degenerate phantom: a modality has zero variance")
    flat -= mean
    flat /= sd
    return ViewGrid(
        volumes=volumes.astype(np.float32),
        mask=PresenceMask.full(spec.patients, spec.modalities),
    )


# -- masking policies ----------------------------------------------------------


@dataclass
class DropKPerPatient:
    """Uniformly drop ``k`` cells from every patient's row."""

    k: int


@dataclass
class ExplicitAbsent:
    """Mark exactly these (patient, modality) cells absent."""

    cells: list = field(default_factory=list)


def mask_dataset(grid: ViewGrid, policy, seed: int = 0) -> PresenceMask:
    """Build a presence mask; deterministic in (policy, seed).

    Policies must leave at least one present modality per patient.
    """
    p, m = grid.n_patients, grid.n_modalities
    present = np.ones((p, m), dtype=bool)
    if isinstance(policy, DropKPerPatient):
        k = policy.k
        if k < 0 or k > m - 1:
            raise ValidationError(
                f"drop-k must satisfy 0 <= k <= modalities-1, got k={k} with {m} modalities"
            )
        rng = np.random.default_rng(seed)
        for patient in range(p):
            drop = rng.choice(m, size=k, replace=False)
            present[patient, drop] = False
    elif isinstance(policy, ExplicitAbsent):
        seen = set()
        for cell in policy.cells:
            pi, mi = int(cell[0]), int(cell[1])
            if not (0 <= pi < p and 0 <= mi < m):
                raise ValidationError(f"absent cell {(pi, mi)} outside the {p}x{m} grid")
            if (pi, mi) in seen:
                raise ValidationError(f"absent cell {(pi, mi)} listed twice")
            seen.add((pi, mi))
            present[pi, mi] = False
        if not present.any(axis=1).all():
            bad = np.flatnonzero(~present.any(axis=1)).tolist()
            raise ValidationError(f"policy leaves patients {bad} with no present modality")
    else:
        raise ValidationError(f"unknown mask policy {policy!r}")
    mask = PresenceMask(present)
    mask.require_min_one_per_patient()
    return mask
