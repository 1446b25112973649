"""Missing-view prediction from a trained model, plus the two baselines.

The model's route has three steps: encode every present volume to its
posterior mean, regress the absent cell's latent vector through the learned
patient x modality GP (posterior mean, one shared variance), decode.  No
sampling happens at inference, so results are deterministic given a
checkpoint and dataset.

Baselines: ``interp_baseline`` decodes the average of the target patient's
present-view latent means (contrast-agnostic); ``mean_baseline`` is the
voxelwise mean of all present training volumes of the target modality
(patient-agnostic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import NumericalError, ValidationError
from .gp import PresenceMask, gp_predict
from .nets import decode, encode
from .synthdata import ViewGrid
from .training import ModelState

_ENCODE_CHUNK = 16


@dataclass
class ImputationRequest:
    """Which absent cells to predict, from which trained model and dataset."""

    model: ModelState
    grid: ViewGrid
    mask: PresenceMask
    targets: list = field(default_factory=list)

    def __post_init__(self):
        if self.mask.grid.shape != (self.grid.n_patients, self.grid.n_modalities):
            raise ValidationError("mask shape does not match the dataset grid")
        self.mask.require_min_one_per_patient()
        self.targets = [(int(p), int(m)) for p, m in self.targets]
        bad = [t for t in self.targets if self.mask.grid[t]]
        if bad:
            raise ValidationError(f"target cells are present, nothing to impute: {bad}")
        if len(set(self.targets)) != len(self.targets):
            raise ValidationError("duplicate target cells")

    def present_volumes(self) -> np.ndarray:
        """Present volumes in the request mask's patient-major order."""
        return np.stack([self.grid.volumes[p, m] for p, m in self.mask.present_cells()])


@dataclass
class ImputedCell:
    volume: np.ndarray  # [S, S, S]
    latent: np.ndarray  # [L]
    variance: float
    n_present: int  # present modalities of the target's patient


def encode_means(volumes: np.ndarray, model: ModelState) -> np.ndarray:
    """Posterior-mean latents for a [n, S, S, S] stack, chunked for memory."""
    outs = []
    with no_grad():
        for start in range(0, volumes.shape[0], _ENCODE_CHUNK):
            batch = Tensor(volumes[start : start + _ENCODE_CHUNK][..., None])
            mu, _ = encode(batch, model.enc, model.cfg)
            outs.append(mu.data)
    return np.concatenate(outs, axis=0)


def _decode_one(latent: np.ndarray, model: ModelState) -> np.ndarray:
    with no_grad():
        vol = decode(Tensor(np.asarray(latent, dtype=np.float32)), model.dec, model.cfg)
    return vol.data[..., 0]


def impute(request: ImputationRequest) -> dict:
    """GP-predicted volumes for each target cell, keyed by (patient, modality)."""
    latents = encode_means(request.present_volumes(), request.model)
    params = request.model.gp_params()
    results = {}
    for target in request.targets:
        try:
            mean, var = gp_predict(target, latents, params, request.mask)
        except NumericalError as err:
            raise NumericalError(f"target {target}: {err}") from err
        results[target] = ImputedCell(
            volume=_decode_one(mean, request.model),
            latent=np.asarray(mean, dtype=np.float32),
            variance=var,
            n_present=request.mask.n_present_for_patient(target[0]),
        )
    return results


def interp_baseline(request: ImputationRequest) -> dict:
    """Decode the arithmetic mean of the target patient's present-view latents."""
    latents = encode_means(request.present_volumes(), request.model)
    cells = request.mask.present_cells()
    results = {}
    for target in request.targets:
        p_t = target[0]
        rows = [i for i, (p, _) in enumerate(cells) if p == p_t]
        if not rows:
            raise ValidationError(f"target patient {p_t} has no present modality")
        mean_latent = latents[rows].mean(axis=0)
        results[target] = _decode_one(mean_latent, request.model)
    return results


def mean_baseline(request: ImputationRequest) -> dict:
    """Voxelwise mean over present training volumes of the target's modality."""
    results = {}
    for target in request.targets:
        m_t = target[1]
        donors = np.flatnonzero(request.mask.grid[:, m_t])
        if donors.size == 0:
            raise ValidationError(f"modality {m_t} has no present volume to average")
        results[target] = (
            request.grid.volumes[donors, m_t].astype(np.float64).mean(axis=0).astype(np.float32)
        )
    return results
