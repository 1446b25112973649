"""Kronecker-structured GP prior over latent-code columns.

Samples live on a patients x modalities grid, flattened patient-major:
flat index ``n = patient * n_modalities + modality``.  Each latent dimension,
viewed across all samples, is modeled as a zero-mean Gaussian whose N x N
covariance factorizes as ``patient_cov (x) modality_cov`` (Kronecker product):
the patient factor is a linear kernel over learnable per-patient feature
vectors, the modality factor a free full-rank PD matrix held as a Cholesky
factor with a softplus-positive diagonal.

The log-density over a full grid is evaluated through the two small
eigendecompositions (the Kronecker eigenvalue/eigenvector identity); with
samples missing it falls back to a dense Cholesky of the present-sample
submatrix.  All covariance algebra runs in float64 internally regardless of
the float32 tensors around it; graph gradients are closed-form (no
differentiating through factorizations).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalError, ShapeError, ValidationError

LOG_2PI = float(np.log(2.0 * np.pi))


# -- presence mask -----------------------------------------------------------


class PresenceMask:
    """Boolean patients x modalities grid of which samples are available."""

    def __init__(self, grid):
        grid = np.asarray(grid, dtype=bool)
        if grid.ndim != 2:
            raise ShapeError("presence mask", "a 2-d [patients, modalities] grid", f"{grid.shape}")
        self.grid = grid

    @classmethod
    def full(cls, n_patients: int, n_modalities: int) -> "PresenceMask":
        return cls(np.ones((n_patients, n_modalities), dtype=bool))

    @property
    def n_patients(self) -> int:
        return self.grid.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.grid.shape[1]

    @property
    def is_full(self) -> bool:
        return bool(self.grid.all())

    @property
    def n_present(self) -> int:
        return int(self.grid.sum())

    def present_cells(self):
        """(patient, modality) pairs in patient-major order."""
        return [(int(p), int(m)) for p, m in np.argwhere(self.grid)]

    def absent_cells(self):
        return [(int(p), int(m)) for p, m in np.argwhere(~self.grid)]

    def flat_present(self) -> np.ndarray:
        """Flat sample indices (patient-major) of the present cells."""
        return np.flatnonzero(self.grid.reshape(-1))

    def n_present_for_patient(self, patient: int) -> int:
        return int(self.grid[patient].sum())

    def require_min_one_per_patient(self) -> None:
        bad = np.flatnonzero(~self.grid.any(axis=1))
        if bad.size:
            raise ValidationError(f"patients with no present modality: {bad.tolist()}")

    def __eq__(self, other):
        return isinstance(other, PresenceMask) and np.array_equal(self.grid, other.grid)


# -- kernel parameters --------------------------------------------------------


def tril_softplus(raw: np.ndarray) -> np.ndarray:
    """Lower-triangular factor with softplus-positive diagonal from raw entries."""
    raw = np.asarray(raw)
    diag = np.diag(raw)
    pos = np.where(diag > 0, diag + np.log1p(np.exp(-np.abs(diag))), np.log1p(np.exp(diag)))
    return np.tril(raw, -1) + np.diag(pos)


def tril_softplus_op(raw: Tensor) -> Tensor:
    """Graph version of :func:`tril_softplus`."""
    out = tril_softplus(raw.data).astype(raw.data.dtype)
    diag_raw = np.diag(raw.data).astype(np.float64)
    sig = 1.0 / (1.0 + np.exp(-diag_raw))

    def backward(g):
        return (np.tril(g, -1) + np.diag(np.diag(g) * sig),)

    return ad.apply_op("tril_softplus", out, (raw,), backward)


@dataclass
class GpParams:
    """Learnable state of the prior: patient features and the modality factor.

    ``patient_features`` is [P, Q]; ``modality_tril_raw`` is [M, M] with its
    strict lower triangle free and its diagonal passed through softplus, so
    the realized factor always has a positive diagonal and the modality
    covariance is positive definite by construction.
    """

    patient_features: np.ndarray
    modality_tril_raw: np.ndarray
    jitter: float = 1e-4

    def __post_init__(self):
        self.patient_features = np.asarray(self.patient_features, dtype=np.float32)
        self.modality_tril_raw = np.asarray(self.modality_tril_raw, dtype=np.float32)
        if self.patient_features.ndim != 2:
            raise ShapeError("patient features", "[P, Q]", f"{self.patient_features.shape}")
        m = self.modality_tril_raw.shape
        if len(m) != 2 or m[0] != m[1]:
            raise ShapeError("modality factor", "square [M, M]", f"{m}")
        if not self.jitter > 0:
            raise ValidationError(f"jitter must be positive, got {self.jitter}")

    @property
    def n_patients(self) -> int:
        return self.patient_features.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.modality_tril_raw.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.patient_features.shape[1]

    @classmethod
    def init(cls, n_patients: int, n_modalities: int, feature_dim: int, rng, feature_scale: float | None = None, jitter: float = 1e-4) -> "GpParams":
        """Random patient features (variance ~ 1/Q so the kernel starts near unit scale) and an identity modality factor."""
        if feature_scale is None:
            feature_scale = 1.0 / np.sqrt(feature_dim)
        x = rng.normal(0.0, feature_scale, size=(n_patients, feature_dim)).astype(np.float32)
        # softplus(diag) = 1 at init => identity modality covariance
        raw = np.diag(np.full(n_modalities, np.log(np.expm1(1.0)), dtype=np.float32))
        return cls(patient_features=x, modality_tril_raw=raw, jitter=jitter)

    def modality_tril(self) -> np.ndarray:
        return tril_softplus(self.modality_tril_raw)

    def patient_cov(self) -> np.ndarray:
        return patient_kernel(self.patient_features)

    def modality_cov(self) -> np.ndarray:
        return modality_kernel(self.modality_tril())


def patient_kernel(features: np.ndarray) -> np.ndarray:
    """Linear covariance between patients: Gram matrix of their feature rows."""
    f = np.asarray(features, dtype=np.float64)
    return f @ f.T


def modality_kernel(tril: np.ndarray) -> np.ndarray:
    """Full-rank modality covariance from its lower-triangular factor."""
    lw = np.asarray(tril, dtype=np.float64)
    if np.any(np.diag(lw) <= 0):
        raise ValidationError("modality factor must have a positive diagonal")
    cov = lw @ lw.T
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "modality covariance lost positive definiteness "
            f"(smallest eigenvalue {np.linalg.eigvalsh(cov).min():.3e})"
        ) from None
    return cov


# -- log-density --------------------------------------------------------------


def _chol_or_raise(mat: np.ndarray, jitter: float) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(mat).min())
        raise NumericalError(
            f"covariance not positive definite after jitter {jitter:g} "
            f"(smallest eigenvalue estimate {smallest:.3e})"
        ) from None


def _chol_solve(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))


class _KronFactorization:
    """Cached float64 factorization of the (possibly masked) prior covariance."""

    def __init__(self, patient_cov, modality_cov, mask: PresenceMask | None, jitter: float):
        self.patient_cov = np.asarray(patient_cov, dtype=np.float64)
        self.modality_cov = np.asarray(modality_cov, dtype=np.float64)
        self.jitter = float(jitter)
        self.n_patients = self.patient_cov.shape[0]
        self.n_modalities = self.modality_cov.shape[0]
        self.mask = mask
        self.full = mask is None or mask.is_full
        if self.full:
            lx, ux = np.linalg.eigh(self.patient_cov)
            lw, uw = np.linalg.eigh(self.modality_cov)
            self.eig_patient = (lx, ux)
            self.eig_modality = (lw, uw)
            self.variances = lx[:, None] * lw[None, :] + self.jitter
            if np.any(self.variances <= 0.0):
                raise NumericalError(
                    f"covariance not positive definite after jitter {jitter:g} "
                    f"(smallest eigenvalue estimate {float(self.variances.min() - self.jitter):.3e})"
                )
            self.present = np.arange(self.n_patients * self.n_modalities)
        else:
            self.present = mask.flat_present()
            dense = np.kron(self.patient_cov, self.modality_cov)
            sub = dense[np.ix_(self.present, self.present)]
            sub = sub + self.jitter * np.eye(sub.shape[0])
            self.chol = _chol_or_raise(sub, self.jitter)

    @property
    def n_samples(self) -> int:
        return self.present.size

    def logdet(self) -> float:
        if self.full:
            return float(np.sum(np.log(self.variances)))
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """(K_present + jitter I)^-1 @ rhs via the cached factorization."""
        if not self.full:
            return _chol_solve(self.chol, rhs)
        lx, ux = self.eig_patient
        lw, uw = self.eig_modality
        cube = rhs.reshape(self.n_patients, self.n_modalities, -1)
        rot = np.einsum("pa,pml->aml", ux, cube)
        rot = np.einsum("mb,aml->abl", uw, rot)
        rot /= self.variances[:, :, None]
        back = np.einsum("pa,abl->pbl", ux, rot)
        back = np.einsum("mb,pbl->pml", uw, back)
        return back.reshape(rhs.shape)

    def quad_and_logpdf(self, latents: np.ndarray):
        """Total log-density of the columns of ``latents`` under the prior."""
        z = np.asarray(latents, dtype=np.float64)
        n, n_cols = z.shape
        if n != self.n_samples:
            raise ShapeError("latent rows", self.n_samples, n)
        if self.full:
            lx, ux = self.eig_patient
            lw, uw = self.eig_modality
            cube = z.reshape(self.n_patients, self.n_modalities, n_cols)
            rot = np.einsum("pa,pml->aml", ux, cube)
            rot = np.einsum("mb,aml->abl", uw, rot)
            quad = float(np.sum(rot * rot / self.variances[:, :, None]))
        else:
            quad = float(np.sum(z * _chol_solve(self.chol, z)))
        logpdf = -0.5 * quad - 0.5 * n_cols * self.logdet() - 0.5 * n * n_cols * LOG_2PI
        return quad, logpdf

    def inverse(self) -> np.ndarray:
        if self.full:
            n = self.n_samples
            lx, ux = self.eig_patient
            lw, uw = self.eig_modality
            basis = np.kron(ux, uw)
            return (basis / self.variances.reshape(-1)[None, :]) @ basis.T
        return _chol_solve(self.chol, np.eye(self.n_samples))


def kron_mvn_logpdf(latents, patient_cov, modality_cov, mask: PresenceMask | None = None, jitter: float = 0.0) -> float:
    """Sum over latent columns of log N(column; 0, K_present + jitter I).

    With a full (or absent) mask the Kronecker eigendecomposition route is
    used; with samples missing, a dense Cholesky of the present submatrix.
    Row order of ``latents`` must match the mask's patient-major present
    order.
    """
    fact = _KronFactorization(patient_cov, modality_cov, mask, jitter)
    _, logpdf = fact.quad_and_logpdf(np.asarray(latents, dtype=np.float64))
    return logpdf


def _logpdf_input_grads(fact: _KronFactorization, z: np.ndarray):
    """Closed-form d(logpdf)/d(latents, patient_cov, modality_cov)."""
    p, m = fact.n_patients, fact.n_modalities
    n_cols = z.shape[1]
    alpha = fact.solve(z)
    d_latents = -alpha
    inv = fact.inverse()
    sens = 0.5 * (alpha @ alpha.T) - 0.5 * n_cols * inv
    if not fact.full:
        full = np.zeros((p * m, p * m))
        full[np.ix_(fact.present, fact.present)] = sens
        sens = full
    blocks = sens.reshape(p, m, p, m)
    d_patient = np.einsum("pmqr,mr->pq", blocks, fact.modality_cov)
    d_modality = np.einsum("pmqr,pq->mr", blocks, fact.patient_cov)
    return d_latents, d_patient, d_modality


def gp_prior_logdensity(latents: Tensor, patient_cov: Tensor, modality_cov: Tensor, mask: PresenceMask | None, jitter: float) -> Tensor:
    """Graph node for the prior log-density, differentiable in all three inputs."""
    fact = _KronFactorization(patient_cov.data, modality_cov.data, mask, jitter)
    z = np.asarray(latents.data, dtype=np.float64)
    _, logpdf = fact.quad_and_logpdf(z)

    def backward(g):
        scale = float(g)
        d_latents, d_patient, d_modality = _logpdf_input_grads(fact, z)
        return (scale * d_latents, scale * d_patient, scale * d_modality)

    out = np.asarray(logpdf, dtype=latents.data.dtype)
    return ad.apply_op(
        "gp_prior_logdensity", out, (latents, patient_cov, modality_cov), backward
    )


# -- prediction and sampling ---------------------------------------------------


def gp_predict(target, latents, params: GpParams, mask: PresenceMask):
    """Posterior mean (per latent column) and shared variance for an absent cell.

    The prior is i.i.d. across latent columns, so the predictive variance is
    a single scalar shared by all of them.
    """
    p_t, m_t = target
    if mask.grid[p_t, m_t]:
        raise ValidationError(f"target cell {target} is present, nothing to predict")
    if mask.n_present_for_patient(p_t) < 1:
        raise ValidationError(f"target patient {p_t} has no present modality")
    z = np.asarray(latents, dtype=np.float64)
    fact = _KronFactorization(params.patient_cov(), params.modality_cov(), mask, params.jitter)
    if z.shape[0] != fact.n_samples:
        raise ShapeError("latent rows", fact.n_samples, z.shape[0])
    k_x, k_w = fact.patient_cov, fact.modality_cov
    cells = mask.present_cells()
    cross = np.array([k_x[p_t, p] * k_w[m_t, m] for p, m in cells])
    alpha = fact.solve(z)
    mean = cross @ alpha
    self_var = k_x[p_t, p_t] * k_w[m_t, m_t] + params.jitter
    var = float(self_var - cross @ fact.solve(cross[:, None])[:, 0])
    if var < -1e-6:
        raise NumericalError(f"negative predictive variance {var:.3e} for target {target}")
    return mean, max(var, 0.0)


def sample_prior(params: GpParams, n_columns: int, seed) -> np.ndarray:
    """Draw an N x L matrix whose columns are i.i.d. N(0, K + jitter I) over the full grid."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p, m = params.n_patients, params.n_modalities
    lx, ux = np.linalg.eigh(params.patient_cov())
    lw, uw = np.linalg.eigh(params.modality_cov())
    variances = np.maximum(lx[:, None] * lw[None, :] + params.jitter, 0.0)
    draws = rng.standard_normal((p, m, n_columns))
    draws *= np.sqrt(variances)[:, :, None]
    back = np.einsum("pa,abl->pbl", ux, draws)
    back = np.einsum("mb,pbl->pml", uw, back)
    return back.reshape(p * m, n_columns).astype(np.float32)
