"""Full-batch loss, Adam, and the three-stage optimization schedule.

The loss is the exact negative evidence lower bound with a single
reparameterized sample per present volume:

    sum_n ||y_n - decode(z_n)||^2 / (2 sigma_y^2)   (reconstruction)
  + (N K / 2) log sigma_y^2                          (noise-scale term)
  - log p(Z | patient, modality kernels)             (prior term, true
                                                      log-density incl. its
                                                      2-pi constant)
  - 1/2 sum_{n,l} log sigma_e^2                      (posterior entropy part)

Stage 1 trains encoder/decoder/noise scale with the prior's
identity-covariance special case; stage 2 freezes them and fits only the GP
kernel parameters (100 epochs at lr 0.01 by default); stage 3 optimizes
everything jointly.  The GP log-density couples every present sample, so
each epoch is one full-batch step.  All randomness flows through one seeded
generator whose state rides along in checkpoints, making runs bit-for-bit
reproducible and resumable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import io as mio
from .autodiff import Tensor, no_grad
from .errors import NumericalError, ShapeError, ValidationError
from .gp import (
    LOG_2PI,
    GpParams,
    PresenceMask,
    gp_prior_logdensity,
    tril_softplus_op,
)
from .nets import DecoderParams, EncoderParams, NetConfig, decode, encode, reparameterize
from .synthdata import ViewGrid

TERM_NAMES = ("recon", "gp", "reg", "noise")


@dataclass
class StagePlan:
    """Epoch counts and learning rates of the three stages."""

    stage1_epochs: int = 200
    stage2_epochs: int = 100
    stage3_epochs: int = 200
    stage1_lr: float = 0.001
    stage2_lr: float = 0.01
    stage3_lr: float = 0.001

    def __post_init__(self):
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("stage1_lr", "stage2_lr", "stage3_lr"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs + self.stage3_epochs

    def epochs(self, stage: int) -> int:
        return getattr(self, f"stage{stage}_epochs")

    def lr(self, stage: int) -> float:
        return getattr(self, f"stage{stage}_lr")


class Adam:
    """Standard Adam with bias correction over a named parameter set."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


class ModelState:
    """Every learnable tensor of the model, with stable checkpoint names."""

    def __init__(self, cfg: NetConfig, n_patients: int, n_modalities: int, gp_feature_dim: int, jitter: float, rng, gp_feature_scale: float | None = None):
        self.cfg = cfg
        self.jitter = float(jitter)
        self.enc = EncoderParams(cfg, rng)
        self.dec = DecoderParams(cfg, rng)
        seed_gp = GpParams.init(
            n_patients, n_modalities, gp_feature_dim, rng, feature_scale=gp_feature_scale, jitter=jitter
        )
        self.patient_features = Tensor(seed_gp.patient_features, requires_grad=True)
        self.modality_tril_raw = Tensor(seed_gp.modality_tril_raw, requires_grad=True)
        self.log_noise = Tensor(np.float32(0.0), requires_grad=True)  # sigma_y = 1

    def named(self) -> dict:
        out = {}
        out.update(self.enc.named())
        out.update(self.dec.named())
        out["gp.patient_features"] = self.patient_features
        out["gp.modality_tril_raw"] = self.modality_tril_raw
        out["loss.log_noise"] = self.log_noise
        return out

    def groups(self) -> dict:
        """Parameter groups as reported by gradient checks and stage freezing."""
        return {
            "encoder": self.enc.named(),
            "decoder": self.dec.named(),
            "patient_features": {"gp.patient_features": self.patient_features},
            "modality_factor": {"gp.modality_tril_raw": self.modality_tril_raw},
            "noise_scale": {"loss.log_noise": self.log_noise},
        }

    def gp_params(self) -> GpParams:
        return GpParams(
            patient_features=self.patient_features.data,
            modality_tril_raw=self.modality_tril_raw.data,
            jitter=self.jitter,
        )

    def sigma_y(self) -> float:
        return float(np.exp(self.log_noise.data))

    def load_named(self, arrays: dict) -> None:
        own = self.named()
        for name, tensor in own.items():
            if name not in arrays:
                raise ValidationError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != tensor.data.shape:
                raise ShapeError(f"checkpoint parameter {name}", f"{tensor.data.shape}", f"{arr.shape}")
            tensor.data = arr.copy()


def prior_terms(model: ModelState, latents: Tensor, mask: PresenceMask | None, kind: str) -> Tensor:
    """Negative prior log-density as a graph node.

    ``kind`` "standard" is the identity-covariance special case used in
    stage 1; "gp" builds the learned Kronecker covariance.
    """
    if kind == "standard":
        n, n_cols = latents.shape
        return ad.sum_all(ad.square(latents)) * 0.5 + 0.5 * n * n_cols * LOG_2PI
    if kind != "gp":
        raise ValidationError(f"unknown prior kind {kind!r}")
    cov_p = ad.matmul(model.patient_features, ad.transpose(model.patient_features))
    tril = tril_softplus_op(model.modality_tril_raw)
    cov_m = ad.matmul(tril, ad.transpose(tril))
    return ad.neg(gp_prior_logdensity(latents, cov_p, cov_m, mask, model.jitter))


def loss_terms(volumes: Tensor, model: ModelState, mask: PresenceMask | None, noise_draws: np.ndarray, prior_kind: str = "gp"):
    """Full-batch loss and its term breakdown for the present-sample batch.

    ``volumes`` is the [n_present, S, S, S, 1] constant batch in the mask's
    patient-major order; ``noise_draws`` the fixed reparameterization draws.
    """
    n = volumes.shape[0]
    sample_dim = int(np.prod(volumes.shape[1:]))
    mu, sigma = encode(volumes, model.enc, model.cfg)
    z = reparameterize(mu, sigma, noise_draws)
    recon_vols = decode(z, model.dec, model.cfg)
    squared = ad.sum_all(ad.square(volumes - recon_vols))
    recon = squared * ad.exp(model.log_noise * -2.0) * 0.5
    noise_term = model.log_noise * float(n * sample_dim)  # (N K / 2) log sigma_y^2
    gp_term = prior_terms(model, z, mask, prior_kind)
    reg = ad.neg(ad.sum_all(ad.log(sigma)))  # -(1/2) sum log sigma^2
    total = recon + noise_term + gp_term + reg
    terms = {"recon": recon.item(), "gp": gp_term.item(), "reg": reg.item(), "noise": noise_term.item()}
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss term '{name}'")
    return total, terms


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    total: float
    recon: float
    gp: float
    reg: float
    noise: float
    seconds: float


class TrainingDiverged(NumericalError):
    """Raised when the loss goes non-finite; the trainer holds the last good state."""


class Trainer:
    """Runs the staged schedule over one dataset, one epoch at a time."""

    def __init__(self, grid: ViewGrid, mask: PresenceMask, net_cfg: NetConfig, plan: StagePlan, gp_feature_dim: int = 8, jitter: float = 1e-4, gp_feature_scale: float | None = None, seed: int = 0, config_text: str = ""):
        mask.require_min_one_per_patient()
        if mask.grid.shape != (grid.n_patients, grid.n_modalities):
            raise ShapeError("training mask", f"{(grid.n_patients, grid.n_modalities)}", f"{mask.grid.shape}")
        if grid.side != net_cfg.input_side:
            raise ShapeError("dataset side", net_cfg.input_side, grid.side)
        self.grid = grid
        self.mask = mask
        self.plan = plan
        self.config_text = config_text
        self.rng = np.random.default_rng(seed)
        self.model = ModelState(
            net_cfg,
            grid.n_patients,
            grid.n_modalities,
            gp_feature_dim,
            jitter,
            self.rng,
            gp_feature_scale=gp_feature_scale,
        )
        self.volumes = Tensor(grid.present_volumes()[..., None])
        self.n_present = self.volumes.shape[0]
        self.latent_dim = net_cfg.latent_dim
        self.records: list[EpochRecord] = []
        self.stage = 1
        self.epoch_in_stage = 0
        self._adam: Adam | None = None
        self._stage_cache = None
        self._last_good = self._snapshot()

    # -- stage plumbing ----------------------------------------------------

    def _trainable(self, stage: int) -> dict:
        groups = self.model.groups()
        if stage == 1:
            sel = ("encoder", "decoder", "noise_scale")
        elif stage == 2:
            sel = ("patient_features", "modality_factor")
        else:
            sel = tuple(groups)
        merged = {}
        for g in sel:
            merged.update(groups[g])
        return merged

    def _snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.model.named().items()}

    def _restore(self, snapshot: dict) -> None:
        for k, t in self.model.named().items():
            t.data = snapshot[k].copy()

    def _ensure_stage(self):
        while self.stage <= 3 and self.epoch_in_stage >= self.plan.epochs(self.stage):
            self.stage += 1
            self.epoch_in_stage = 0
            self._adam = None
            self._stage_cache = None
        if self.stage > 3:
            return False
        if self._adam is None:
            self._adam = Adam(self._trainable(self.stage), lr=self.plan.lr(self.stage))
        if self.stage == 2 and self._stage_cache is None:
            with no_grad():
                mu, sigma = encode(self.volumes, self.model.enc, self.model.cfg)
            self._stage_cache = (mu.data.copy(), sigma.data.copy())
        return True

    @property
    def finished(self) -> bool:
        return self.epochs_done >= self.plan.total_epochs

    @property
    def epochs_done(self) -> int:
        done = 0
        for s in (1, 2, 3):
            if s < self.stage:
                done += self.plan.epochs(s)
        return done + (self.epoch_in_stage if self.stage <= 3 else 0)

    # -- epochs -------------------------------------------------------------

    def _draw_noise(self) -> np.ndarray:
        return self.rng.standard_normal((self.n_present, self.latent_dim), dtype=np.float32)

    def _epoch_full_graph(self, stage: int) -> dict:
        noise = self._draw_noise()
        prior_kind = "standard" if stage == 1 else "gp"
        self._adam.zero_grad()
        total, terms = loss_terms(self.volumes, self.model, self.mask, noise, prior_kind)
        total.backward()
        self._adam.step()
        terms["total"] = total.item()
        return terms

    def _epoch_gp_only(self) -> dict:
        # Encoder and decoder are frozen in stage 2, so their outputs are
        # constants; only the GP subgraph needs gradients.
        mu, sigma = self._stage_cache
        noise = self._draw_noise()
        z = mu + noise * sigma
        with no_grad():
            recon_vols = decode(Tensor(z), self.model.dec, self.model.cfg)
        resid = (self.volumes.data - recon_vols.data).astype(np.float64)
        squared = float(np.sum(resid * resid))
        sample_dim = int(np.prod(self.volumes.shape[1:]))
        log_noise = float(self.model.log_noise.data)
        recon = 0.5 * squared * np.exp(-2.0 * log_noise)
        noise_term = log_noise * self.n_present * sample_dim
        reg = -float(np.sum(np.log(sigma.astype(np.float64))))
        self._adam.zero_grad()
        gp_term = prior_terms(self.model, Tensor(z), self.mask, "gp")
        gp_term.backward()
        self._adam.step()
        terms = {
            "recon": recon,
            "gp": gp_term.item(),
            "reg": reg,
            "noise": noise_term,
        }
        terms["total"] = sum(terms.values())
        for name, value in terms.items():
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss term '{name}'")
        return terms

    def run_epoch(self) -> EpochRecord:
        if not self._ensure_stage():
            raise ValidationError("training already finished")
        t0 = time.perf_counter()
        try:
            if self.stage == 2:
                terms = self._epoch_gp_only()
            else:
                terms = self._epoch_full_graph(self.stage)
        except NumericalError as err:
            self._restore(self._last_good)
            raise TrainingDiverged(
                f"stage {self.stage} epoch {self.epoch_in_stage}: {err}"
            ) from err
        record = EpochRecord(
            stage=self.stage,
            epoch=self.epoch_in_stage,
            total=terms["total"],
            recon=terms["recon"],
            gp=terms["gp"],
            reg=terms["reg"],
            noise=terms["noise"],
            seconds=time.perf_counter() - t0,
        )
        self.records.append(record)
        self.epoch_in_stage += 1
        self._last_good = self._snapshot()
        return record

    def run(self, stop_after_total_epochs: int | None = None):
        """Run to the end of the plan (or until the given total epoch count)."""
        limit = self.plan.total_epochs if stop_after_total_epochs is None else stop_after_total_epochs
        while self.epochs_done < limit and not self.finished:
            self.run_epoch()
        return self.records

    # -- checkpointing -------------------------------------------------------

    def to_checkpoint(self) -> mio.Checkpoint:
        tensors = {k: t.data.copy() for k, t in self.model.named().items()}
        if self._adam is not None and self.epoch_in_stage > 0:
            for name in self._adam.params:
                tensors[f"adam.m.{name}"] = self._adam.m[name].copy()
                tensors[f"adam.v.{name}"] = self._adam.v[name].copy()
            tensors["adam.t"] = np.array([self._adam.t], dtype=np.float32)
        return mio.Checkpoint(
            tensors=tensors,
            config_text=self.config_text,
            stage=self.stage,
            epoch=self.epoch_in_stage,
            rng_state=self.rng.bit_generator.state,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: mio.Checkpoint, grid: ViewGrid, mask: PresenceMask, net_cfg: NetConfig, plan: StagePlan, gp_feature_dim: int = 8, jitter: float = 1e-4) -> "Trainer":
        trainer = cls(
            grid,
            mask,
            net_cfg,
            plan,
            gp_feature_dim=gp_feature_dim,
            jitter=jitter,
            seed=0,
            config_text=ckpt.config_text,
        )
        trainer.stage = ckpt.stage
        trainer.epoch_in_stage = ckpt.epoch
        model_names = set(trainer.model.named())
        adam_names = {n for n in ckpt.tensors if n.startswith("adam.")}
        unknown = set(ckpt.tensors) - model_names - adam_names
        if unknown:
            raise ValidationError(f"checkpoint contains unknown tensors: {sorted(unknown)}")
        trainer.model.load_named(ckpt.tensors)
        trainer.rng.bit_generator.state = ckpt.rng_state
        if ckpt.stage <= 3 and ckpt.epoch > 0:
            if "adam.t" not in ckpt.tensors:
                raise ValidationError("mid-stage checkpoint lacks optimizer state")
            adam = Adam(trainer._trainable(ckpt.stage), lr=plan.lr(ckpt.stage))
            adam.t = int(ckpt.tensors["adam.t"][0])
            for name in adam.params:
                for prefix, table in (("adam.m.", adam.m), ("adam.v.", adam.v)):
                    key = prefix + name
                    if key not in ckpt.tensors:
                        raise ValidationError(f"checkpoint is missing optimizer tensor {key!r}")
                    table[name] = np.asarray(ckpt.tensors[key], dtype=np.float32).copy()
            expected_adam = {f"adam.{kind}.{n}" for n in adam.params for kind in ("m", "v")} | {"adam.t"}
            if adam_names != expected_adam:
                raise ValidationError(
                    f"checkpoint optimizer tensors do not match stage {ckpt.stage}: "
                    f"{sorted(adam_names ^ expected_adam)}"
                )
            trainer._adam = adam
        elif adam_names:
            raise ValidationError("stage-boundary checkpoint should carry no optimizer state")
        trainer._last_good = trainer._snapshot()
        return trainer


_GRADCHECK_GROUPS = (
    ("enc.", "encoder"),
    ("dec.", "decoder"),
    ("gp.patient_features", "patient_features"),
    ("gp.modality_tril_raw", "modality_factor"),
    ("loss.log_noise", "noise_scale"),
)


def gradcheck_group(param_name: str) -> str:
    for prefix, group in _GRADCHECK_GROUPS:
        if param_name.startswith(prefix):
            return group
    raise ValidationError(f"parameter {param_name!r} belongs to no gradient-check group")


def run_reference_gradcheck(seed: int = 0, step: float = 1e-2, tol: float = 1e-3, max_coords: int = 24):
    """Finite-difference check of the full loss on a tiny 2x2-grid model.

    Returns the per-tensor report and a per-group {name: (rel_err, passed)}
    summary covering encoder, decoder, patient features, modality factor and
    the noise scale.
    """
    from .synthdata import PhantomSpec, generate

    cfg = NetConfig(input_side=8, latent_dim=4)
    grid = generate(PhantomSpec(patients=2, modalities=2, side=8, seed=seed))
    rng = np.random.default_rng(seed)
    model = ModelState(cfg, 2, 2, gp_feature_dim=4, jitter=1e-4, rng=rng)
    # At sigma_y = 1 on z-scored data the noise-scale gradient is the
    # difference of two ~N*K terms; float32 forward error (~5e-5 relative)
    # then dwarfs the tiny gradient itself.  The harness draws the noise
    # scale away from that cancellation point so every group's gradient is
    # resolvable at the stated tolerance.
    model.log_noise.data = rng.uniform(0.25, 0.45, size=()).astype(np.float32)
    volumes = Tensor(grid.present_volumes()[..., None])
    noise = rng.standard_normal((grid.n_samples, cfg.latent_dim), dtype=np.float32)

    def f():
        return loss_terms(volumes, model, grid.mask, noise, "gp")[0]

    report = ad.grad_check(
        f, model.named(), step=step, tol=tol, max_coords=max_coords, seed=seed,
        group_of=gradcheck_group,
    )
    groups = {name: (g.rel_err, g.passed) for name, g in report.groups.items()}
    return report, groups


def run_stages(grid: ViewGrid, mask: PresenceMask, net_cfg: NetConfig, plan: StagePlan, gp_feature_dim: int = 8, jitter: float = 1e-4, gp_feature_scale: float | None = None, seed: int = 0, config_text: str = ""):
    """Train the full schedule; returns (final checkpoint, per-epoch records)."""
    trainer = Trainer(
        grid,
        mask,
        net_cfg,
        plan,
        gp_feature_dim=gp_feature_dim,
        jitter=jitter,
        gp_feature_scale=gp_feature_scale,
        seed=seed,
        config_text=config_text,
    )
    records = trainer.run()
    return trainer.to_checkpoint(), records
