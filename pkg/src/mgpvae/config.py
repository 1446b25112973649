"""Plain-text configuration: INI-style sections, strict keys, full defaults.

Every field has a default, so an empty config is valid; unknown sections or
keys are rejected with their ``[section] key`` path, as are out-of-range
values.  ``render()`` produces a canonical text (all values explicit) that
parses back to an identical config; checkpoints embed that snapshot.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError
from .nets import NetConfig
from .synthdata import DropKPerPatient, ExplicitAbsent, PhantomSpec
from .training import StagePlan


@dataclass
class Config:
    net: NetConfig
    gp_feature_dim: int
    gp_jitter: float
    gp_feature_scale: float | None
    stages: StagePlan
    phantom: PhantomSpec
    mask_policy: str
    mask_drop: int
    mask_cells: list
    seed: int

    def __post_init__(self):
        if self.phantom.side != self.net.input_side:
            raise ValidationError(
                f"[phantom] side ({self.phantom.side}) must equal [net] input_side "
                f"({self.net.input_side})"
            )
        if self.gp_feature_dim < 1:
            raise ValidationError("[gp] feature_dim must be >= 1")
        if not self.gp_jitter > 0:
            raise ValidationError("[gp] jitter must be positive")
        if self.mask_policy not in ("drop-k", "explicit"):
            raise ValidationError(f"[mask] policy must be 'drop-k' or 'explicit', got {self.mask_policy!r}")
        if self.mask_policy == "drop-k":
            if not 0 <= self.mask_drop <= self.phantom.modalities - 1:
                raise ValidationError(
                    f"[mask] drop must be in [0, modalities-1], got {self.mask_drop}"
                )
        for p, m in self.mask_cells:
            if not (0 <= p < self.phantom.patients and 0 <= m < self.phantom.modalities):
                raise ValidationError(f"[mask] cells: {p}:{m} outside the grid")

    def mask_policy_obj(self):
        if self.mask_policy == "drop-k":
            return DropKPerPatient(self.mask_drop)
        return ExplicitAbsent(list(self.mask_cells))

    def with_seed(self, seed: int) -> "Config":
        phantom = dataclasses.replace(self.phantom, seed=seed)
        return dataclasses.replace(self, seed=seed, phantom=phantom)

    def render(self) -> str:
        """Canonical full text; parsing it back yields an equal config."""
        gains = ",".join(repr(float(g)) for g in self.phantom.gains)
        biases = ",".join(repr(float(b)) for b in self.phantom.biases)
        gammas = ",".join(repr(float(g)) for g in self.phantom.gammas)
        cells = ",".join(f"{p}:{m}" for p, m in self.mask_cells)
        scale = "" if self.gp_feature_scale is None else repr(float(self.gp_feature_scale))
        return (
            "[net]\n"
            f"input_side = {self.net.input_side}\n"
            f"latent_dim = {self.net.latent_dim}\n"
            f"features = {self.net.features}\n"
            f"endpoint_features = {self.net.endpoint_features}\n"
            f"levels = {self.net.levels}\n"
            "\n[gp]\n"
            f"feature_dim = {self.gp_feature_dim}\n"
            f"jitter = {self.gp_jitter!r}\n"
            f"feature_scale = {scale}\n"
            "\n[stages]\n"
            f"stage1_epochs = {self.stages.stage1_epochs}\n"
            f"stage2_epochs = {self.stages.stage2_epochs}\n"
            f"stage3_epochs = {self.stages.stage3_epochs}\n"
            f"stage1_lr = {self.stages.stage1_lr!r}\n"
            f"stage2_lr = {self.stages.stage2_lr!r}\n"
            f"stage3_lr = {self.stages.stage3_lr!r}\n"
            "\n[phantom]\n"
            f"patients = {self.phantom.patients}\n"
            f"modalities = {self.phantom.modalities}\n"
            f"side = {self.phantom.side}\n"
            f"blobs = {self.phantom.blobs}\n"
            f"tumor = {'true' if self.phantom.tumor else 'false'}\n"
            f"gains = {gains}\n"
            f"biases = {biases}\n"
            f"gammas = {gammas}\n"
            f"noise_sd = {self.phantom.noise_sd!r}\n"
            "\n[mask]\n"
            f"policy = {self.mask_policy}\n"
            f"drop = {self.mask_drop}\n"
            f"cells = {cells}\n"
            "\n[run]\n"
            f"seed = {self.seed}\n"
        )


def _parse_int(text, path):
    try:
        return int(text)
    except ValueError:
        raise ValidationError(f"{path}: expected an integer, got {text!r}") from None


def _parse_float(text, path):
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"{path}: expected a number, got {text!r}") from None


def _parse_bool(text, path):
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValidationError(f"{path}: expected true/false, got {text!r}")


def _parse_floats(text, path):
    text = text.strip()
    if not text:
        return ()
    return tuple(_parse_float(part, path) for part in text.split(","))


def parse_cells(text, path="cells"):
    """Parse a 'p:m,p:m' cell list."""
    text = text.strip()
    if not text:
        return []
    cells = []
    for part in text.split(","):
        bits = part.strip().split(":")
        if len(bits) != 2:
            raise ValidationError(f"{path}: expected 'patient:modality', got {part!r}")
        cells.append((_parse_int(bits[0], path), _parse_int(bits[1], path)))
    return cells


_SCHEMA = {
    "net": {"input_side", "latent_dim", "features", "endpoint_features", "levels"},
    "gp": {"feature_dim", "jitter", "feature_scale"},
    "stages": {
        "stage1_epochs",
        "stage2_epochs",
        "stage3_epochs",
        "stage1_lr",
        "stage2_lr",
        "stage3_lr",
    },
    "phantom": {
        "patients",
        "modalities",
        "side",
        "blobs",
        "tumor",
        "gains",
        "biases",
        "gammas",
        "noise_sd",
    },
    "mask": {"policy", "drop", "cells"},
    "run": {"seed"},
}


def parse_config(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ValidationError(f"config parse error: {err}") from None
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValidationError(f"[{section}]: unknown section")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ValidationError(f"[{section}] {key}: unknown key")
            values[(section, key)] = raw

    def get(section, key, default=None):
        return values.get((section, key), default)

    seed = _parse_int(get("run", "seed", "0"), "[run] seed")
    levels_raw = get("net", "levels", "")
    net = NetConfig(
        input_side=_parse_int(get("net", "input_side", "16"), "[net] input_side"),
        latent_dim=_parse_int(get("net", "latent_dim", "16"), "[net] latent_dim"),
        features=_parse_int(get("net", "features", "32"), "[net] features"),
        endpoint_features=_parse_int(
            get("net", "endpoint_features", "16"), "[net] endpoint_features"
        ),
        levels=None if not str(levels_raw).strip() else _parse_int(levels_raw, "[net] levels"),
    )
    scale_raw = str(get("gp", "feature_scale", "")).strip()
    stages = StagePlan(
        stage1_epochs=_parse_int(get("stages", "stage1_epochs", "200"), "[stages] stage1_epochs"),
        stage2_epochs=_parse_int(get("stages", "stage2_epochs", "100"), "[stages] stage2_epochs"),
        stage3_epochs=_parse_int(get("stages", "stage3_epochs", "200"), "[stages] stage3_epochs"),
        stage1_lr=_parse_float(get("stages", "stage1_lr", "0.001"), "[stages] stage1_lr"),
        stage2_lr=_parse_float(get("stages", "stage2_lr", "0.01"), "[stages] stage2_lr"),
        stage3_lr=_parse_float(get("stages", "stage3_lr", "0.001"), "[stages] stage3_lr"),
    )
    phantom = PhantomSpec(
        patients=_parse_int(get("phantom", "patients", "8"), "[phantom] patients"),
        modalities=_parse_int(get("phantom", "modalities", "4"), "[phantom] modalities"),
        side=_parse_int(get("phantom", "side", str(net.input_side)), "[phantom] side"),
        blobs=_parse_int(get("phantom", "blobs", "4"), "[phantom] blobs"),
        tumor=_parse_bool(get("phantom", "tumor", "true"), "[phantom] tumor"),
        gains=_parse_floats(get("phantom", "gains", ""), "[phantom] gains"),
        biases=_parse_floats(get("phantom", "biases", ""), "[phantom] biases"),
        gammas=_parse_floats(get("phantom", "gammas", ""), "[phantom] gammas"),
        noise_sd=_parse_float(get("phantom", "noise_sd", "0.02"), "[phantom] noise_sd"),
        seed=seed,
    )
    try:
        return Config(
            net=net,
            gp_feature_dim=_parse_int(get("gp", "feature_dim", "8"), "[gp] feature_dim"),
            gp_jitter=_parse_float(get("gp", "jitter", "1e-4"), "[gp] jitter"),
            gp_feature_scale=None if not scale_raw else _parse_float(scale_raw, "[gp] feature_scale"),
            stages=stages,
            phantom=phantom,
            mask_policy=str(get("mask", "policy", "drop-k")).strip(),
            mask_drop=_parse_int(get("mask", "drop", "1"), "[mask] drop"),
            mask_cells=parse_cells(str(get("mask", "cells", "")), "[mask] cells"),
            seed=seed,
        )
    except ValidationError:
        raise
    except ValueError as err:
        raise ValidationError(str(err)) from None


def default_config() -> Config:
    return parse_config("")


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())
