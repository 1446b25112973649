"""Config parsing: defaults, strictness, canonical round-trip."""

import dataclasses

import pytest

from mgpvae.config import default_config, parse_cells, parse_config
from mgpvae.errors import ValidationError


class TestDefaults:
    def test_empty_text_gives_full_defaults(self):
        cfg = parse_config("")
        assert cfg.net.input_side == 16
        assert cfg.net.latent_dim == 16
        assert cfg.net.features == 32
        assert cfg.net.endpoint_features == 16
        assert cfg.stages.stage1_epochs == 200
        assert cfg.stages.stage2_epochs == 100
        assert cfg.stages.stage3_epochs == 200
        assert cfg.stages.stage1_lr == 0.001
        assert cfg.stages.stage2_lr == 0.01
        assert cfg.stages.stage3_lr == 0.001
        assert cfg.phantom.patients == 8 and cfg.phantom.modalities == 4
        assert cfg.gp_feature_dim == 8 and cfg.gp_jitter == 1e-4
        assert cfg.seed == 0

    def test_paper_scale_config_accepted(self):
        cfg = parse_config(
            "[net]\ninput_side = 64\nlatent_dim = 1024\n"
            "[gp]\nfeature_dim = 64\n"
            "[phantom]\nside = 64\n"
        )
        assert cfg.net.levels == 4 and cfg.net.latent_dim == 1024
        assert cfg.gp_feature_dim == 64


class TestStrictness:
    def test_unknown_section(self):
        with pytest.raises(ValidationError, match=r"\[nett\]"):
            parse_config("[nett]\ninput_side = 16\n")

    def test_unknown_key_with_path(self):
        with pytest.raises(ValidationError, match=r"\[net\] inputside"):
            parse_config("[net]\ninputside = 16\n")

    def test_bad_value_with_path(self):
        with pytest.raises(ValidationError, match=r"\[net\] input_side"):
            parse_config("[net]\ninput_side = banana\n")

    def test_out_of_range_values(self):
        with pytest.raises(ValidationError):
            parse_config("[stages]\nstage2_epochs = 0\n")
        with pytest.raises(ValidationError):
            parse_config("[gp]\njitter = 0\n")
        with pytest.raises(ValidationError, match=r"\[mask\] drop"):
            parse_config("[mask]\ndrop = 4\n")

    def test_side_consistency_enforced(self):
        with pytest.raises(ValidationError, match="input_side"):
            parse_config("[phantom]\nside = 32\n")

    def test_explicit_cells_validated(self):
        with pytest.raises(ValidationError, match="outside"):
            parse_config("[mask]\npolicy = explicit\ncells = 99:0\n")


class TestRoundTrip:
    def test_render_parse_identity(self):
        cfg = parse_config(
            "[net]\ninput_side = 8\nlatent_dim = 4\n"
            "[phantom]\nside = 8\npatients = 2\nmodalities = 2\nnoise_sd = 0.05\n"
            "[stages]\nstage1_epochs = 3\nstage2_epochs = 2\nstage3_epochs = 1\n"
            "[mask]\npolicy = explicit\ncells = 0:1,1:0\n"
            "[run]\nseed = 77\n"
        )
        again = parse_config(cfg.render())
        assert again == cfg
        assert again.render() == cfg.render()

    def test_with_seed_rebuilds_phantom(self):
        cfg = default_config().with_seed(123)
        assert cfg.seed == 123 and cfg.phantom.seed == 123

    def test_mask_policy_objects(self):
        from mgpvae.synthdata import DropKPerPatient, ExplicitAbsent

        assert isinstance(default_config().mask_policy_obj(), DropKPerPatient)
        cfg = parse_config("[mask]\npolicy = explicit\ncells = 1:2\n")
        obj = cfg.mask_policy_obj()
        assert isinstance(obj, ExplicitAbsent) and obj.cells == [(1, 2)]


class TestParseCells:
    def test_basic(self):
        assert parse_cells("0:1,2:3") == [(0, 1), (2, 3)]
        assert parse_cells("") == []
        assert parse_cells(" 1:0 , 2:1 ") == [(1, 0), (2, 1)]

    def test_malformed(self):
        with pytest.raises(ValidationError):
            parse_cells("1-2")
        with pytest.raises(ValidationError):
            parse_cells("1:a")
