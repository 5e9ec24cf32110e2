import pytest

from mdet3d.configio import (
    dataset_spec_from_config,
    dataset_spec_to_kv,
    dump_config,
    embed_specs,
    extract_specs,
    load_config,
    model_config_from_config,
    parse_config_text,
    range_to_str,
    train_config_from_config,
)
from mdet3d.datasets import DatasetSpec, SizeDistribution, SyntheticDomainConfig
from mdet3d.errors import ConfigError, FormatError
from mdet3d.geometry import Range3D


class TestParsing:
    def test_basic_keys_comments_blank_lines(self):
        kv = parse_config_text("# header\n\na = 1\n b.c = hello world \n")
        assert kv == {"a": "1", "b.c": "hello world"}

    def test_bad_line_raises_with_line_number(self):
        with pytest.raises(FormatError, match="line 2"):
            parse_config_text("a = 1\nnonsense\n")

    def test_include_resolves_relative(self, tmp_path):
        (tmp_path / "base.cfg").write_text("shared = yes\n")
        (tmp_path / "main.cfg").write_text("include base.cfg\nlocal = 1\n")
        kv = load_config(tmp_path / "main.cfg")
        assert kv == {"shared": "yes", "local": "1"}

    def test_later_keys_override_includes(self, tmp_path):
        (tmp_path / "base.cfg").write_text("k = old\n")
        (tmp_path / "main.cfg").write_text("include base.cfg\nk = new\n")
        assert load_config(tmp_path / "main.cfg")["k"] == "new"

    def test_dump_round_trip(self):
        kv = {"b": "2", "a": "1"}
        assert parse_config_text(dump_config(kv)) == kv
        assert dump_config(kv).startswith("a = 1\n")


class TestDatasetSpec:
    def spec(self):
        rng = Range3D(-10, 10, -10, 10, -3, 1)
        syn = SyntheticDomainConfig(
            rng_seed=7, range=rng, points_per_frame=256, sensor_height=1.8,
            beam_density=0.5, object_count=(2, 4),
            sizes={0: SizeDistribution(4.6, 1.9, 1.7, 0.3, 0.15, 0.1)},
            intensity_mean=0.7, falloff_range=14.0,
        )
        return DatasetSpec("beta", rng, dz_shift=1.8,
                           taxonomy={"Van": 0, "Person_sitting": 1}, synthetic=syn)

    def test_round_trip_through_kv(self):
        spec = self.spec()
        back = dataset_spec_from_config(dataset_spec_to_kv(spec))
        assert back == spec

    def test_missing_name_rejected(self):
        with pytest.raises(ConfigError):
            dataset_spec_from_config({"range": "-1,1,-1,1,-1,1"})

    def test_unknown_taxonomy_target(self):
        with pytest.raises(ConfigError):
            dataset_spec_from_config(
                {"name": "x", "range": "-1,1,-1,1,-1,1", "taxonomy.Van": "Truck"}
            )

    def test_embed_extract_round_trip(self):
        specs = [self.spec(), DatasetSpec("alpha", Range3D(-5, 5, -5, 5, -2, 2))]
        kv = embed_specs({"steps": "10"}, specs)
        assert kv["n_datasets"] == "2"
        assert extract_specs(kv) == specs

    def test_range_to_str(self):
        assert range_to_str(Range3D(-1, 1, -2, 2, -3, 3)) == "-1,1,-2,2,-3,3"


class TestTypedConfigs:
    def test_model_defaults_and_overrides(self):
        cfg = model_config_from_config({"channels": "8", "stat_align": "false"})
        assert cfg.channels == 8 and cfg.stat_align is False and cfg.grid_size == 32

    def test_bad_bool(self):
        with pytest.raises(ConfigError):
            model_config_from_config({"stat_align": "maybe"})

    def test_bad_range_arity(self):
        with pytest.raises(ConfigError):
            model_config_from_config({"common_range": "1,2,3"})

    def test_train_config_with_named_subsample(self):
        kv = {"steps": "5", "subsample.beta": "0.1", "base_lr": "0.001"}
        cfg = train_config_from_config(kv, ["alpha", "beta"])
        assert cfg.steps == 5 and cfg.subsample == {1: 0.1} and cfg.base_lr == 0.001

    def test_train_config_with_index_subsample(self):
        cfg = train_config_from_config({"subsample.0": "0.5"})
        assert cfg.subsample == {0: 0.5}
