import os
from dataclasses import fields

import pytest
import yaml

from fdg import config as cfgmod
from fdg.config import EvalConfig, RunConfig, load_config
from fdg.errors import UsageError
from fdg.synthdata import GenConfig
from fdg.trainer import TrainConfig

DEFAULT_YAML = os.path.join(os.path.dirname(__file__), "..", "configs", "default.yaml")


def test_no_file_gives_defaults():
    assert load_config() == RunConfig()


def test_example_config_is_complete_and_matches_defaults():
    with open(DEFAULT_YAML) as fh:
        raw = yaml.safe_load(fh)
    for section, cls in (("gen", GenConfig), ("train", TrainConfig), ("eval", EvalConfig)):
        assert set(raw[section]) == {f.name for f in fields(cls)}, section
    assert load_config(DEFAULT_YAML) == RunConfig()


def test_overrides_are_typed():
    c = load_config(overrides=["train.lambda_dg=0.1", "train.lr=1e-3", "gen.seed=7",
                               "train.specific_warm_start=false", "eval.far=[0.1, 0.01]",
                               "train.conv_layers=[[8, 5]]"])
    assert c.train.lambda_dg == 0.1 and c.train.lr == 0.001 and c.gen.seed == 7
    assert c.train.specific_warm_start is False
    assert c.eval.far == (0.1, 0.01)
    assert c.train.conv_layers == ((8, 5),)


def test_dump_round_trips(tmp_path):
    c = load_config(overrides=["train.n_domains=4", "eval.domains=out", "train.cluster_layers=[1]"])
    path = tmp_path / "c.yaml"
    path.write_text(c.dump())
    assert load_config(str(path)) == c


@pytest.mark.parametrize("override", ["train.lamda_dg=0.3", "model.lr=1", "lr=0.1", "train.lr",
                                      "train.seed=1.5", "train.specific_warm_start=1",
                                      "train.lambda_dg=-1", "eval.domains=both", "train.lr=abc"])
def test_bad_overrides_rejected(override):
    with pytest.raises(UsageError):
        load_config(overrides=[override])


@pytest.mark.parametrize("text", ["gen: {sede: 1}\n", "training: {}\n", "- 1\n", "gen: 3\n", "gen: [\n"])
def test_bad_files_rejected(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(UsageError):
        load_config(str(path))


def test_overrides_apply_after_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train: {lambda_dg: 0.5}\n")
    assert load_config(str(path), ["train.lambda_dg=0.2"]).train.lambda_dg == 0.2
    assert load_config(str(path)).train.lambda_dg == 0.5


def test_sections_cover_all_classes():
    assert set(cfgmod.SECTIONS) == {f.name for f in fields(RunConfig)}
