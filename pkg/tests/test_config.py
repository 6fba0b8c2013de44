import math
from pathlib import Path

import pytest

from causal_sfda import config as cf
from causal_sfda.data import ScenarioSpec, SyntheticDomainSpec

META = "[meta]\nformat = causal-sfda-config\nversion = 1\n"


def write(tmp_path, body, name="c.ini"):
    p = tmp_path / name
    p.write_text(META + body)
    return p


def test_meta_only_file_gives_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv("CAUSAL_SFDA_SEED", raising=False)
    cfg = cf.load_config(write(tmp_path, ""))
    assert cfg.adapt.alpha == 0.003 and cfg.adapt.sigma_w == 0.4 and cfg.adapt.tau == 1.0
    assert cfg.adapt.epochs == 15 and cfg.adapt.batch_size == 64 and cfg.adapt.momentum == 0.9
    assert cfg.seed == 0
    assert Path(cfg.scenario.source_manifest) == tmp_path.resolve() / "source.manifest"
    assert Path(cfg.run.out) == tmp_path.resolve() / "run"


def test_values_and_relative_paths(tmp_path, monkeypatch):
    monkeypatch.delenv("CAUSAL_SFDA_SEED", raising=False)
    sub = tmp_path / "sub"
    sub.mkdir()
    cfg = cf.load_config(write(sub, "[scenario]\nsetting = partial\ntarget_manifest = ../t.manifest\n"
                                    "source_classes = 0,1,2\ntarget_classes = 1\n"
                                    "[adapt]\ncosine_decay = no\nlr_model = 0.5\n[run]\nseed = 4\n"))
    assert cfg.scenario.setting == "partial"
    assert Path(cfg.scenario.target_manifest) == tmp_path.resolve() / "t.manifest"
    assert cf.scenario_spec(cfg) == ScenarioSpec("partial", (0, 1, 2), (1,))
    assert cfg.adapt.cosine_decay is False and cfg.adapt.lr_model == 0.5
    assert cfg.seed == cfg.adapt.seed == cfg.source.seed == 4


def test_seed_precedence(tmp_path, monkeypatch):
    p = write(tmp_path, "[run]\nseed = 4\n")
    monkeypatch.setenv("CAUSAL_SFDA_SEED", "11")
    assert cf.load_config(p).seed == 11
    assert cf.load_config(p, seed=2).seed == 2


@pytest.mark.parametrize("body, message", [
    ("[adapt]\nbogus = 1\n", r"\[adapt\] bogus: unknown key"),
    ("[adapt]\nseed = 1\n", "unknown key"),
    ("[extras]\nx = 1\n", "unknown sections"),
    ("[adapt]\nepochs = many\n", "cannot parse 'many' as int"),
    ("[adapt]\nalpha = -1\n", "non-negative"),
    ("[adapt]\ncosine_decay = maybe\n", "cannot parse"),
    ("[scenario]\nsetting = weird\n", "setting must be one of"),
    ("[scenario]\nsource_classes = a,b\n", "comma-separated integers"),
    ("[eval]\nopen_threshold = 2\n", "open_threshold"),
])
def test_config_errors(tmp_path, body, message):
    with pytest.raises(cf.ConfigError, match=message):
        cf.load_config(write(tmp_path, body))


def test_bad_meta(tmp_path):
    p = tmp_path / "x.ini"
    p.write_text("[meta]\nformat = other\nversion = 1\n")
    with pytest.raises(cf.ConfigError, match="format"):
        cf.load_config(p)
    p.write_text("[meta]\nformat = causal-sfda-config\nversion = 2\n")
    with pytest.raises(cf.ConfigError, match="version"):
        cf.load_config(p)
    p.write_text("[adapt]\nalpha = 1\n")
    with pytest.raises(cf.ConfigError, match="missing \\[meta\\]"):
        cf.load_config(p)
    with pytest.raises(cf.ConfigError, match="no such file"):
        cf.load_config(tmp_path / "absent.ini")


def test_write_then_load(tmp_path, monkeypatch):
    monkeypatch.delenv("CAUSAL_SFDA_SEED", raising=False)
    cfg = cf.load_config(write(tmp_path, "[adapt]\nalpha = 0.01\ntemplate = a sketch of a [CLS].\n[run]\nseed = 3\n"))
    cf.write_config(tmp_path / "again.ini", cfg)
    assert cf.load_config(tmp_path / "again.ini") == cfg


def test_descriptor_round_trip(tmp_path):
    d = cf.ScenarioDescriptor(SyntheticDomainSpec(n_classes=4, rotation=math.pi / 3, extra_classes=2), 7,
                              ScenarioSpec("open", (0, 1, 2, 3), (0, 1, 2, 3, 4, 5)), "s.manifest", "t.manifest")
    cf.write_descriptor(tmp_path / "d.ini", d)
    assert cf.read_descriptor(tmp_path / "d.ini") == d
