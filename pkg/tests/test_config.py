import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from restlab import config as C


def test_defaults_round_trip():
    cfg = C.ExperimentConfig()
    assert C.parse(C.serialize(cfg)) == cfg
    assert C.parse(C.serialize(cfg, docs=False)) == cfg


def test_every_field_is_documented():
    text = C.serialize(C.ExperimentConfig())
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if "=" in line and not line.startswith("#"):
            assert lines[i - 1].startswith("# ") and len(lines[i - 1]) > 2, line


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10_000), st.floats(1e-5, 1e-1), st.sampled_from([(0.5,), (0.25, 1.0), (0.5, 0.75, 1.0)]),
       st.booleans(), st.one_of(st.none(), st.integers(0, 20)))
def test_round_trip_of_modified_configs(seed, lr, fractions, equalize, steps):
    cfg = C.ExperimentConfig()
    cfg.protocol.master_seed = seed
    cfg.protocol.fractions = fractions
    cfg.seg = dataclasses.replace(cfg.seg, lr=lr, equalize=equalize)
    cfg.rest = dataclasses.replace(cfg.rest, finetune_steps=steps)
    assert C.parse(C.serialize(cfg)) == cfg


@pytest.mark.parametrize("text,line", [
    ("[data]\nn_labeled = 10\n[nope]\n", 3),
    ("[data]\n\nbogus = 1\n", 3),
    ("[data]\nn_labeled = ten\n", 2),
    ("n_labeled = 10\n", 1),
    ("[data]\nn_labeled 10\n", 2),
    ("[data]\nn_labeled = 10\nn_labeled = 12\n", 3),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(C.ConfigError) as err:
        C.parse(text)
    assert err.value.line_no == line


def test_validation_rejects_bad_protocols(tmp_path):
    cfg = C.parse("[protocol]\nfractions = 0.3\n")
    with pytest.raises(C.ConfigError, match="fractions"):
        cfg.validate()
    cfg = C.parse("[data]\nsize = 30\n")
    with pytest.raises(C.ConfigError, match="divisible"):
        cfg.validate()
    cfg = C.parse(f"[output]\nout_dir = {tmp_path}/missing/deeper\n")
    with pytest.raises(C.ConfigError, match="parent"):
        cfg.validate()
    with pytest.raises(C.ConfigError):
        C.parse("[rest]\nwindow = 1\n")


def test_load_missing_file(tmp_path):
    with pytest.raises(C.ConfigError, match="cannot read"):
        C.load(tmp_path / "absent.cfg")


def test_overrides():
    cfg = C.with_overrides(C.ExperimentConfig(), ["rest.k_iterations=4", "protocol.fractions=0.5,1.0",
                                                  "seg.augment=false", "rest.finetune_steps=none"])
    assert cfg.rest.k_iterations == 4 and cfg.protocol.fractions == (0.5, 1.0)
    assert cfg.seg.augment is False and cfg.rest.finetune_steps is None
    for bad in ("rest.k=1", "rest.seed=3", "nosection=1", "rest.k_iterations", "rest.k_iterations=x"):
        with pytest.raises(C.ConfigError):
            C.with_overrides(C.ExperimentConfig(), [bad])


def test_module_seeds_are_not_configurable():
    text = C.serialize(C.ExperimentConfig())
    for sec in ("seg", "irl", "rest"):
        block = text.split(f"[{sec}]")[1].split("[")[0]
        assert "\nseed =" not in block
