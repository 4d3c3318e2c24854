import pytest

from cacseg.config import ConfigError, coerce, dump, parse
from cacseg.train import RunConfig

SCHEMA = {"a": 1, "b": 0.5, "c": True, "d": "x"}


def test_parse_and_coerce():
    raw = parse("a = 3\n# comment\nb = 0.25  # trailing\nc = false\nd = word\n")
    assert coerce(raw, SCHEMA) == {"a": 3, "b": 0.25, "c": False, "d": "word"}


def test_unknown_key_is_error():
    with pytest.raises(ConfigError, match="lamda"):
        coerce(parse("lamda = 1"), SCHEMA)


@pytest.mark.parametrize("text", ["a 3", "= 3", "a = 1\na = 2"])
def test_malformed(text):
    with pytest.raises(ConfigError):
        parse(text)


def test_bad_types():
    with pytest.raises(ConfigError):
        coerce({"c": "yes"}, SCHEMA)
    with pytest.raises(ConfigError):
        coerce({"a": "1.5"}, SCHEMA)


def test_dump_is_canonical():
    text = dump({"b": 0.1, "a": 2, "c": True})
    assert text == "a = 2\nb = 0.1\nc = true\n"
    assert dump(coerce(parse(text), {"a": 0, "b": 0.0, "c": False})) == text


def test_run_config_round_trip():
    cfg = RunConfig().with_updates(lambda_kl=0.1, tau=10.0, formation_p="proto", seed=3)
    text = cfg.dumps()
    assert RunConfig.loads(text) == cfg and RunConfig.loads(text).dumps() == text


def test_run_config_defaults():
    cfg = RunConfig()
    assert cfg.tau == 15.0 and cfg.loss.lambda_kl == 1.0 and cfg.loss.kl_variant == "classwise_entropy"
    assert (cfg.learning_rate, cfg.momentum, cfg.d_hidden) == (0.05, 0.9, 128)


def test_run_config_unknown_override():
    with pytest.raises(ConfigError):
        RunConfig().with_updates(learning_rat=0.1)
