import pytest

from nerfkit import config as cfg
from nerfkit.errors import ParseError, ValidationError
from nerfkit.train import TRAIN_SCHEMA, TrainConfig, load_train_config

SCHEMA = cfg.Schema(
    {"a": cfg.Key("int", 1, cfg.positive), "b": cfg.Key("floats", (0.0, 0.0, 0.0), cfg.vec3),
     "on": cfg.Key("bool", False), "name": cfg.Key("str", "x")},
    {r"thing\.\d+\.size": cfg.Key("float")},
)


def test_parse_types_and_defaults():
    v = SCHEMA.parse("a = 2**4  # table\nb = 1, 2 3\non = yes\nthing.3.size = 0.5\n")
    assert v == {"a": 16, "b": (1.0, 2.0, 3.0), "on": True, "name": "x", "thing.3.size": 0.5}
    assert SCHEMA.parse("")["a"] == 1


@pytest.mark.parametrize("text,key", [("a = 0", "a"), ("a = 1.5", "a"), ("b = 1 2", "b"),
                                      ("on = maybe", "on"), ("zzz = 1", "zzz"), ("thing.x.size = 1", "thing.x.size")])
def test_validation_names_key(text, key):
    with pytest.raises(ValidationError) as exc:
        SCHEMA.parse(text)
    assert exc.value.key == key


def test_parse_errors_have_lines():
    with pytest.raises(ParseError) as exc:
        SCHEMA.parse("a = 1\n\nnot a pair\n")
    assert exc.value.line == 3
    with pytest.raises(ParseError):
        SCHEMA.parse("a = 1\na = 2\n")


def test_overrides():
    v = SCHEMA.parse("a = 2", overrides={"a": "5", "on": True})
    assert v["a"] == 5 and v["on"] is True
    with pytest.raises(ValidationError):
        SCHEMA.parse("", overrides={"a": -1})


def test_dump_roundtrip():
    v = SCHEMA.parse("a = 3\nb = 0.1 0.2 0.3\non = true\nname = hi\n")
    assert SCHEMA.parse(cfg.dump(v)) == v


def test_train_config_roundtrip(tmp_path):
    c = load_train_config(None, {"backend": "sdf", "iterations": "10", "lr_decay": "0.5"})
    assert c.backend == "sdf" and c.iterations == 10 and c.lr_decay == 0.5
    p = tmp_path / "c.cfg"
    p.write_text(cfg.dump(c.to_dict()))
    assert load_train_config(p) == c
    assert TrainConfig() == load_train_config()


def test_bundled_configs_load():
    from nerfkit.cli import bundled_path
    for name, backend in (("density.cfg", "density"), ("sdf.cfg", "sdf")):
        c = load_train_config(bundled_path(name))
        assert c.backend == backend
        assert set(TRAIN_SCHEMA.parse(bundled_path(name).read_text())) == set(c.to_dict())
