import pytest
import yaml

from signfed import config
from signfed.errors import ConfigError


def write(tmp_path, obj, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(obj) if not isinstance(obj, str) else obj)
    return str(p)


def test_minimal_config_gets_defaults(tmp_path):
    cfg = config.load(write(tmp_path, {"schema_version": 1}))
    assert cfg.protocol.name == "signfed" and cfg.protocol.gamma == 0.001
    assert cfg.protocol.clients_per_round == 10


def test_dp_signfed_default_gamma():
    cfg = config.from_dict({"schema_version": 1, "protocol": {"name": "dp-signfed"}})
    assert cfg.protocol.gamma == 0.005


def test_round_trip_through_yaml(tmp_path):
    cfg = config.from_dict({"schema_version": 1, "seed": 9, "protocol": {"name": "stdfed", "C": 0.2},
                            "adversary": {"kind": "in-backdoor", "fraction": 0.1, "eta_adv": 7}})
    again = config.load(write(tmp_path, config.dump(cfg)))
    assert again.to_dict() == cfg.to_dict()
    assert again.adversary.eta_adv == 7.0


@pytest.mark.parametrize("raw,field", [
    ({}, "schema_version"),
    ({"schema_version": 2}, "schema_version"),
    ({"schema_version": 1, "sead": 3}, "sead"),
    ({"schema_version": 1, "protocol": {"nmae": "x"}}, "protocol.nmae"),
    ({"schema_version": 1, "protocol": {"name": "fedavg"}}, "protocol.name"),
    ({"schema_version": 1, "protocol": {"C": 0}}, "protocol.C"),
    ({"schema_version": 1, "protocol": {"N": "many"}}, "protocol.N"),
    ({"schema_version": 1, "protocol": {"name": "signfed", "gamma": -1}}, "protocol.gamma"),
    ({"schema_version": 1, "data": {"source": "mnist"}}, "data.path"),
    ({"schema_version": 1, "privacy": {"sigma": -1}}, "privacy.sigma"),
    ({"schema_version": 1, "privacy": {"clip_mode": "mean"}}, "privacy.clip_mode"),
    ({"schema_version": 1, "adversary": {"kind": "flip"}}, "adversary.kind"),
    ({"schema_version": 1, "adversary": {"collude": "yes"}}, "adversary.collude"),
    ({"schema_version": 1, "model": {"kind": "mlp-1-hidden"}}, "model.hidden_dim"),
    ({"schema_version": 1, "workers": 0}, "workers"),
    ({"schema_version": 1, "partition": "iid"}, "partition"),
])
def test_field_level_errors(raw, field):
    with pytest.raises(ConfigError) as exc:
        config.from_dict(raw)
    assert exc.value.field == field
    assert str(exc.value).startswith(field + ":")


def test_unreadable_and_invalid_yaml(tmp_path):
    with pytest.raises(ConfigError, match="config: cannot read"):
        config.load(str(tmp_path / "missing.yaml"))
    with pytest.raises(ConfigError, match="not valid YAML"):
        config.load(write(tmp_path, "a: [1, 2"))
