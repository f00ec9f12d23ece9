import json

import pytest

from gradiveq.config import ConfigError, RunConfig, expand_modes, from_dict, load_config
from gradiveq.schedule import INFINITE


def test_empty_config_uses_defaults():
    cfg = from_dict({})
    sched = cfg.to_schedule()
    assert (sched.warmup, sched.sample_iters, sched.compressed_iters) == (2500, 100, 400)
    assert sched.loss_threshold == 0.01 and sched.reuse == INFINITE
    assert cfg.nodes == 6 and cfg.codec.scalar_bits == 4 and cfg.mode == "gvq"


@pytest.mark.parametrize("data, path", [
    ({"schedule": {"sample_iters": 1}}, "schedule.sample_iters"),
    ({"schedule": {"loss_threshold": 1.5}}, "schedule.loss_threshold"),
    ({"schedule": {"reuse": "many"}}, "schedule.reuse"),
    ({"source": {"layers": [[3, 3, 0, 4]]}}, "source.layers[0]"),
    ({"source": {"kind": "replay"}}, "source.dump"),
    ({"source": {"colour": 1}}, "source.colour"),
    ({"nodes": 0}, "nodes"),
    ({"nodes": "six"}, "nodes"),
    ({"mode": "fast"}, "mode"),
    ({"codec": {"pca_input": "x"}}, "codec.pca_input"),
    ({"network": {"bandwidth": 0}}, "network.bandwidth"),
    ({"layout": "big"}, "layout"),
])
def test_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as err:
        from_dict(data)
    assert err.value.path == path
    assert str(err.value).startswith(path + ":")


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 4, "schedule": {"warmup": 10, "reuse": 2}, "scale": 0.5}))
    cfg = load_config(p)
    assert cfg.seed == 4 and cfg.to_schedule().warmup == 5 and cfg.to_schedule().reuse == 2
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_overrides_and_expand_modes():
    cfg = RunConfig().with_overrides(**{"nodes": 3, "mode": "all", "schedule.warmup": 7, "seed": None})
    assert cfg.nodes == 3 and cfg.schedule.warmup == 7 and cfg.seed == 0
    modes = expand_modes(cfg)
    assert [c.mode for c in modes] == ["raw", "gvq", "scalar"]
    assert all(c.seed == cfg.seed for c in modes)
    assert expand_modes(RunConfig()) == [RunConfig()]
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(**{"schedule.quorum": 0.0})


def test_roundtrip_through_dict():
    cfg = from_dict({"source": {"kind": "toy", "layers": [[3, 3, 3, 8]]}, "layout": {"slice_size": [24]}})
    assert from_dict(cfg.to_dict()) == cfg
