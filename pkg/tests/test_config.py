import json

import pytest

from chunkflow import config
from chunkflow.config import ConfigError


def test_default_config_is_valid():
    cfg = config.load(None)
    assert cfg.seed == 0
    assert cfg.embodiment_ids == ["arm_gripper_20hz", "bimanual_dex_50hz", "lowcost_arm_10hz"]
    assert cfg.layout.d == 43


def test_seed_is_mandatory():
    obj = config.default_config()
    del obj["seed"]
    with pytest.raises(ConfigError) as exc:
        config.build(obj)
    assert exc.value.pointer == ""
    assert str(exc.value).startswith("<root>:")


@pytest.mark.parametrize("patch,pointer", [
    ({"chunk": {"T": 0}}, "/chunk/T"),
    ({"latency": {"kind": "gaussian"}}, "/latency/kind"),
    ({"runtime": {"fallback": "panic"}}, "/runtime/fallback"),
    ({"bogus": 1}, ""),
])
def test_first_failing_pointer(patch, pointer):
    with pytest.raises(ConfigError) as exc:
        config.build({"seed": 1, **patch})
    assert exc.value.pointer == pointer


def test_unknown_embodiment_pointer():
    with pytest.raises(ConfigError) as exc:
        config.build({"seed": 1, "embodiments": ["arm_gripper_20hz", "hexapod"]})
    assert exc.value.pointer == "/embodiments/1"


def test_merge_and_overrides():
    cfg = config.build({"seed": 4, "chunk": {"T": 6}}, {"seed": 5, "runtime": {"clock": "wall"}})
    assert cfg.seed == 5
    assert cfg.raw["chunk"] == {**config.default_config()["chunk"], "T": 6}
    assert cfg.raw["runtime"]["clock"] == "wall"
    assert config.merge({"a": [1, 2]}, {"a": [3]}) == {"a": [3]}


def test_hash_ignores_output_dir_only():
    a = config.build({"seed": 1, "output": {"dir": "x"}})
    b = config.build({"seed": 1, "output": {"dir": "y"}})
    c = config.build({"seed": 2})
    assert a.hash == b.hash != c.hash
    assert len(a.hash) == 16


def test_relative_latency(fleet):
    cfg = config.build({"seed": 0, "latency": {"kind": "constant", "value": 0.5, "relative": True}})
    emb = fleet["arm_gripper_20hz"]
    assert cfg.latency(emb).value == pytest.approx(0.06)
    cfg = config.build({"seed": 0, "latency": {"kind": "constant", "value": 0.5, "relative": False}})
    assert cfg.latency(emb).value == 0.5


def test_load_file_and_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 9}))
    assert config.load(p).seed == 9
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        config.load(p)


def test_custom_space_section():
    space = {"groups": [{"name": "j", "width": 4, "kind": "arm_joint_rad"}],
             "embodiments": [{"id": "tiny", "active_slots": [0, 1], "control_period_s": 0.05,
                              "latency_budget_s": 0.05}]}
    cfg = config.build({"seed": 0, "space": space, "embodiments": ["tiny"]})
    assert cfg.layout.d == 4 and cfg.embodiment("tiny").active_slots == (0, 1)
