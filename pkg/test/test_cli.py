import json

import pytest

from app.exceptions import ScenarioValidationError
from app.main import EXIT_OK, EXIT_VALIDATION, apply_overrides, load_config, main

pytestmark = pytest.mark.unit


def test_validate_builtin_scenario(capsys):
    assert main(["validate", "forming_classify_h1"]) == EXIT_OK
    assert "forming_classify_h1: OK (classify, 1 CIDER)" in capsys.readouterr().out


def test_validate_canonical_output(capsys):
    assert main(["validate", "cigre5_hpf", "--canonical"]) == EXIT_OK
    document = json.loads(capsys.readouterr().out)
    assert document["topology"]["thevenin_node"] == "N01"
    assert document["analysis"]["kind"] == "hpf"


def test_list_scenarios(capsys):
    assert main(["scenarios"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("forming_classify_h1", "flw_dc_truncation", "cigre5_tds_validate"):
        assert name in out


def test_malformed_documents_exit_with_validation_code(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{ not json", encoding="utf-8")
    assert main(["validate", str(broken)]) == EXIT_VALIDATION
    assert main(["validate", "no_such_scenario"]) == EXIT_VALIDATION
    assert main(["validate", "forming_classify_h1", "--set", "ciders.0.rated_power=-1"]) == EXIT_VALIDATION


def test_scenario_file_is_accepted(tmp_path, capsys):
    assert main(["validate", "flw_ac_truncation", "--canonical"]) == EXIT_OK
    canonical = capsys.readouterr().out
    path = tmp_path / "scenario.json"
    path.write_text(canonical, encoding="utf-8")
    assert main(["validate", str(path)]) == EXIT_OK
    capsys.readouterr()
    # Каноническая форма не меняется при повторной загрузке
    assert main(["validate", str(path), "--canonical"]) == EXIT_OK
    assert capsys.readouterr().out == canonical
    assert load_config(str(path)) == load_config("flw_ac_truncation")


def test_overrides_are_applied():
    cfg = load_config("flw_ac_sensitivity_K70", ["analysis.steps=10", "ciders.0.stages.0.controller.K_fb=6.5"])
    assert cfg.analysis.steps == 10
    assert cfg.ciders[0].get_parameter("alpha.K_fb") == 6.5
    cfg = load_config("cigre5_hpf", ["analysis.mode=zero_distortion"])
    assert cfg.analysis.mode == "zero_distortion"


def test_override_errors():
    with pytest.raises(ScenarioValidationError):
        apply_overrides({"a": 1}, ["a"])
    with pytest.raises(ScenarioValidationError):
        apply_overrides({"a": [1]}, ["a.3=2"])
    assert apply_overrides({"a": {"b": 1}}, ["a.c=[1, 2]"]) == {"a": {"b": 1, "c": [1, 2]}}
