import pytest
from pydantic import ValidationError

from app.schemas import CiderKind, ScenarioConfig, SystemBlock
from app.services.scenarios import list_scenarios, load_scenario, scenario_document

pytestmark = pytest.mark.unit


@pytest.mark.parametrize("name", [item["name"] for item in list_scenarios()])
def test_builtin_scenarios_validate(name):
    cfg = load_scenario(name)
    assert cfg.name == name
    assert cfg.analysis.kind == next(i["analysis"] for i in list_scenarios() if i["name"] == name)


def test_instability_scenario_parameters():
    cfg = load_scenario("cigre5_instability")
    assert cfg.topology.thevenin_node == "N01"
    assert cfg.cider("flw_N04").get_parameter("alpha.K_fb") == 16.0
    assert cfg.cider("flw_N05").get_parameter("alpha.K_fb") == 5.0
    assert cfg.analysis.direction == -1
    assert cfg.analysis.schedule.value == "previous"


def test_negative_inductance_is_rejected():
    doc = scenario_document("forming_classify_h1")
    doc["ciders"][0]["stages"][0]["filter"]["L_or_C"] = -1e-3
    with pytest.raises(ValidationError):
        ScenarioConfig.model_validate(doc)


def test_unknown_keys_are_rejected():
    doc = scenario_document("forming_classify_h1")
    doc["ciders"][0]["setpoint"]["droop"] = 0.05
    with pytest.raises(ValidationError):
        ScenarioConfig.model_validate(doc)


def test_stage_order_must_match_kind():
    doc = scenario_document("flw_ac_truncation")
    doc["ciders"][0]["stages"].reverse()
    with pytest.raises(ValidationError):
        ScenarioConfig.model_validate(doc)


def test_following_needs_power_setpoint():
    doc = scenario_document("flw_ac_truncation")
    doc["ciders"][0]["setpoint"]["P_sigma"] = None
    with pytest.raises(ValidationError):
        ScenarioConfig.model_validate(doc)


def test_system_analysis_needs_topology():
    doc = scenario_document("cigre5_hpf")
    doc.pop("topology")
    with pytest.raises(ValidationError):
        ScenarioConfig.model_validate(doc)


def test_analysis_must_reference_known_cider():
    doc = scenario_document("forming_classify_h1")
    doc["analysis"]["cider"] = "missing"
    with pytest.raises(ValidationError):
        ScenarioConfig.model_validate(doc)


def test_parameter_paths():
    spec = load_scenario("flw_dc_truncation").ciders[0]
    assert spec.kind == CiderKind.GRID_FOLLOWING_DC
    assert spec.get_parameter("delta.K_fb") == 10.0
    updated = spec.with_parameters({"gamma.T_fb": 1e-3})
    assert updated.get_parameter("gamma.T_fb") == 1e-3
    assert spec.get_parameter("gamma.T_fb") == 5e-3
    with pytest.raises(KeyError):
        spec.get_parameter("alpha.gain")
    with pytest.raises(KeyError):
        spec.get_parameter("K_fb")


def test_dqz_order_defaults_to_one_more():
    assert SystemBlock(h_max=7).dqz_order == 8
    assert SystemBlock(h_max=7, h_max_dqz=7).dqz_order == 7
    with pytest.raises(ValidationError):
        SystemBlock(h_max=7, h_max_dqz=6)
