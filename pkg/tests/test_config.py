import json

import pytest

from primal_sim.config import (ConfigError, HardwareSpec, LoraSpec, ModelSpec, WorkloadSpec, config_from_dict,
                               config_to_dict, ct_count, dump_config, load_config, model_from_dict, preset,
                               toy_hardware, with_lora)


def test_hardware_defaults_match_table():
    hw = HardwareSpec()
    assert (hw.mesh_rows, hw.mesh_cols, hw.pe_count) == (32, 32, 1024)
    assert (hw.rram_rows, hw.rram_cols) == (256, 256)
    assert (hw.sram_rows, hw.sram_cols) == (256, 64)
    assert hw.scratchpad_bytes == 32 * 1024
    assert hw.fifo_bytes == 128 and hw.bus_bits == 64
    assert hw.dmac_per_router == 16 and hw.io_pairs == 6
    assert hw.freq_hz == 1e9


def test_fifo_depth_in_flits():
    assert HardwareSpec().fifo_depth == 16


def test_flit_rounding():
    hw = HardwareSpec()
    assert hw.flits(8, 8) == 1
    assert hw.flits(9, 8) == 2
    assert hw.flits(2, 32) == 1
    assert hw.flits(3, 32) == 2


def test_macro_power_table_values():
    p = HardwareSpec().macro_power
    assert p.active("rram") == pytest.approx(120e-6)
    assert p.active("sram") == pytest.approx(950e-6)
    assert p.active("spm") == pytest.approx(42e-6)
    assert p.active("router") == pytest.approx(103e-6)
    assert p.retention("sram") == pytest.approx(0.1 * 950e-6)
    assert p.retention("spm") == pytest.approx(0.25 * 42e-6)


def test_macro_area_table_values():
    a = HardwareSpec().macro_area
    assert [a.of(k) for k in ("rram", "sram", "spm", "router")] == [0.1442, 0.035, 0.013, 0.029]


@pytest.mark.parametrize("name,layers,hidden", [
    ("llama3.2-1b", 16, 2048), ("llama3-8b", 32, 4096), ("llama2-13b", 40, 5120)])
def test_presets(name, layers, hidden):
    m = preset(name)
    assert m.num_layers == layers and m.hidden_dim == hidden
    assert m.num_heads * m.head_dim == hidden


def test_params_hand_count():
    m = preset("toy")
    # 4 x 16x16 attention + 3 x 16x32 gated FFN
    assert m.params_per_layer == 4 * 256 + 3 * 512
    assert m.total_params == m.params_per_layer


def test_lora_params():
    m = with_lora(preset("toy"), 2, ("Q", "V"))
    assert m.lora_params_per_layer == 2 * 2 * (16 + 16)


def test_ct_count_is_ceiling():
    hw = toy_hardware()
    m = preset("toy")
    cells = hw.pe_count * hw.rram_rows * hw.rram_cols
    assert ct_count(hw, m) == -(-m.total_params // cells)
    assert ct_count(HardwareSpec(), preset("llama3.2-1b")) >= 16


def test_invalid_values_name_the_field():
    with pytest.raises(ConfigError, match="mesh_rows"):
        HardwareSpec(mesh_rows=0)
    with pytest.raises(ConfigError, match="rank"):
        LoraSpec(rank=-1)
    with pytest.raises(ConfigError, match="targets"):
        LoraSpec(targets=("X",))
    with pytest.raises(ConfigError):
        WorkloadSpec(input_len=0)


def test_heads_must_divide_hidden():
    with pytest.raises(ConfigError):
        ModelSpec("bad", 1, 16, 3, 5, 32)


def test_lora_applies_to():
    lora = LoraSpec(rank=4, targets=("Q", "V"))
    assert lora.applies_to("Q") and lora.applies_to("V")
    assert not lora.applies_to("K")
    assert not LoraSpec(rank=0, targets=("Q",)).applies_to("Q")


def test_round_trip(tmp_path):
    hw = toy_hardware()
    m = with_lora(preset("llama3-8b"), 8, ("Q", "V"), 2.0)
    wl = WorkloadSpec(2048, 2048)
    path = tmp_path / "cfg.json"
    dump_config(path, hw, m, wl)
    assert load_config(path) == (hw, m, wl)


def test_schema_version_required():
    doc = config_to_dict(HardwareSpec(), preset("toy"), WorkloadSpec())
    del doc["schema_version"]
    with pytest.raises(ConfigError, match="schema_version"):
        config_from_dict(doc)


def test_unknown_field_rejected():
    doc = config_to_dict(HardwareSpec(), preset("toy"), WorkloadSpec())
    doc["hardware"]["warp_drive"] = 1
    with pytest.raises(ConfigError, match="warp_drive"):
        config_from_dict(json.loads(json.dumps(doc)))


def test_model_from_preset_dict():
    m = model_from_dict({"preset": "llama3.2-1b", "lora": {"rank": 8, "targets": ["Q"]}})
    assert m.hidden_dim == 2048 and m.lora.targets == ("Q",)
    assert model_from_dict({}).name == "toy"
