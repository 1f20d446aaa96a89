"""Architecture parsing, validation diagnostics, and round-tripping."""

import copy

import pytest
import yaml

from gemmsched import ArchError, arch_to_dict, load_arch, parse_arch
from gemmsched.archspec import validate_arch

from conftest import GEMMINI_YAML, make_arch2, make_arch3


def valid_doc():
    with open(GEMMINI_YAML, "r", encoding="utf-8") as fh:
        return yaml.safe_load(fh.read())


def errors_of(doc):
    with pytest.raises(ArchError) as exc:
        parse_arch(doc)
    return exc.value.diagnostics


def test_parse_valid_config():
    arch = parse_arch(valid_doc())
    assert arch.name == "gemmini16"
    assert arch.pe_dim == 16
    assert [lv.name for lv in arch.levels] == ["pe", "spm", "acc", "dram"]
    assert arch.pe_level_index == 0
    assert arch.supports_double_buffering
    assert {df.name for df in arch.dataflows} == {"weight_stationary",
                                                  "output_stationary"}


def test_missing_required_field_diagnostic():
    doc = valid_doc()
    del doc["pe_dim"]
    diags = errors_of(doc)
    assert any(d.path == "<root>.pe_dim" and "missing" in d.message
               for d in diags)


def test_unknown_key_diagnostic_has_field_path():
    doc = valid_doc()
    doc["levels"][1]["banana"] = 3
    diags = errors_of(doc)
    assert any(d.path == "levels[1].banana" and "unknown key" in d.message
               for d in diags)


def test_unknown_operand_diagnostic():
    doc = valid_doc()
    doc["levels"][1]["operands"] = ["input", "psum"]
    diags = errors_of(doc)
    assert any("psum" in d.message and "operands" in d.path for d in diags)


def test_two_pe_levels_rejected():
    doc = valid_doc()
    doc["levels"][1]["pe_level"] = True
    diags = errors_of(doc)
    assert any("exactly one level must be flagged pe_level" in d.message
               for d in diags)


def test_pe_level_must_be_innermost():
    doc = valid_doc()
    doc["levels"][0]["pe_level"] = False
    doc["levels"][2]["pe_level"] = True
    diags = errors_of(doc)
    assert any("innermost" in d.message for d in diags)


def test_capacity_zero_must_be_outermost_and_unique():
    doc = valid_doc()
    doc["levels"][1]["capacity_bytes"] = 0
    diags = errors_of(doc)
    assert any("capacity 0" in d.message for d in diags)


def test_three_forced_spatial_dims_rejected():
    doc = valid_doc()
    doc["dataflows"][0]["spatial"] = {"N": "forced", "C": "forced",
                                      "K": "forced"}
    diags = errors_of(doc)
    assert any("2-D array" in d.message for d in diags)


def test_compute_bounds_exceeding_pe_dim_rejected():
    doc = valid_doc()
    doc["intrinsics"][0]["bounds"]["N"] = 32
    diags = errors_of(doc)
    assert any("exceeds pe_dim" in d.message and "bounds.N" in d.path
               for d in diags)


def test_memory_intrinsic_unknown_level_rejected():
    doc = valid_doc()
    doc["intrinsics"][1]["src"] = "l3"
    diags = errors_of(doc)
    assert any("unknown level" in d.message for d in diags)


def test_memory_intrinsic_must_connect_adjacent_holding_levels():
    doc = valid_doc()
    # output loads dram -> acc; make one skip over acc instead
    doc["intrinsics"].append({
        "id": "bad", "kind": "memory", "direction": "load",
        "operand": "output", "src": "dram", "dst": "pe"})
    # pe holds nothing, so dram->pe for output jumps over acc
    diags = errors_of(doc)
    assert any("adjacent holding levels" in d.message for d in diags)


def test_memory_intrinsic_wrong_direction_rejected():
    doc = valid_doc()
    doc["intrinsics"][1]["src"], doc["intrinsics"][1]["dst"] = (
        doc["intrinsics"][1]["dst"], doc["intrinsics"][1]["src"])
    diags = errors_of(doc)
    assert any("outer and an inner level" in d.message for d in diags)


def test_bad_yaml_rejected():
    diags = errors_of("{:::")
    assert any("bad YAML" in d.message for d in diags)


def test_non_mapping_document_rejected():
    diags = errors_of([1, 2, 3])
    assert any("expected a mapping" in d.message for d in diags)


def test_roundtrip_through_dict():
    arch = parse_arch(valid_doc())
    again = parse_arch(arch_to_dict(arch))
    assert again == arch


def test_roundtrip_small_archs():
    for arch in (make_arch2(), make_arch3()):
        assert parse_arch(arch_to_dict(arch)) == arch


def test_validate_clean_spec_has_no_diagnostics():
    arch = parse_arch(valid_doc())
    assert validate_arch(arch) == []


def test_load_arch_from_file():
    arch = load_arch(GEMMINI_YAML)
    assert arch.name == "gemmini16"


def test_holding_levels_and_bypass():
    arch = load_arch(GEMMINI_YAML)
    # pe holds nothing; spm holds input/weight; acc holds output; dram all
    assert arch.holding_levels("input") == [1, 3]
    assert arch.holding_levels("output") == [2, 3]
    assert not arch.holds(0, "input")
    assert arch.holds(3, "weight")  # off-chip backs everything


def test_constraint_defaults():
    arch = load_arch(GEMMINI_YAML)
    pe, spm = arch.levels[0], arch.levels[1]
    assert arch.constraints.max_spatial(arch, pe, "N") == 16
    assert arch.constraints.max_spatial(arch, spm, "N") == 1
    assert arch.constraints.max_temporal(spm, "N") is None
