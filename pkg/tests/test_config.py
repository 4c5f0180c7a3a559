import pytest
from hypothesis import given
from hypothesis import strategies as st

from vortex.config import (
    ConfigError,
    EntityDef,
    SourceError,
    config_from_text,
    load_config,
    load_sources,
    merge_documents,
    parse_document,
    resolve_inheritance,
    validate,
)
from vortex.expr import evaluate, literal
from vortex.tags import TagCategory

from conftest import FIXTURES


def errors(diagnostics):
    return [d for d in diagnostics if d.is_error]


def warnings(diagnostics):
    return [d for d in diagnostics if not d.is_error]


class TestParse:
    def test_tool_default_and_hisat2(self):
        doc = parse_document((FIXTURES / "fig2.yml").read_text())
        default = doc.tools["default"]
        assert evaluate(default.cores, {}) == 2
        assert evaluate(default.mem, {}) == 4
        assert "nativeSpecification" in default.params
        hisat = doc.tools["toolshed.g2.bx.psu.edu/repos/iuc/hisat2/.*"]
        assert evaluate(hisat.cores, {}) == 8
        assert hisat.mem.source == "cores * 4"
        assert len(hisat.rules) == 1
        assert hisat.rules[0].condition.source == "input_size <= 10"
        assert evaluate(hisat.rules[0].overrides.cores, {}) == 4

    def test_empty_string(self):
        doc = parse_document("")
        assert doc.entity_count() == 0
        assert validate(resolve_inheritance(doc)) == []

    def test_malformed_expression_names_its_location(self):
        with pytest.raises(ConfigError) as info:
            parse_document('tools:\n  x:\n    cores: "2 +"\n')
        diag = info.value.diagnostics[0]
        assert diag.is_error
        assert diag.path == "tools[x].cores"

    def test_yaml_syntax_error_has_line_and_column(self):
        with pytest.raises(ConfigError) as info:
            parse_document("tools:\n  x: [1, 2\n", source="bad.yml")
        assert info.value.diagnostics[0].path.startswith("bad.yml:")

    def test_duplicate_keys_rejected(self):
        with pytest.raises(ConfigError):
            parse_document("tools:\n  x:\n    cores: 1\n  x:\n    cores: 2\n")

    def test_unknown_top_level_key_is_an_error(self):
        with pytest.raises(ConfigError):
            parse_document("toolz: {}\n")

    def test_unknown_field_is_a_warning(self):
        doc = parse_document("tools:\n  x:\n    cores: 1\n    colour: red\n")
        assert [d.severity for d in doc.diagnostics] == ["warning"]
        assert "colour" in doc.diagnostics[0].message

    def test_every_error_reported(self):
        with pytest.raises(ConfigError) as info:
            parse_document('tools:\n  x:\n    cores: "2 +"\n  y:\n    mem: "* 3"\n')
        assert len(info.value.diagnostics) == 2

    def test_destination_ids_are_literal(self):
        doc = parse_document("destinations:\n  a.b: {}\n")
        assert list(doc.destinations) == ["a.b"]


class TestSources:
    def test_local_file(self):
        docs = load_sources([FIXTURES / "fig2.yml"])
        assert len(docs) == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(SourceError):
            load_sources([tmp_path / "nope.yml"])

    def test_remote_then_cached(self, file_server, tmp_path):
        cache = tmp_path / "cache"
        (file_server.root / "db.yml").write_text((FIXTURES / "fig2.yml").read_text())
        url = file_server.url("db.yml")
        fresh = load_sources([url], cache_dir=cache)[0]
        assert fresh.diagnostics == []
        file_server.stop()
        stale = load_sources([url], cache_dir=cache)[0]
        assert stale.tools == fresh.tools
        assert any("cached copy" in d.message for d in warnings(stale.diagnostics))

    def test_unreachable_without_cache(self, file_server, tmp_path):
        url = file_server.url("db.yml")
        file_server.stop()
        with pytest.raises(SourceError):
            load_sources([url], cache_dir=tmp_path / "cache", timeout=2)

    def test_not_found_url_without_cache(self, file_server, tmp_path):
        with pytest.raises(SourceError):
            load_sources([file_server.url("absent.yml")], cache_dir=tmp_path / "cache")

    def test_cache_dir_from_environment(self, file_server, tmp_path, monkeypatch):
        cache = tmp_path / "envcache"
        monkeypatch.setenv("VORTEX_CACHE_DIR", str(cache))
        (file_server.root / "db.yml").write_text("tools:\n  x:\n    cores: 1\n")
        load_sources([file_server.url("db.yml")])
        assert len(list(cache.glob("*.yml"))) == 1


HISAT = "toolshed.g2.bx.psu.edu/repos/iuc/hisat2/.*"


class TestMerge:
    def test_later_document_overrides_scalar(self):
        a = parse_document(f"tools:\n  {HISAT}:\n    cores: 8\n    mem: cores * 4\n")
        b = parse_document(f"tools:\n  {HISAT}:\n    cores: 4\n")
        merged = merge_documents([a, b]).tools[HISAT]
        assert evaluate(merged.cores, {}) == 4
        assert merged.mem.source == "cores * 4"

    def test_env_merges_key_wise(self):
        a = parse_document("tools:\n  t:\n    env:\n      A: '1'\n      B: '2'\n")
        b = parse_document("tools:\n  t:\n    env:\n      B: '3'\n      C: '4'\n")
        assert dict(merge_documents([a, b]).tools["t"].env) == {"A": "1", "B": "3", "C": "4"}

    def test_scheduling_category_replaced_and_name_moved(self):
        a = parse_document("tools:\n  t:\n    scheduling:\n      require: [x]\n      prefer: [y]\n")
        b = parse_document("tools:\n  t:\n    scheduling:\n      accept: [x]\n")
        tags = merge_documents([a, b]).tools["t"].tags
        assert tags == {"x": TagCategory.ACCEPT, "y": TagCategory.PREFER}

    def test_rules_concatenate_and_same_id_replaces(self):
        a = parse_document(
            "tools:\n  t:\n    rules:\n      - {if: input_size > 1, id: big, cores: 2}\n      - {if: input_size > 5, cores: 3}\n"
        )
        b = parse_document(
            "tools:\n  t:\n    rules:\n      - {if: input_size > 2, id: big, cores: 9}\n      - {if: input_size > 9, cores: 4}\n"
        )
        rules = merge_documents([a, b]).tools["t"].rules
        assert [r.condition.source for r in rules] == ["input_size > 2", "input_size > 5", "input_size > 9"]

    def test_later_default_inherits_wins(self):
        a = parse_document("global:\n  default_inherits: a\n")
        b = parse_document("global:\n  default_inherits: b\n")
        assert merge_documents([a, b]).default_inherits == "b"

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            merge_documents([])

    def test_disjoint_entities_are_unioned(self):
        a = parse_document("tools:\n  a: {cores: 1}\n")
        b = parse_document("tools:\n  b: {cores: 2}\n")
        assert set(merge_documents([a, b]).tools) == {"a", "b"}


# small random documents for algebraic properties
_values = st.integers(min_value=1, max_value=64)
_entity = st.fixed_dictionaries(
    {},
    optional={
        "cores": _values,
        "mem": _values,
        "env": st.dictionaries(st.sampled_from(["A", "B", "C"]), st.sampled_from(["x", "y"]), max_size=2),
        "scheduling": st.dictionaries(
            st.sampled_from(["require", "prefer", "accept", "reject"]),
            st.lists(st.sampled_from(["p", "q", "r"]), min_size=1, max_size=1),
            max_size=1,
        ),
    },
)
_docs = st.dictionaries(st.sampled_from(["t1", "t2", "t3"]), _entity, max_size=3).map(
    lambda tools: parse_document_from_data({"tools": tools})
)


def parse_document_from_data(data):
    import yaml

    return parse_document(yaml.safe_dump(data))


class TestMergeProperties:
    @given(_docs, _docs, _docs)
    def test_associative(self, a, b, c):
        left = merge_documents([merge_documents([a, b]), c])
        right = merge_documents([a, merge_documents([b, c])])
        assert left.tools == right.tools

    @given(_docs)
    def test_empty_document_is_identity(self, a):
        empty = parse_document("")
        assert merge_documents([a, empty]).tools == a.tools
        assert merge_documents([empty, a]).tools == a.tools

    @given(_docs)
    def test_idempotent(self, a):
        assert merge_documents([a, a]).tools == a.tools


class TestInheritance:
    def test_default_params_inherited(self):
        config = load_config([FIXTURES / "fig2.yml"])
        hisat = config.tools[HISAT]
        assert hisat.params["nativeSpecification"].startswith("--nodes=1")
        assert evaluate(hisat.cores, {}) == 8

    def test_explicit_parent_chain(self):
        config = config_from_text(
            "tools:\n  base: {cores: 2, mem: 8, env: {A: a}}\n  mid: {inherits: base, mem: 16}\n"
            "  leaf: {inherits: mid, env: {B: b}}\n"
        )
        leaf = config.tools["leaf"]
        assert evaluate(leaf.cores, {}) == 2
        assert evaluate(leaf.mem, {}) == 16
        assert dict(leaf.env) == {"A": "a", "B": "b"}
        assert leaf.inherits is None

    def test_parent_rules_come_first(self):
        config = config_from_text(
            "tools:\n  base:\n    rules: [{if: input_size > 1, cores: 2}]\n"
            "  leaf:\n    inherits: base\n    rules: [{if: input_size > 2, cores: 3}]\n"
        )
        assert [r.condition.source for r in config.tools["leaf"].rules] == ["input_size > 1", "input_size > 2"]

    def test_self_inheritance_is_a_cycle(self):
        with pytest.raises(ConfigError) as info:
            config_from_text("tools:\n  a: {inherits: a}\n")
        assert "a -> a" in info.value.diagnostics[0].message

    def test_two_step_cycle(self):
        with pytest.raises(ConfigError) as info:
            load_config([FIXTURES / "cycle.yml"])
        assert "cycle" in info.value.diagnostics[0].message

    def test_unknown_parent(self):
        with pytest.raises(ConfigError) as info:
            config_from_text("tools:\n  a: {inherits: ghost}\n")
        assert "ghost" in info.value.diagnostics[0].message

    def test_default_inherits_only_within_declaring_section(self):
        config = config_from_text(
            "global: {default_inherits: default}\ntools:\n  default: {cores: 3}\n  t: {}\n"
            "destinations:\n  d: {}\n"
        )
        assert evaluate(config.tools["t"].cores, {}) == 3
        assert config.destinations["d"].cores is None

    def test_inherited_tag_conflict_is_an_error(self):
        with pytest.raises(ConfigError):
            config_from_text(
                "tools:\n  base: {scheduling: {reject: [x]}}\n  t: {inherits: base, scheduling: {prefer: [x]}}\n"
            )

    def test_child_tag_claim_strengthens(self):
        config = config_from_text(
            "tools:\n  base: {scheduling: {prefer: [x], accept: [y]}}\n"
            "  t: {inherits: base, scheduling: {require: [x]}}\n"
        )
        assert config.tools["t"].tags == {"x": TagCategory.REQUIRE, "y": TagCategory.ACCEPT}

    def test_idempotent(self):
        config = load_config([FIXTURES / "fig2.yml"])
        assert resolve_inheritance(config) == config

    def test_declaration_order_preserved(self):
        config = load_config([FIXTURES / "shared_db" / "tools.yml"])
        doc = parse_document((FIXTURES / "shared_db" / "tools.yml").read_text())
        assert list(config.tools) == list(doc.tools)


class TestValidate:
    def test_worked_example_is_clean(self, worked_config):
        assert validate(worked_config) == []

    def test_shared_database_with_override_is_clean(self):
        config = load_config([FIXTURES / "shared_db" / "tools.yml", FIXTURES / "shared_db" / "site_override.yml"])
        assert errors(validate(config)) == []

    def test_destination_field_on_tool_warns(self):
        diags = validate(config_from_text("tools:\n  t: {max_accepted_cores: 4}\n"))
        assert [d.severity for d in diags] == ["warning"]
        assert "destination-only" in diags[0].message

    def test_min_above_max_accepted(self):
        diags = validate(config_from_text("destinations:\n  d: {min_accepted_cores: 8, max_accepted_cores: 4}\n"))
        assert len(errors(diags)) == 1

    def test_negative_bound(self):
        assert errors(validate(config_from_text("destinations:\n  d: {max_mem: -1}\n")))

    def test_bad_regex(self):
        diags = validate(config_from_text("tools:\n  'bad[': {cores: 1}\n"))
        assert errors(diags)

    def test_resource_may_not_reference_later_resource(self):
        diags = validate(config_from_text("tools:\n  t: {cores: mem / 4, mem: 8}\n"))
        assert errors(diags)
        assert errors(diags)[0].path == "tools[t].cores"

    def test_mem_may_reference_cores(self):
        assert validate(config_from_text("tools:\n  t: {cores: 2, mem: cores * 4}\n")) == []

    def test_unknown_identifier_in_template(self):
        diags = validate(config_from_text("destinations:\n  d: {params: {x: '{nodes}'}}\n"))
        assert errors(diags)[0].path == "destinations[d].params.x"

    def test_non_boolean_condition(self):
        diags = validate(config_from_text("tools:\n  t:\n    rules: [{if: input_size * 2, cores: 1}]\n"))
        assert errors(diags)[0].path == "tools[t].rules[0].if"

    def test_duplicate_rule_ids(self):
        diags = validate(
            config_from_text(
                "tools:\n  t:\n    rules:\n      - {if: input_size > 1, id: r, cores: 1}\n"
                "      - {if: input_size > 2, id: r, cores: 2}\n"
            )
        )
        assert errors(diags)

    def test_missing_default_inherits_target_warns(self):
        diags = validate(config_from_text("global: {default_inherits: base}\ntools:\n  t: {cores: 1}\n"))
        assert [d.path for d in warnings(diags)] == ["global.default_inherits"]

    def test_parse_warnings_carried_through(self):
        diags = validate(config_from_text("tools:\n  t: {cores: 1, colour: red}\n"))
        assert len(warnings(diags)) == 1


class TestEntityDef:
    def test_round_trip_to_dict(self):
        config = load_config([FIXTURES / "worked_example.yml"])
        for entity in config.tools.values():
            data = entity.to_dict(include_id=False)
            again = parse_document_from_data({"tools": {entity.id: data}}).tools[entity.id]
            assert again.to_dict() == entity.to_dict()

    def test_literal_resources(self):
        e = EntityDef(id="x", kind="tool", cores=literal(2))
        assert e.to_dict() == {"id": "x", "cores": 2}
