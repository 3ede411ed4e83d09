import copy
import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metalab.errors import AssumptionWarning, SchemaError
from metalab.expr import Expression
from metalab.rng import mix64, stream_keys
from metalab.schema import bundled_model_path, load_document, parse_model, validate_document


@pytest.fixture(scope="module")
def doc_a():
    return json.loads(bundled_model_path("model_a").read_text())


def write(tmp_path, doc, name="m.json"):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return p


@pytest.mark.parametrize("name", ["model_a", "model_a_repelling", "model_b", "model_b_sym", "model_c", "triangle"])
def test_bundled_models_load_and_pass_their_checks(name):
    with warnings.catch_warnings():
        warnings.simplefilter("error", AssumptionWarning)
        model, report = parse_model(name)
    assert report.passed and model.name == name


def test_malformed_json_is_a_schema_error(tmp_path):
    with pytest.raises(SchemaError, match="malformed JSON"):
        load_document(write(tmp_path, '{"dimension": 2,'))


@pytest.mark.parametrize("edit,pointer", [
    (lambda d: d.pop("dimension"), ""),
    (lambda d: d["surfaces"][0].__setitem__("kind", "torus"), "/surfaces/0/kind"),
    (lambda d: d["surfaces"][0].__setitem__("location", [0.0, 0.0, 0.0]), "/surfaces/0/location"),
    (lambda d: d["fields"]["v"].pop(), "/fields/v"),
    (lambda d: d["confinement"].__setitem__("radius", "big"), "/confinement/radius"),
])
def test_schema_errors_point_at_the_offending_entry(tmp_path, doc_a, edit, pointer):
    doc = copy.deepcopy(doc_a)
    edit(doc)
    with pytest.raises(SchemaError) as info:
        validate_document(doc)
    assert info.value.pointer.startswith(pointer)


def test_noise_field_not_vanishing_on_the_surface_warns_on_a(tmp_path, doc_a):
    doc = copy.deepcopy(doc_a)
    doc["fields"]["v"][1] = {"type": "explicit", "components": ["x + 0.3", "y"]}
    with pytest.warns(AssumptionWarning, match=r"\(a\)"):
        parse_model(write(tmp_path, doc))


def test_unknown_expression_name_is_a_schema_error(tmp_path, doc_a):
    doc = copy.deepcopy(doc_a)
    doc["fields"]["v_tilde"][1] = {"type": "explicit", "components": ["foo(x)", "0"]}
    with pytest.raises(SchemaError):
        parse_model(write(tmp_path, doc), check=False)


def test_expressions_reject_attribute_access():
    with pytest.raises(ValueError):
        Expression("x.__class__", 2)


def test_expression_evaluates_on_point_arrays():
    g = Expression("sin(x) + y**2", 2)
    X = np.array([[0.0, 2.0], [np.pi / 2, 0.0]])
    assert np.allclose(g(X), [4.0, 1.0])


@given(st.lists(st.integers(0, 2 ** 64 - 1), min_size=2, max_size=50, unique=True))
def test_mix64_is_injective_on_samples(values):
    out = mix64(np.array(values, dtype=np.uint64))
    assert len(set(out.tolist())) == len(values)


@given(st.integers(0, 2 ** 63), st.integers(0, 2 ** 63))
def test_seeds_give_distinct_streams(s1, s2):
    k1 = stream_keys(s1, np.arange(64))
    k2 = stream_keys(s2, np.arange(64))
    assert len(set(k1.tolist())) == 64
    if s1 != s2:
        assert not np.array_equal(k1, k2)
