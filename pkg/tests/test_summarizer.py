import json
import re
import urllib.error

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcpheno.metrics import build_report
from dpcpheno.summarizer import (
    SCHEMA_ASSET,
    TEMPLATES,
    EndpointConfig,
    EvidenceBundle,
    build_evidence,
    cohens_d,
    fallback_sentence,
    grounding_filter,
    is_grounded,
    llm_summarize,
    load_asset,
    render_summary,
    ungrounded_tokens,
)

ENDPOINT = EndpointConfig("http://127.0.0.1:9/unused", timeout=0.1)


def cohort(n_lymph=30, n_gran=52, n_mono=18, seed=0):
    """Cohort with a strong CD16 shift in granulocytes and one-hot-ish predictions."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1, 2], [n_lymph, n_gran, n_mono])
    n = labels.size
    probs = np.full((n, 3), 0.05)
    probs[np.arange(n), labels] = 0.9
    probs[:4] = [0.5, 0.3, 0.2]  # a few low-confidence calls, all to class 0
    reg = rng.normal(0, 1, (n, 4))
    reg[labels == 1, 1] += 4.0
    target = reg + rng.normal(0, 0.3, reg.shape)
    report = build_report(probs, labels, reg, target)
    return build_evidence(report, probs, reg), probs, reg


@pytest.fixture(scope="module")
def bundle():
    return cohort()[0]


def test_cohens_d_definition():
    a = np.array([-1.0, 1.0, -1.0, 1.0]) * np.sqrt(3 / 4)
    assert cohens_d(a, a + 1.0) == pytest.approx(-1.0)
    assert cohens_d(a + 1.0, a) == pytest.approx(1.0)
    assert cohens_d([1.0, 1.0], [1.0, 1.0]) is None
    assert cohens_d([1.0], [1.0, 2.0]) is None


def test_equal_means_do_not_fire_enrichment(bundle):
    b = EvidenceBundle.from_dict(json.loads(bundle.to_json()))
    b.effect_sizes = {c: {m: 0.0 for m in b.marker_names} for c in b.class_names}
    text = render_summary(b)
    assert "higher predicted" not in text and "lower predicted" not in text


def test_bundle_fractions_and_provenance(bundle):
    assert sum(bundle.fractions.values()) == pytest.approx(1.0, abs=0.011)
    assert bundle.percents["Granulocyte"] == 52
    for c in bundle.class_names:
        for m in bundle.marker_names:
            assert f"effect_sizes.{c}.{m}" in bundle.provenance
    assert bundle.effect_sizes["Granulocyte"]["CD16"] > 2


def test_majority_sentence(bundle):
    text = render_summary(bundle)
    first = text.split(". ")[0]
    assert "Granulocyte" in first and "52%" in first
    assert "markedly higher predicted CD16" in text
    assert is_grounded(text, bundle)


def test_large_effect_only_when_present(bundle):
    assert "4.69" not in render_summary(bundle)
    b = EvidenceBundle.from_dict(json.loads(bundle.to_json()))
    b.effect_sizes["Granulocyte"]["CD16"] = 4.69
    assert "Cohen's d 4.69" in render_summary(b)


def test_render_deterministic(bundle):
    assert render_summary(bundle) == render_summary(EvidenceBundle.from_dict(json.loads(bundle.to_json())))


def test_fallback_for_empty_bundle():
    empty = EvidenceBundle(0, ["A", "B", "C"], ["m1"], {}, {}, {}, {}, {"total": 0, "pairs": []}, None, None)
    assert render_summary(empty) == fallback_sentence(empty) == "The cohort contains 0 cells."


def test_template_inventory():
    ids = [t.id for t in TEMPLATES]
    assert len(ids) >= 12 and len(set(ids)) == len(ids)
    for t in TEMPLATES:
        assert set(re.findall(r"{(\w+)}", t.skeleton)) == set(t.slots), t.id


def test_every_template_grounded_over_random_cohorts():
    for seed in range(10):
        sizes = np.random.default_rng(seed).integers(2, 60, 3)
        b = cohort(*sizes, seed=seed)[0]
        for t in TEMPLATES:
            for s in t.render(b):
                assert not ungrounded_tokens(s, b), (t.id, s)


def test_filter_marker_and_numeral_rules(bundle):
    assert ungrounded_tokens("CD99 elevated 3.7x.", bundle) == ["CD99", "3.7"]
    assert is_grounded("CD16 and HLA-DR are listed; macro F1 matters.", bundle)
    kept, dropped = grounding_filter("Granulocyte is 52%. CD99 rises 812-fold.", bundle)
    assert kept == ["Granulocyte is 52%."] and len(dropped) == 1


def test_schema_validates_bundle(bundle):
    schema = json.loads(load_asset(SCHEMA_ASSET))
    jsonschema.validate(json.loads(bundle.to_json()), schema)
    bad = json.loads(bundle.to_json())
    bad["surprise"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, schema)


# -- endpoint client ----------------------------------------------------------------

def test_endpoint_down_equals_template_output(bundle):
    def down(*_):
        raise urllib.error.URLError("connection refused")
    assert llm_summarize(bundle, ENDPOINT, down) == render_summary(bundle)


def test_real_unreachable_endpoint(bundle):
    assert llm_summarize(bundle, ENDPOINT) == render_summary(bundle)


def test_grounded_echo_passes_verbatim(bundle):
    sentence = "Granulocyte cells dominate at 52%."
    assert llm_summarize(bundle, ENDPOINT, lambda *a: json.dumps({"text": sentence})) == sentence


def test_injected_marker_is_stripped(bundle):
    reply = "Granulocyte cells dominate at 52%. CD99 elevated 3.7×."
    out = llm_summarize(bundle, ENDPOINT, lambda *a: reply)
    assert "CD99" not in out and "3.7" not in out
    assert out == "Granulocyte cells dominate at 52%. " + render_summary(bundle)


def test_request_carries_preamble_and_token(bundle, monkeypatch):
    seen = {}

    def capture(url, body, headers, timeout):
        seen.update(json.loads(body), headers=headers, timeout=timeout)
        return "ok."

    monkeypatch.setenv("DPCPHENO_LLM_TOKEN", "secret")
    llm_summarize(bundle, ENDPOINT, capture)
    assert seen["preamble"] == load_asset("preamble_v1.txt")
    assert seen["evidence"]["schema_version"] == "1"
    assert seen["headers"]["Authorization"] == "Bearer secret" and seen["timeout"] == 0.1


NUMERAL = st.one_of(st.integers(0, 5000).map(str),
                    st.tuples(st.floats(0, 500, allow_nan=False), st.integers(1, 3)).map(lambda t: f"{t[0]:.{t[1]}f}"))
WORD = st.sampled_from(["Granulocyte", "cells", "show", "CD16", "CD99", "HLA-DQ", "r", "is", "F1", "%", "x"])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.one_of(WORD, NUMERAL), min_size=1, max_size=8), min_size=1, max_size=5))
def test_fuzzed_replies_never_leak(bundle, parts):
    reply = " ".join(" ".join(s) + "." for s in parts)
    out = llm_summarize(bundle, ENDPOINT, lambda *a: reply)
    assert not ungrounded_tokens(out, bundle)
