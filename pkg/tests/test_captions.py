from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgcontrast.captions import FilterPolicy, best_of_k, filter_captions, select_caption
from lgcontrast.errors import ValidationError
from lgcontrast.io import CaptionRecord, read_captions

FIXTURE = Path(__file__).parent / "fixtures" / "itm_captions.jsonl"


def rec(orig, gen, rid="x"):
    return CaptionRecord(rid, "original text", "generated text", orig, gen)


def test_generated_wins_on_higher_score():
    out, rep = filter_captions([rec(0.3, 0.7)])
    assert out[0].source == "generated" and out[0].text == "generated text"
    assert rep.generated == 1 and rep.original == 0


def test_tie_keeps_original():
    out, _ = filter_captions([rec(0.5, 0.5)])
    assert out[0].source == "original" and out[0].text == "original text"


def test_no_generated_caption_keeps_original():
    out, _ = filter_captions([CaptionRecord("x", "only")])
    assert out[0].source == "original"


def test_generated_without_score_is_an_error():
    r = CaptionRecord("x", "a", "b", itm_original=0.4)
    with pytest.raises(ValidationError):
        select_caption(r)
    with pytest.raises(ValidationError):
        filter_captions([CaptionRecord("y", "a", "b", itm_generated=0.4)])


def test_fixture_min_score():
    records = read_captions(FIXTURE)
    assert len(records) == 10
    # direct count: retained score is the larger one, original on ties
    below = sum(max(r.itm_original, r.itm_generated) < 0.4 for r in records)
    assert below == 3
    out, rep = filter_captions(records, FilterPolicy(min_score=0.4))
    assert len(out) == 7 and rep.dropped == 3 and rep.kept == 7
    assert {r.id for r in records} - {r.id for r in out} == {"r05", "r06", "r09"}
    assert "thresholding=on" in rep.to_text()


def test_fixture_without_threshold_keeps_everything():
    records = read_captions(FIXTURE)
    out, rep = filter_captions(records)
    assert len(out) == 10 and rep.dropped == 0
    assert [r.id for r in out] == [r.id for r in records]
    assert rep.generated == 6 and rep.original == 4
    assert "thresholding=off" in rep.to_text()


def test_best_of_k():
    assert best_of_k([("a", 0.2), ("b", 0.9), ("c", 0.4)]) == ("b", 0.9)
    assert best_of_k([("a", 0.5), ("b", 0.5)]) == ("a", 0.5)
    with pytest.raises(ValueError):
        best_of_k([])


def test_best_of_k_matches_linear_scan():
    rng = np.random.default_rng(0)
    for _ in range(20):
        scores = np.round(rng.random(100), 2)  # rounding forces ties
        cands = [(f"c{i}", float(s)) for i, s in enumerate(scores)]
        top = max(scores)
        first = next(i for i, s in enumerate(scores) if s == top)
        assert best_of_k(cands) == cands[first]



@st.composite
def records(draw):
    out = []
    for i in range(draw(st.integers(0, 20))):
        has_gen = draw(st.booleans())
        if has_gen:
            r = CaptionRecord(f"r{i}", "o", "g", draw(st.floats(0, 1)), draw(st.floats(0, 1)))
        else:
            r = CaptionRecord(f"r{i}", "o", itm_original=draw(st.floats(0, 1)))
        out.append(r)
    return out


@settings(max_examples=200, deadline=None)
@given(records(), st.one_of(st.none(), st.floats(0, 1)))
def test_filter_invariants(recs, min_score):
    out, rep = filter_captions(recs, FilterPolicy(min_score))
    assert len(out) <= len(recs)
    if min_score is None:
        assert len(out) == len(recs)
    by_id = {r.id: r for r in recs}
    for r in out:
        src = by_id[r.id]
        avail = [s for s in (src.itm_original, src.itm_generated) if s is not None]
        kept = r.itm_generated if r.source == "generated" else r.itm_original
        assert kept == max(avail)
    again, rep2 = filter_captions(out, FilterPolicy(min_score))
    assert again == out
    assert rep2.dropped == 0
