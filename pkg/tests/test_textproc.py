import random

import pytest
from hypothesis import given, settings, strategies as st

from desktts import textproc as tp
from desktts.textproc import Strategy, TextToken

V = tp.default_vocabulary()
SYMS = sorted(V.symbols)


def names(seq):
    return seq.render()


def test_tokenize_examples():
    a, b, beta = V.symbols["a"], V.symbols["b"], V.symbols["β"]
    assert tp.tokenize("ab", [(0, 2, 0)]) == [TextToken(a, 0), TextToken(b, 0)]
    assert tp.tokenize("", []) == []
    assert tp.tokenize("aβ", [(0, 1, 0), (1, 2, 1)]) == [TextToken(a, 0), TextToken(beta, 1)]


def test_tokenize_errors():
    with pytest.raises(tp.OOVError) as e:
        tp.tokenize("ab!", [(0, 3, 0)])
    assert e.value.symbol == "!" and e.value.offset == 2
    with pytest.raises(ValueError, match="overlap"):
        tp.tokenize("abc", [(0, 2, 0), (1, 3, 1)])
    with pytest.raises(ValueError, match="not covered"):
        tp.tokenize("abc", [(0, 2, 0)])
    with pytest.raises(ValueError, match="lang_id"):
        tp.tokenize("ab", [(0, 2, 7)])


@given(st.text(alphabet=SYMS, max_size=40), st.integers(0, 1))
def test_round_trip(text, lang):
    spans = [(0, len(text), lang)] if text else []
    assert tp.detokenize(tp.tokenize(text, spans)) == text


def test_vocabulary_layout():
    assert V.vocab_size == 33 and V.num_languages == 2
    assert len(V.homographs) == 16
    ids = [V.special(n) for n in ("PAD", "BOS", "EOS", "BT", "BA", "EOP")]
    ids += [V.special(k, l) for k in ("LID_open", "LID_close") for l in range(2)]
    assert len(set(ids)) == len(ids)
    assert min(ids) >= V.vocab_size


def test_boundary_aware_examples():
    t = tp.tokenize("ab", [(0, 2, 0)])
    assert names(tp.assemble_boundary_aware(t)) == ["c", "p", "BT", "<LANGA>", "a", "b", "</LANGA>", "BA"]
    assert names(tp.assemble_boundary_aware([])) == ["c", "p", "BT", "BA"]
    t = tp.tokenize("ab", [(0, 1, 0), (1, 2, 1)])
    assert names(tp.assemble_boundary_aware(t)) == [
        "c", "p", "BT", "<LANGA>", "a", "</LANGA>", "<LANGB>", "b", "</LANGB>", "BA"
    ]


def test_token_concat_keeps_langs():
    t = tp.tokenize("ij", [(0, 1, 0), (1, 2, 1)])
    seq = tp.assemble_token_concat(t)
    assert [e.lang for e in seq.text_entries()] == [0, 1]
    assert not any(e.role == "special" and V.special_name(e.id).startswith("<") for e in seq.layout)
    assert names(tp.assemble_token_concat([])) == ["c", "p", "BT", "BA"]
    with pytest.raises(ValueError):
        tp.assemble_token_concat([TextToken(0, None)])


def test_instruction_layout():
    t = tp.tokenize("abc", [(0, 3, 1)])
    seq = tp.assemble_instruction(t, 0)
    r = names(seq)
    instr = tp.default_templates()[1][0]
    assert r[:3] == ["c", "p", "BT"]
    assert "".join(r[3 : 3 + len(instr)]) == instr.replace(" ", " ")
    assert r[3 + len(instr)] == "EOP" and r[-1] == "BA"
    assert tp.assemble_instruction(t, 0) == seq
    empty = names(tp.assemble_instruction([], 0))
    assert empty[-2:] == ["EOP", "BA"]
    with pytest.raises(ValueError):
        tp.assemble_instruction(t, 99)


def test_templates_table():
    tab = tp.default_templates()
    assert set(tab) == {0, 1}
    assert all(len(v) == 8 for v in tab.values())
    rng = random.Random(0)
    seen = {tp.assemble_instruction([], tp.RANDOM, lang=0, rng=rng).template_id for _ in range(200)}
    assert seen == set(range(8))


token_lists = st.lists(st.tuples(st.sampled_from(range(V.vocab_size)), st.integers(0, 1)), max_size=30).map(
    lambda xs: [TextToken(s, l) for s, l in xs]
)


@settings(max_examples=200)
@given(token_lists)
def test_layout_invariants(tokens):
    bt, ba, eop = V.special("BT"), V.special("BA"), V.special("EOP")
    tc = tp.assemble_token_concat(tokens)
    for strategy in Strategy:
        seq = tp.assemble(tokens, strategy, template_id=0)
        specials = [e.id for e in seq.layout if e.role == "special"]
        assert specials.count(bt) == 1 and specials.count(ba) == 1
        assert specials.index(bt) < specials.index(ba)
        assert [e.role for e in seq.layout[:3]] == ["cond", "dur", "special"]
        assert seq.layout[seq.ba_index].id == ba
        assert seq == tp.assemble(tokens, strategy, template_id=0)
    ba_seq = tp.assemble_boundary_aware(tokens)
    runs = len(tp.language_runs(tokens))
    assert len(ba_seq) - len(tc) == 2 * runs
    depth = 0
    for e in ba_seq.layout:
        if e.role == "special" and V.special_name(e.id).startswith("<") and not V.special_name(e.id).startswith("</"):
            depth += 1
            assert depth == 1
        elif e.role == "special" and V.special_name(e.id).startswith("</"):
            depth -= 1
    assert depth == 0
    ig = tp.assemble_instruction(tokens, 0, lang=0)
    assert len(ig) - len(tc) == len(tp.default_templates()[0][0]) + 1
    roles = [e.role for e in ig.layout]
    eop_at = [i for i, e in enumerate(ig.layout) if e.role == "special" and e.id == eop][0]
    assert all(r != "text" for r in roles[:eop_at]) and all(r != "instruction" for r in roles[eop_at:])


def test_strategy_parse():
    assert Strategy.parse("token_concat") is Strategy.TOKEN_CONCAT
    with pytest.raises(ValueError):
        Strategy.parse("nope")
