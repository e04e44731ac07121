import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentstack.attributes import AttributeIndex, CELEBA_EXPERIMENT_SPEC, DomainSpec, \
    build_marginal_sets, compile_predicate, holdout_mask, load_attribute_index
from latentstack.errors import ConfigError, FormatError


def write_attr_file(path, names, rows):
    lines = [str(len(rows)), " ".join(names)]
    for image_id, vals in rows:
        lines.append(image_id + " " + " ".join("1" if v else "-1" for v in vals))
    path.write_text("\n".join(lines) + "\n")
    return path


def test_parse_hand_written_three_row_table(tmp_path):
    # expected boolean matrix written out by hand before the loader existed
    path = write_attr_file(tmp_path / "a.txt", ["A", "B", "C"], [
        ("x.jpg", [True, False, True]),
        ("y.jpg", [False, False, False]),
        ("z.jpg", [True, True, True]),
    ])
    idx = load_attribute_index(path)
    assert idx.attribute_names == ["A", "B", "C"]
    assert idx.image_ids == ["x.jpg", "y.jpg", "z.jpg"]
    expected = np.array([[True, False, True],
                         [False, False, False],
                         [True, True, True]])
    assert np.array_equal(idx.values, expected)


def test_parse_zero_rows_gives_empty_index(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("0\nA B\n")
    idx = load_attribute_index(p)
    assert len(idx) == 0
    assert idx.attribute_names == ["A", "B"]


def test_parse_count_mismatch_names_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("3\nA\nx.jpg 1\ny.jpg -1\n")
    with pytest.raises(FormatError, match="declares 3 rows but 2"):
        load_attribute_index(p)


def test_parse_bad_token_names_line_and_column(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("1\nA B\nx.jpg 1 0\n")
    with pytest.raises(FormatError, match="line 3.*'B'.*'0'"):
        load_attribute_index(p)


def test_parse_wrong_column_count(tmp_path):
    p = tmp_path / "w.txt"
    p.write_text("1\nA B\nx.jpg 1\n")
    with pytest.raises(FormatError, match="line 3 has 1 attribute columns, expected 2"):
        load_attribute_index(p)


def test_duplicate_ids_rejected(tmp_path):
    path = write_attr_file(tmp_path / "d.txt", ["A"], [("x.jpg", [True]), ("x.jpg", [False])])
    with pytest.raises(FormatError, match="not unique"):
        load_attribute_index(path)


# -- predicates ---------------------------------------------------------------

M = np.array([[True, False], [False, True], [True, True], [False, False]])
NAMES = ["P", "Q"]


@pytest.mark.parametrize("expr,expected", [
    ("P", [True, False, True, False]),
    ("not P", [False, True, False, True]),
    ("P and Q", [False, False, True, False]),
    ("P or Q", [True, True, True, False]),
    ("not (P and Q)", [True, True, False, True]),
    ("true", [True, True, True, True]),
    ("false", [False, False, False, False]),
])
def test_predicate_truth_table(expr, expected):
    assert compile_predicate(expr, NAMES)(M).tolist() == expected


def test_predicate_unknown_attribute():
    with pytest.raises(ConfigError, match="unknown attribute 'R'"):
        compile_predicate("R", NAMES)


def test_predicate_rejects_non_boolean_syntax():
    with pytest.raises(ConfigError):
        compile_predicate("P + Q", NAMES)
    with pytest.raises(ConfigError):
        compile_predicate("__import__('os')", NAMES)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30))
def test_predicate_de_morgan(rows):
    m = np.array(rows)
    lhs = compile_predicate("not (P and Q)", NAMES)(m)
    rhs = compile_predicate("(not P) or (not Q)", NAMES)(m)
    assert np.array_equal(lhs, rhs)


# -- domain construction ------------------------------------------------------

def _index_six():
    # memberships below were enumerated by hand from this table
    names = ["Glasses", "Smiling"]
    rows = [
        ("a", [False, False]),
        ("b", [False, True]),
        ("c", [True, False]),
        ("d", [True, True]),   # excluded under Smiling and Glasses
        ("e", [False, True]),
        ("f", [True, False]),
    ]
    values = np.array([v for _, v in rows])
    return AttributeIndex(names, [r for r, _ in rows], values)


def _spec_six(exclusion="Smiling and Glasses"):
    return DomainSpec(domain_names=["plain_face", "glasses", "smiling", "neutral"],
                      predicates=["not Glasses", "Glasses", "Smiling", "not Smiling"],
                      exclusion=exclusion)


def test_six_entry_membership_by_hand():
    ds = build_marginal_sets(_index_six(), _spec_six(), holdout_fraction=0.0)
    got = {name: sorted(m) for name, m in zip(ds.spec.domain_names, ds.members)}
    assert got == {
        "plain_face": ["a", "b", "e"],
        "glasses": ["c", "f"],        # d dropped by the exclusion
        "smiling": ["b", "e"],        # d dropped by the exclusion
        "neutral": ["a", "c", "f"],
    }
    assert ds.counts == [3, 2, 2, 3]


def test_exclusion_false_is_plain_filter():
    ds = build_marginal_sets(_index_six(), _spec_six(exclusion="false"), holdout_fraction=0.0)
    got = {name: sorted(m) for name, m in zip(ds.spec.domain_names, ds.members)}
    assert got["glasses"] == ["c", "d", "f"]
    assert got["smiling"] == ["b", "d", "e"]


def test_exclusion_soundness_on_outputs():
    idx = _index_six()
    ds = build_marginal_sets(idx, _spec_six(), holdout_fraction=0.0)
    excl = compile_predicate("Smiling and Glasses", idx.attribute_names)(idx.values)
    bad = {i for i, e in zip(idx.image_ids, excl) if e}
    for members in ds.members:
        assert not bad & set(members)


def test_rebuild_is_idempotent():
    a = build_marginal_sets(_index_six(), _spec_six())
    b = build_marginal_sets(_index_six(), _spec_six())
    assert a.members == b.members
    assert a.holdout == b.holdout
    assert a.content_hash() == b.content_hash()


def test_empty_domain_names_predicate():
    idx = _index_six()
    spec = DomainSpec(domain_names=["a", "b"], predicates=["Glasses and not Glasses", "true"])
    with pytest.raises(ConfigError, match="'Glasses and not Glasses'"):
        build_marginal_sets(idx, spec)


def test_spec_requires_even_domain_count():
    with pytest.raises(ConfigError, match="even"):
        DomainSpec(domain_names=["a", "b", "c"], predicates=["true"] * 3)


def test_spec_pairing_must_partition():
    with pytest.raises(ConfigError, match="pairing"):
        DomainSpec(domain_names=["a", "b", "c", "d"], predicates=["true"] * 4,
                   pairing=[("a", "b"), ("a", "c")])


def test_default_pairing_is_consecutive():
    spec = DomainSpec(domain_names=["a", "b", "c", "d"], predicates=["true"] * 4)
    assert spec.pairing == [("a", "b"), ("c", "d")]
    assert spec.pair_indices() == [(0, 1), (2, 3)]


def test_experiment_spec_drops_held_out_combination():
    idx = _index_six()
    spec = DomainSpec(domain_names=list(CELEBA_EXPERIMENT_SPEC.domain_names),
                      predicates=["not Glasses", "Glasses", "Smiling", "not Smiling"],
                      exclusion="Smiling and Glasses",
                      pairing=list(CELEBA_EXPERIMENT_SPEC.pairing))
    ds = build_marginal_sets(idx, spec, holdout_fraction=0.0)
    held_out = compile_predicate("Smiling and Glasses", idx.attribute_names)(idx.values)
    assert held_out.sum() == 1
    for members in ds.members:
        assert "d" not in members


# -- holdout split ------------------------------------------------------------

def test_holdout_mask_is_per_id_not_positional():
    ids = [f"{i:05d}.jpg" for i in range(200)]
    base = holdout_mask(ids, 0.2)
    shuffled = list(reversed(ids))
    again = dict(zip(shuffled, holdout_mask(shuffled, 0.2)))
    assert all(again[i] == v for i, v in zip(ids, base))


def test_holdout_fraction_approximate():
    ids = [f"{i:06d}.jpg" for i in range(20000)]
    frac = holdout_mask(ids, 0.05).mean()
    assert 0.04 < frac < 0.06


def test_content_hash_tracks_membership():
    a = build_marginal_sets(_index_six(), _spec_six(), holdout_fraction=0.0)
    b = build_marginal_sets(_index_six(), _spec_six(exclusion="false"), holdout_fraction=0.0)
    assert a.content_hash() != b.content_hash()
