import numpy as np
import pytest

from evaluation import (
    DELETE,
    INSERT,
    MATCH,
    SUBSTITUTE,
    EditOp,
    align,
    cer,
    cer_by_group,
    confusion_table,
    levenshtein,
    prepare_pairs,
    replay,
)
from utils.exceptions import EmptyInputError


def naive_distance(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def random_text(rng, alphabet="abcd ", max_len=12):
    return "".join(rng.choice(list(alphabet), size=int(rng.integers(0, max_len + 1))))


class TestDistance:
    def test_known_values(self):
        assert levenshtein("kitten", "sitting") == 3
        assert levenshtein("", "abc") == 3
        assert levenshtein("abc", "") == 3
        assert levenshtein("", "") == 0

    def test_matches_naive(self):
        rng = np.random.default_rng(21)
        for _ in range(10_000):
            a, b = random_text(rng), random_text(rng)
            assert levenshtein(a, b) == naive_distance(a, b), (a, b)

    def test_metric_properties(self):
        rng = np.random.default_rng(22)
        for _ in range(1000):
            a, b, c = (random_text(rng, "ab", 8) for _ in range(3))
            assert levenshtein(a, b) == levenshtein(b, a)
            assert (levenshtein(a, b) == 0) == (a == b)
            assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


class TestAlign:
    def test_substitution(self):
        assert align("abc", "axc") == [
            EditOp(MATCH, "a", "a"),
            EditOp(SUBSTITUTE, "b", "x"),
            EditOp(MATCH, "c", "c"),
        ]

    def test_deleted_space(self):
        assert align("a b", "ab") == [
            EditOp(MATCH, "a", "a"),
            EditOp(DELETE, " ", ""),
            EditOp(MATCH, "b", "b"),
        ]

    def test_insertion(self):
        assert align("", "xy") == [EditOp(INSERT, "", "x"), EditOp(INSERT, "", "y")]

    def test_alignments_are_optimal_and_replay(self):
        rng = np.random.default_rng(23)
        for _ in range(2000):
            a, b = random_text(rng), random_text(rng)
            ops = align(a, b)
            assert replay(a, ops) == b
            assert sum(op.kind != MATCH for op in ops) == levenshtein(a, b)


class TestCER:
    def test_micro_average(self):
        assert cer([("ab", "ab"), ("ab", "")]).cer == 0.5
        result = cer([("abc", "abd"), ("abc", "xbc")])
        assert result.cer == pytest.approx(2 / 6)
        assert result.to_dict() == {"cer": result.cer, "total_errors": 2, "total_gt_chars": 6}

    def test_empty_ground_truth(self):
        with pytest.raises(EmptyInputError):
            cer([("", "abc")])
        with pytest.raises(EmptyInputError):
            cer([])

    def test_nfc_before_comparison(self):
        pairs = prepare_pairs([("\u00e4", "a\u0308")])
        assert cer(pairs).cer == 0.0

    def test_rules_are_applied_to_both_sides(self):
        from textnorm import NormalizationRuleSet

        pairs = prepare_pairs([("Iam ,x", "Jam, x")], NormalizationRuleSet.default())
        assert cer(pairs).cer == 0.0

    def test_by_group(self):
        grouped = cer_by_group({"w1": [("ab", "ab")], "w2": [("abcd", "abcx")], "w3": []})
        assert set(grouped.groups) == {"w1", "w2"}
        assert grouped.macro_cer == pytest.approx(0.125)
        assert grouped.overall.cer == pytest.approx(1 / 6)
        assert grouped.to_dict()["groups"]["w2"]["total_errors"] == 1
        with pytest.raises(EmptyInputError):
            cer_by_group({"w": []})


class TestConfusions:
    def test_most_frequent_first(self):
        report = confusion_table([("abc", "axc"), ("b", "x"), ("aa", "a")])
        top = report.rows[0]
        assert (top.gt, top.pred, top.count) == ("b", "x", 2)
        assert top.percent == pytest.approx(66.67, abs=0.01)
        assert report.total_errors == 3
        assert report.total_gt_chars == 6
        assert report.cer == 0.5

    def test_percentages_sum_to_100(self):
        rng = np.random.default_rng(24)
        pairs = [(random_text(rng, "abc "), random_text(rng, "abc ")) for _ in range(50)]
        report = confusion_table(pairs, top_n=5)
        assert len(report.rows) == 5
        assert sum(r.percent for r in report.rows) + report.remaining_percent == pytest.approx(100.0)
        assert sum(r.count for r in report.rows) + report.remaining_count == report.total_errors
        counts = [r.count for r in report.rows]
        assert counts == sorted(counts, reverse=True)

    def test_ties_sorted_by_tokens(self):
        report = confusion_table([("cd", "xy"), ("a", "b")])
        assert [(r.gt, r.pred) for r in report.rows] == [("a", "b"), ("c", "x"), ("d", "y")]

    def test_whitespace_rendering_and_tsv(self):
        report = confusion_table([("a b", "ab"), ("ab", "xb")], top_n=1)
        assert report.to_dict()["rows"][0] == {"gt": "␣", "pred": "", "cnt": 1, "perc": 50.0}
        tsv = report.to_tsv().splitlines()
        assert tsv[0] == "gt\tpred\tcnt\tperc"
        assert tsv[1] == "␣\t\t1\t50.00"
        assert tsv[-1] == "Remaining\t\t1\t50.00"
        assert list(report.to_frame().columns) == ["gt", "pred", "cnt", "perc"]

    def test_no_errors(self):
        report = confusion_table([("abc", "abc")])
        assert report.rows == () and report.remaining_count == 0 and report.cer == 0.0
