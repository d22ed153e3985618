import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tna.errors import ConfigError, DataError, EmptySelectionError, RowError, SchemaError
from tna.sequences import (
    Alphabet, Schema, SessionizationPolicy, StateSequence, attach_covariates, filter_unit,
    gap_quantile, group_sequences, ingest, ingest_text, load_covariates, merge_units, sessionize,
)

MIN = 60.0


def log_from_minutes(units: dict[str, list[tuple[float, str]]]):
    rows = ["unit,actor,timestamp,code"]
    for unit, events in units.items():
        for t, code in events:
            rows.append(f"{unit},{unit}-a,{t * MIN},{code}")
    return ingest_text("\n".join(rows) + "\n")


def test_ingest_three_rows():
    text = (
        "unit,actor,timestamp,code\n"
        "g1,ann,2024-01-01T10:00:00,plan\n"
        "g1,bob,2024-01-01T10:01:00,explore\n"
        "g1,ann,2024-01-01T10:02:00,plan\n"
    )
    log = ingest_text(text)
    assert len(log) == 3
    assert log.alphabet.labels == ("plan", "explore")
    assert [e.code for e in log.events] == ["plan", "explore", "plan"]


def test_ingest_missing_timestamp_column_names_it():
    with pytest.raises(SchemaError, match="timestamp"):
        ingest_text("unit,actor,code\ng1,a,plan\n")


def test_ingest_bad_timestamp_reports_line():
    text = "unit,actor,timestamp,code\ng1,a,2024-01-01T10:00:00,plan\ng1,a,yesterday,plan\n"
    with pytest.raises(RowError) as exc:
        ingest_text(text)
    assert exc.value.line == 3


def test_ingest_empty_file():
    with pytest.raises(DataError):
        ingest_text("")
    with pytest.raises(DataError):
        ingest_text("unit,actor,timestamp,code\n")


def test_ingest_missing_file():
    with pytest.raises(DataError, match="nope.csv"):
        ingest("/nonexistent/nope.csv")


def test_ingest_custom_schema_and_format():
    text = "grp;who;when;lab\nx;p;01/02/2024 10:00;b\nx;p;01/02/2024 09:00;a\n"
    schema = Schema(unit="grp", actor="who", timestamp="when", code="lab",
                    time_format="%d/%m/%Y %H:%M", delimiter=";")
    log = ingest_text(text, schema)
    # sorted by time within unit; alphabet keeps first appearance in the file
    assert [e.code for e in log.events] == ["a", "b"]
    assert log.alphabet.labels == ("b", "a")


def test_ingest_without_actor_column_uses_unit():
    log = ingest_text("unit,timestamp,code\ng,0,a\ng,1,b\n")
    assert {e.actor_id for e in log.events} == {"g"}
    with pytest.raises(SchemaError, match="who"):
        ingest_text("unit,timestamp,code\ng,0,a\n", Schema(actor="who"))


def test_ingest_explicit_alphabet_rejects_unknown_code():
    with pytest.raises(RowError, match="zzz"):
        ingest_text("unit,actor,timestamp,code\ng,a,0,zzz\n", alphabet=Alphabet(("a",)))


def test_equal_timestamps_keep_input_order():
    log = ingest_text("unit,actor,timestamp,code\ng,a,5,x\ng,a,5,y\ng,a,1,z\n")
    assert [e.code for e in log.events] == ["z", "x", "y"]


def test_per_unit_counts_sum_to_total(rng):
    rows = ["unit,actor,timestamp,code"]
    for i in range(500):
        rows.append(f"g{rng.integers(24)},a,{i},c{rng.integers(9)}")
    log = ingest_text("\n".join(rows))
    assert sum(len(v) for v in log.by_unit().values()) == 500


def test_alphabet_validation():
    with pytest.raises(DataError):
        Alphabet(("a", "a"))
    with pytest.raises(DataError):
        Alphabet(())
    ab = Alphabet(("x", "y"))
    assert ab.index["y"] == 1
    assert ab.decode(ab.encode(["y", "x"])) == ["y", "x"]


@pytest.mark.parametrize("gaps,q,expected", [
    (list(range(1, 11)), 0.5, 5.5),
    ([7], 0.3, 7.0),
    ([7], 0.9, 7.0),
    ([2, 2, 2], 0.9, 2.0),
    ([5, 30, 5], 0.9, 25.0),
])
def test_gap_quantile_hand_values(gaps, q, expected):
    t = np.concatenate([[0.0], np.cumsum(gaps)])
    log = log_from_minutes({"g": [(x, "a") for x in t]})
    assert gap_quantile(log, q) == pytest.approx(expected * MIN)


def test_gap_quantile_ignores_cross_unit_gaps():
    log = log_from_minutes({"g1": [(0, "a"), (1, "a")], "g2": [(1000, "a"), (1002, "a")]})
    assert gap_quantile(log, 0.5) == pytest.approx(1.5 * MIN)


def test_gap_quantile_errors():
    log = log_from_minutes({"g1": [(0, "a")], "g2": [(5, "a")]})
    with pytest.raises(DataError):
        gap_quantile(log, 0.5)
    with pytest.raises(ConfigError):
        gap_quantile(log, 1.0)


def test_sessionize_fixed_gap():
    log = log_from_minutes({"g": [(0, "a"), (10, "b"), (40, "a")]})
    seqs = sessionize(log, SessionizationPolicy("fixed_gap", gap=20 * MIN))
    assert [s.states for s in seqs] == [(0, 1), (0,)]
    assert [s.session_id for s in seqs] == [0, 1]


def test_sessionize_gap_equal_to_threshold_does_not_split():
    log = log_from_minutes({"g": [(0, "a"), (20, "b")]})
    assert len(sessionize(log, 20 * MIN)) == 1


def test_sessionize_all_within_threshold():
    log = log_from_minutes({"g1": [(0, "a"), (5, "b")], "g2": [(0, "b"), (3, "a")]})
    seqs = sessionize(log, 20 * MIN)
    assert len(seqs) == 2
    assert {s.unit_id for s in seqs} == {"g1", "g2"}


def test_sessionize_quantile_policy():
    log = log_from_minutes({"g": [(0, "a"), (5, "b"), (35, "a"), (40, "b")]})
    policy = SessionizationPolicy("quantile_gap", quantile=0.9)
    assert policy.threshold(log) == pytest.approx(25 * MIN)
    seqs = sessionize(log, policy)
    assert [s.states for s in seqs] == [(0, 1), (0, 1)]


def test_policy_validation():
    with pytest.raises(ConfigError):
        SessionizationPolicy("fixed_gap", gap=0)
    with pytest.raises(ConfigError):
        SessionizationPolicy("quantile_gap", quantile=1.5)
    with pytest.raises(ConfigError):
        SessionizationPolicy("by_vibes")


times_strategy = st.lists(st.integers(0, 200), min_size=1, max_size=40)


def _log_from_offsets(offsets_per_unit):
    units = {}
    for u, offsets in enumerate(offsets_per_unit):
        t, events = 0, []
        for k, dt in enumerate(offsets):
            t += dt
            events.append((t, "abc"[k % 3]))
        units[f"g{u}"] = events
    return log_from_minutes(units)


@settings(max_examples=60, deadline=None)
@given(st.lists(times_strategy, min_size=1, max_size=4), st.integers(1, 150))
def test_sessionize_properties(offsets, gap):
    log = _log_from_offsets(offsets)
    seqs = sessionize(log, gap * MIN)
    # conservation and order
    assert sum(len(s) for s in seqs) == len(log)
    for unit, events in log.by_unit().items():
        joined = [x for s in seqs if s.unit_id == unit for x in s.states]
        assert joined == [log.alphabet.index[e.code] for e in events]
    # idempotence
    again = sessionize(seqs, gap * MIN)
    assert [(s.unit_id, s.session_id, s.states) for s in again] == \
        [(s.unit_id, s.session_id, s.states) for s in seqs]
    # monotonicity in the threshold
    assert len(sessionize(log, (gap + 37) * MIN)) <= len(seqs)


def _two_actor_seqs():
    log = ingest_text(
        "unit,actor,timestamp,code\n"
        "g1,A,0,x\ng1,B,60,y\ng1,A,120,y\n"
        "g2,B,0,x\ng2,B,60,x\n"
    )
    return sessionize(log, 3600)


def test_filter_by_actor_keeps_only_their_events():
    seqs = filter_unit(_two_actor_seqs(), actor="A")
    assert len(seqs) == 1
    assert seqs[0].actors == ("A", "A")
    assert seqs[0].states == (0, 1)


def test_filter_by_unit_and_missing_selection():
    seqs = _two_actor_seqs()
    assert [s.unit_id for s in filter_unit(seqs, unit="g2")] == ["g2"]
    with pytest.raises(EmptySelectionError, match="nobody"):
        filter_unit(seqs, actor="nobody")
    with pytest.raises(EmptySelectionError, match="g9"):
        filter_unit(seqs, unit="g9")


def test_merge_units_concatenates_sessions():
    log = log_from_minutes({"g": [(0, "a"), (100, "b"), (200, "a")]})
    seqs = sessionize(log, 20 * MIN)
    assert len(seqs) == 3
    merged = merge_units(seqs)
    assert len(merged) == 1 and merged[0].states == (0, 1, 0)


def test_covariates_roundtrip():
    table = load_covariates(io.StringIO("unit,grade,size\ng1,3.5,8\ng2,4,7\n"))
    assert table == {"g1": {"grade": 3.5, "size": 8.0}, "g2": {"grade": 4.0, "size": 7.0}}
    seqs = attach_covariates(_two_actor_seqs(), table)
    assert seqs[0].covariates["grade"] == 3.5
    with pytest.raises(DataError, match="g2"):
        attach_covariates(_two_actor_seqs(), {"g1": {}})
    with pytest.raises(RowError):
        load_covariates(io.StringIO("unit,grade\ng1,high\n"))


def test_group_sequences_uses_event_attributes():
    log = ingest_text("unit,actor,timestamp,code,level\ng1,a,0,x,high\ng2,a,0,y,low\n")
    groups = group_sequences(sessionize(log, 60), "level")
    assert sorted(groups) == ["high", "low"]


def test_state_sequence_must_be_nonempty():
    with pytest.raises(DataError):
        StateSequence("u", 0, ())
