import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attenmixer import data
from attenmixer.data import RawSession, Session, SplitRule
from attenmixer.errors import EmptyAfterFilter, EmptyInput, InvalidRule, ParseError


def write(tmp_path, text, name="events.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def raw(sid, items, t0=0):
    return RawSession(sid, tuple(str(i) for i in items), tuple(range(t0, t0 + len(items))))


class TestLoadEvents:
    def test_groups_by_session(self, tmp_path):
        path = write(tmp_path, "session_id,item_id,timestamp\ns1,a,1\ns1,b,2\ns1,c,3\n")
        sessions = data.load_events(path)
        assert len(sessions) == 1
        assert sessions[0].items == ("a", "b", "c")

    def test_sorted_by_timestamp(self, tmp_path):
        path = write(tmp_path, "session_id,item_id,timestamp\ns1,a,30\ns1,b,10\ns2,x,5\ns1,c,20\n")
        sessions = data.load_events(path)
        assert sessions[0].items == ("b", "c", "a")
        assert sessions[0].times == (10, 20, 30)
        assert sessions[1].session_id == "s2"

    def test_malformed_row(self, tmp_path):
        path = write(tmp_path, "session_id,item_id,timestamp\ns1,a,1\ns1,b\n")
        with pytest.raises(ParseError, match="line 3"):
            data.load_events(path)

    def test_bad_timestamp(self, tmp_path):
        path = write(tmp_path, "session_id,item_id,timestamp\ns1,a,yesterday\n")
        with pytest.raises(ParseError, match="line 2"):
            data.load_events(path)

    def test_bad_header(self, tmp_path):
        with pytest.raises(ParseError):
            data.load_events(write(tmp_path, "sid,item,ts\ns1,a,1\n"))

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyInput):
            data.load_events(write(tmp_path, "session_id,item_id,timestamp\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.load_events(tmp_path / "nope.csv")

    def test_tsv_user_streams(self, tmp_path):
        path = write(tmp_path, "u1\ta\t0\nu1\tb\t100\nu2\tc\t5\n", "events.tsv")
        streams = data.load_events(path, "tsv")
        assert [s.items for s in streams] == [("a", "b"), ("c",)]


class TestFilterAndIndex:
    def test_short_sessions_dropped(self):
        sessions, vocab = data.filter_and_index([raw("a", [1, 2]), raw("b", [3])], 2, 1)
        assert [s.session_id for s in sessions] == ["a"]
        assert len(vocab) == 2

    def test_rare_item_removed_and_session_shortened(self):
        corpus = [raw(f"s{k}", [1, 2, 3]) for k in range(5)] + [raw("odd", [1, 2, 9])]
        sessions, vocab = data.filter_and_index(corpus, min_session_len=2, min_item_freq=5)
        assert "9" not in vocab
        assert sessions[-1].items == (vocab.encode("1"), vocab.encode("2"))

    def test_cascade_to_fixpoint(self):
        # removing item 9 shortens "b" to length 1; dropping "b" leaves item 5 with 1 use
        corpus = [raw("a", [5, 7, 7]), raw("b", [5, 9]), raw("c", [7, 7])]
        sessions, vocab = data.filter_and_index(corpus, min_session_len=2, min_item_freq=2)
        assert set(vocab.ids) == {"7"}
        assert [s.session_id for s in sessions] == ["a", "c"]

    def test_top_k_with_tie_break(self):
        # frequencies: 1:3, 2:3, 3:3, 4:1 -> top 2 by freq desc then id asc = {1, 2}
        corpus = [raw("a", [1, 2, 3]), raw("b", [1, 2, 3]), raw("c", [3, 2, 1, 4])]
        _, vocab = data.filter_and_index(corpus, min_session_len=2, min_item_freq=0, top_k_items=2)
        assert vocab.ids == ["1", "2"]

    def test_top_k_exact_count(self):
        rng = np.random.default_rng(0)
        corpus = [raw(f"s{k}", rng.integers(1, 400, size=6).tolist()) for k in range(800)]
        _, vocab = data.filter_and_index(corpus, 2, 0, top_k_items=300)
        assert len(vocab) == 300

    def test_numeric_ids_sort_numerically(self):
        _, vocab = data.filter_and_index([raw("a", [10, 9, 10, 9])], 2, 0)
        assert vocab.ids == ["9", "10"]

    def test_empty_after_filter(self):
        with pytest.raises(EmptyAfterFilter):
            data.filter_and_index([raw("a", [1, 2])], 2, 5)

    def test_padding_index_unused(self):
        sessions, vocab = data.filter_and_index([raw("a", [4, 5, 6]), raw("b", [6, 5])], 2, 1)
        assert all(0 not in s.items for s in sessions)
        assert {vocab.decode(i) for i in range(1, len(vocab) + 1)} == set(vocab.ids)
        with pytest.raises(KeyError):
            vocab.decode(0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.lists(st.integers(1, 15), min_size=1, max_size=8), min_size=1, max_size=40),
           st.integers(1, 3), st.integers(0, 4), st.integers(0, 10))
    def test_fixpoint_idempotent(self, corpus, min_len, min_freq, top_k):
        sessions = [raw(f"s{k}", items) for k, items in enumerate(corpus)]
        try:
            kept = data.filter_sessions(sessions, min_len, min_freq, top_k)
        except EmptyAfterFilter:
            return
        assert data.filter_sessions(kept, min_len, min_freq, top_k) == kept


class TestAugment:
    def test_three(self):
        ex = data.augment([Session((1, 2, 3))])
        assert [(e.prefix, e.target) for e in ex] == [((1,), 2), ((1, 2), 3)]

    def test_two(self):
        assert [(e.prefix, e.target) for e in data.augment([Session((4, 5))])] == [((4,), 5)]

    def test_counting(self):
        assert len(data.augment([Session((1, 2, 3, 4))] * 7)) == 7 * 3

    @given(st.lists(st.integers(1, 50), min_size=2, max_size=12))
    def test_lossless(self, items):
        ex = data.augment([Session(tuple(items))])
        assert ex[-1].prefix + (ex[-1].target,) == tuple(items)
        assert all(e.target != 0 and 0 not in e.prefix for e in ex)


class TestTemporalSplit:
    def test_last_fraction(self):
        sessions = [Session((1, 2), f"s{k}", 100 - k) for k in range(10)]
        train, test = data.temporal_split(sessions, "last-fraction:0.2")
        assert {s.session_id for s in test} == {"s0", "s1"}
        assert max(s.timestamp for s in train) <= min(s.timestamp for s in test)

    def test_interval_sessionize(self):
        hours = 3600
        stream = RawSession("u", ("a", "b"), (0, 9 * hours))
        assert len(data.sessionize([stream], 8 * hours)) == 2
        assert len(data.sessionize([stream], 10 * hours)) == 1

    def test_interval_rule(self):
        streams = [RawSession(f"u{k}", ("a", "b", "c", "d"), (k, k + 10, k + 100_000, k + 100_010))
                   for k in range(5)]
        train, test = data.temporal_split(streams, SplitRule.parse("interval:8h:0.2"))
        assert len(train) + len(test) == 10

    def test_last_week(self):
        day = 86400
        sessions = [Session((1, 2), f"s{k}", k * day) for k in range(20)]
        train, test = data.temporal_split(sessions, "last-week")
        assert len(test) == 7
        assert max(s.timestamp for s in train) < min(s.timestamp for s in test)

    def test_last_week_degenerate(self):
        sessions = [Session((1, 2), f"s{k}", k * 60) for k in range(10)]
        with pytest.raises(InvalidRule):
            data.temporal_split(sessions, "last-week")

    def test_bad_rule(self):
        with pytest.raises(InvalidRule):
            SplitRule.parse("random")
        with pytest.raises(InvalidRule):
            SplitRule.parse("last-fraction:1.5")

    @given(st.lists(st.integers(0, 1000), min_size=2, max_size=60), st.floats(0.05, 0.9))
    def test_train_not_later_than_test(self, stamps, frac):
        sessions = [Session((1, 2), f"s{k}", t) for k, t in enumerate(stamps)]
        try:
            train, test = data.temporal_split(sessions, SplitRule("last-fraction", frac))
        except InvalidRule:
            return
        assert max(s.timestamp for s in train) <= min(s.timestamp for s in test)
        assert len(train) + len(test) == len(sessions)


class TestBatches:
    def examples(self, n):
        return [data.TrainingExample(tuple(range(1, 1 + (k % 5) + 1)), 1) for k in range(n)]

    def test_sizes(self):
        sizes = [len(b) for b in data.batch_iter(self.examples(250), 100)]
        assert sizes == [100, 100, 50]

    def test_padding_and_mask(self):
        batch = data.make_batch([(3, 4), (1, 2, 3, 4, 5)], [1, 2])
        assert batch.items.shape == (2, 5)
        assert batch.mask.sum(axis=1).tolist() == [2, 5]
        assert batch.items[0].tolist() == [3, 4, 0, 0, 0]
        assert batch.lengths.tolist() == [2, 5]

    def test_seeded_shuffle(self):
        ex = self.examples(37)
        a = [b.items.tolist() for b in data.batch_iter(ex, 10, shuffle_seed=4)]
        b = [b.items.tolist() for b in data.batch_iter(ex, 10, shuffle_seed=4)]
        c = [b.items.tolist() for b in data.batch_iter(ex, 10, shuffle_seed=5)]
        assert a == b
        assert a != c


class TestPrepareAndCache:
    def fixed(self):
        rng = np.random.default_rng(1)
        out = []
        for k in range(200):
            n = int(rng.integers(2, 7))
            items = tuple(str(x) for x in rng.integers(1, 12, size=n))
            out.append(RawSession(f"s{k}", items, tuple(k * 100 + i for i in range(n))))
        return out

    def test_prepare(self):
        ds = data.prepare_dataset(self.fixed(), min_item_freq=1)
        assert ds.train and ds.validation and ds.test
        assert max(e.timestamp for e in ds.train) <= min(e.timestamp for e in ds.validation)
        for split in (ds.train, ds.validation, ds.test):
            assert all(1 <= e.target <= ds.n_items and min(e.prefix) >= 1 for e in split)
        stats = ds.meta["stats"]
        assert set(stats) >= {"clicks", "sessions", "items", "average_length"}
        n_val = len(ds.validation)
        assert n_val == int((len(ds.train) + n_val) * 0.2 + 0.5)

    def test_test_items_restricted_to_train(self):
        sessions = [raw(f"a{k}", [1, 2, 3], k * 10) for k in range(8)] + [raw("late", [1, 99, 2], 1000),
                                                                          raw("late2", [98, 97], 1001)]
        ds = data.prepare_dataset(sessions, min_item_freq=1, split="last-fraction:0.2")
        assert "99" not in ds.vocab
        assert ds.meta["test_events_dropped_unseen_items"] == 3
        assert ds.meta["test_sessions_dropped"] == 1
        assert [(e.prefix, e.target) for e in ds.test] == [((1,), 2)]

    def test_cache_round_trip_is_deterministic(self, tmp_path):
        ds = data.prepare_dataset(self.fixed(), min_item_freq=1)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        data.save_dataset(ds, p1, {"x": 1})
        back = data.load_dataset(p1)
        data.save_dataset(back, p2, {"x": 1})
        assert p1.read_bytes() == p2.read_bytes()
        assert back.vocab.digest() == ds.vocab.digest()
        assert [(e.prefix, e.target) for e in back.test] == [(e.prefix, e.target) for e in ds.test]
