import logging

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revmask.data import (
    CASIA_VIEWS,
    MIN_FRAMES,
    DatasetIndex,
    DatasetLayoutError,
    EmptySilhouetteError,
    SequenceKey,
    SilhouetteSequence,
    SplitSpec,
    WalkerIdentity,
    cached_casia_b,
    casia_split,
    load_cache,
    load_casia_b,
    pixel_mean_probe_separable,
    preprocess_sequence,
    preprocess_silhouette,
    read_manifest_header,
    read_seq,
    render_walker,
    sample_frames,
    synth_generate,
    synth_split,
    to_uint8,
    write_cache,
    write_seq,
)


def walker_frame(seed=3, view=90, t=0.0, condition="nm"):
    return render_walker(WalkerIdentity.from_seed(seed), view, t, condition, 0.0, 1.0)


class TestPreprocess:
    def test_output_contract(self):
        out = preprocess_silhouette(walker_frame())
        assert out.shape == (64, 44) and out.dtype == np.float32
        assert out.min() >= 0 and out.max() <= 1
        assert out[0].any() and out[-1].any()

    def test_idempotent(self):
        for seed in range(5):
            once = preprocess_silhouette(walker_frame(seed, view=18 * seed))
            twice = preprocess_silhouette(once)
            assert np.abs(twice - once).max() <= 1 / 255

    def test_translation_invariant(self):
        raw = walker_frame()
        wide = np.zeros((raw.shape[0], raw.shape[1] + 80), np.uint8)
        wide[:, 10 : 10 + raw.shape[1]] = raw
        shifted = np.roll(wide, 37, axis=1)
        a, b = preprocess_silhouette(wide), preprocess_silhouette(shifted)
        best = min(np.abs(np.roll(a, s, axis=1) - b).max() for s in (-1, 0, 1))
        assert best <= 1 / 255

    def test_empty_frame(self):
        with pytest.raises(EmptySilhouetteError):
            preprocess_silhouette(np.zeros((100, 80), np.uint8))

    def test_sequence_drops_empty_frames(self, caplog):
        good = walker_frame()
        frames = [good] * MIN_FRAMES + [np.zeros_like(good)]
        with caplog.at_level(logging.WARNING):
            out = preprocess_sequence(frames, name="x")
        assert out.shape == (MIN_FRAMES, 64, 44) and out.dtype == np.uint8
        assert "empty" in caplog.text.lower() or "discard" in caplog.text.lower()
        assert preprocess_sequence([good] * (MIN_FRAMES - 1) + [np.zeros_like(good)]) is None

    def test_to_uint8(self):
        assert to_uint8(np.array([[0.0, 0.5, 1.0]])).tolist() == [[0, 128, 255]]


def make_stub(root, subjects, views=CASIA_VIEWS, conds=(("nm", 6), ("bg", 2), ("cl", 2))):
    for s in subjects:
        for c, n in conds:
            for t in range(1, n + 1):
                for v in views:
                    (root / s / f"{c}-{t:02d}" / f"{v:03d}").mkdir(parents=True)


class TestLayout:
    def test_full_stub_counts(self, tmp_path):
        make_stub(tmp_path, [f"{i:03d}" for i in range(1, 125)])
        split = casia_split("lt")
        index = load_casia_b(tmp_path, split)
        assert len(index) == 13_640
        assert len(split.train_subjects) == 74 and len(split.test_subjects) == 50
        assert split.train_subjects[-1] == "074" and split.test_subjects[0] == "075"
        test = set(split.test_subjects)
        for cond, rules in split.probes.items():
            probe = index.select(test, rules)
            assert len(probe) == 50 * 2 * 11
        assert len(index.select(test, split.gallery)) == 50 * 4 * 11
        again = load_casia_b(tmp_path, split)
        assert again.keys == index.keys

    def test_split_sizes(self):
        assert [len(casia_split(n).train_subjects) for n in ("st", "mt", "lt")] == [24, 62, 74]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 40), st.data())
    def test_splits_are_disjoint(self, n, data):
        k = data.draw(st.integers(1, n - 1))
        split = synth_split([f"{i:03d}" for i in range(n)], k)
        assert not set(split.train_subjects) & set(split.test_subjects)
        assert len(split.train_subjects) + len(split.test_subjects) == n
        with pytest.raises(ValueError):
            SplitSpec("x", ("a", "b"), ("b",))

    def test_unknown_view(self, tmp_path):
        make_stub(tmp_path, ["001"], views=(0, 17))
        with pytest.raises(DatasetLayoutError):
            load_casia_b(tmp_path)

    def test_missing_report(self, tmp_path, caplog):
        make_stub(tmp_path, ["001", "002"], conds=(("nm", 6), ("bg", 2)))
        split = SplitSpec("x", ("001",), ("002",))
        with caplog.at_level(logging.WARNING):
            load_casia_b(tmp_path, split)
        assert "44 expected sequence directories missing" in caplog.text
        assert "001/cl-01/000" in caplog.text

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_casia_b(tmp_path / "nope")

    def test_png_frames_and_cache(self, tmp_path, caplog):
        raw = tmp_path / "raw"
        seq_dir = raw / "001" / "nm-01" / "090"
        seq_dir.mkdir(parents=True)
        for i in range(16):
            cv2.imwrite(str(seq_dir / f"{i:04d}.png"), walker_frame(t=i))
        cv2.imwrite(str(seq_dir / "0016.png"), np.zeros((150, 110), np.uint8))
        index = load_casia_b(raw)
        frames = index.frames(0)
        assert frames.shape == (16, 64, 44)
        cache = tmp_path / "cache"
        a = cached_casia_b(raw, cache)
        assert np.array_equal(a.frames(0), frames)
        stamp = (cache / "001/nm-01/090/frames.seq").stat().st_mtime_ns
        b = cached_casia_b(raw, cache)
        assert (cache / "001/nm-01/090/frames.seq").stat().st_mtime_ns == stamp
        assert np.array_equal(b.frames(0), frames)
        cv2.imwrite(str(seq_dir / "0000.png"), walker_frame(t=40))
        c = cached_casia_b(raw, cache)
        assert not np.array_equal(c.frames(0), frames)

    def test_too_few_frames(self, tmp_path):
        seq_dir = tmp_path / "001" / "nm-01" / "000"
        seq_dir.mkdir(parents=True)
        for i in range(3):
            cv2.imwrite(str(seq_dir / f"{i}.png"), walker_frame(t=i))
        with pytest.raises(EmptySilhouetteError):
            load_casia_b(tmp_path).frames(0)


class TestSampling:
    def test_train_window(self):
        frames = np.arange(100)
        out = sample_frames(frames, 30, True, np.random.default_rng(0))
        assert len(out) == 30 and np.all(np.diff(out) == 1)

    def test_short_sequence_cycles(self):
        out = sample_frames(np.arange(10), 30, True, np.random.default_rng(0))
        assert out.tolist() == list(range(10)) * 3

    def test_eval_returns_all(self):
        assert len(sample_frames(np.arange(77), 30, False)) == 77

    def test_errors(self):
        with pytest.raises(ValueError):
            sample_frames(np.arange(0), 5, True, np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_frames(np.arange(5), 0, True, np.random.default_rng(0))


@pytest.fixture(scope="module")
def small_synth():
    return synth_generate(4, views=(0, 90, 144), conditions=["nm", "bg", "cl"], frames=20, seed=1)


class TestSynthetic:
    def test_counts_and_contract(self, small_synth):
        assert len(small_synth) == 4 * 3 * 3
        for i in range(len(small_synth)):
            seq = small_synth.sequence(i)
            assert seq.frames.shape == (20, 64, 44)
            assert seq.as_float().max() <= 1.0

    def test_deterministic(self, small_synth):
        again = synth_generate(4, views=(0, 90, 144), conditions=["nm", "bg", "cl"], frames=20, seed=1)
        assert again.keys == small_synth.keys
        assert all(np.array_equal(again.frames(i), small_synth.frames(i)) for i in range(len(again)))

    def test_identities_differ(self):
        a = synth_generate(3, views=(90,), conditions=["nm"], frames=15, seed=2)
        for i in range(3):
            for j in range(i + 1, 3):
                diff = (a.frames(i) > 127) != (a.frames(j) > 127)
                assert diff.mean() >= 0.01

    def test_conditions_change_shape(self):
        ident = WalkerIdentity.from_seed(11)
        nm, bg, cl = (render_walker(ident, 90, 0.0, c, 0.0, 1.0) for c in ("nm", "bg", "cl"))
        assert (bg > 0).sum() > (nm > 0).sum()
        assert (cl > 0).sum() > (nm > 0).sum()

    def test_view_mirroring(self):
        ident = WalkerIdentity.from_seed(5)
        a = render_walker(ident, 54, 0.0, "nm", 0.0, 1.0)
        b = render_walker(ident, 126, 0.0, "nm", 0.0, 1.0)
        assert np.abs(preprocess_silhouette(a) - preprocess_silhouette(b)[:, ::-1]).mean() < 0.05

    def test_not_pixel_mean_separable(self, small_synth):
        assert not pixel_mean_probe_separable(small_synth)

    def test_separability_oracle(self):
        keys = [SequenceKey(s, "nm", 1, 0) for s in ("a", "a", "b", "b")]
        apart = DatasetIndex(keys, [np.full((1, 64, 44), v, np.uint8) for v in (1, 2, 10, 11)])
        mixed = DatasetIndex(keys, [np.full((1, 64, 44), v, np.uint8) for v in (1, 10, 2, 11)])
        assert pixel_mean_probe_separable(apart) and not pixel_mean_probe_separable(mixed)

    def test_needs_two_ids(self):
        with pytest.raises(ValueError):
            synth_generate(1)


class TestCache:
    def test_seq_round_trip(self, tmp_path):
        frames = np.random.default_rng(0).integers(0, 256, size=(7, 64, 44), dtype=np.uint8)
        write_seq(tmp_path / "a.seq", frames)
        assert np.array_equal(read_seq(tmp_path / "a.seq"), frames)
        (tmp_path / "b.seq").write_bytes((tmp_path / "a.seq").read_bytes()[:-5])
        with pytest.raises(DatasetLayoutError):
            read_seq(tmp_path / "b.seq")

    def test_manifest_round_trip(self, tmp_path, small_synth):
        write_cache(small_synth, tmp_path, {"seed": 1, "ids": 4})
        assert read_manifest_header(tmp_path) == {"seed": "1", "ids": "4"}
        back = load_cache(tmp_path, verify=True)
        assert back.keys == small_synth.keys
        assert all(np.array_equal(back.frames(i), small_synth.frames(i)) for i in range(len(back)))
        target = tmp_path / small_synth.keys[0].relpath / "frames.seq"
        data = bytearray(target.read_bytes())
        data[-1] ^= 1
        target.write_bytes(bytes(data))
        with pytest.raises(DatasetLayoutError):
            load_cache(tmp_path, verify=True)

    def test_sequence_validation(self):
        with pytest.raises(ValueError):
            SilhouetteSequence(SequenceKey("a", "nm", 1, 0), np.zeros((0, 64, 44), np.uint8))
