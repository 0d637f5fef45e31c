import json
from collections import Counter

import numpy as np
import pytest

from qoe_lens import calibration as cal
from qoe_lens.featurize import RTP_FEATURES, extract_rtp_features, slot_index
from qoe_lens.ground_truth import Rating
from qoe_lens.stream_classify import PT_RETX, classify_trace
from qoe_lens.synth import (
    ConditionProfile,
    CorpusSpec,
    InvalidProfile,
    bandwidth_profile,
    default_corpus_spec,
    generate_session,
    sample_slot_traffic,
)
from qoe_lens.trace_ingest import ConditionKind


def limit_profile(kbps=250.0, seed=1, duration=20.0):
    return ConditionProfile(kind=ConditionKind.BANDWIDTH_LIMIT, session_id="s",
                            seed=seed, duration=duration, limit_kbps=kbps)


class TestProfileValidation:
    def test_limit_vocabulary(self):
        with pytest.raises(InvalidProfile):
            limit_profile(kbps=100.0).validate()

    def test_loss_vocabulary(self):
        p = ConditionProfile(kind=ConditionKind.PACKET_LOSS, session_id="s",
                             seed=1, loss_pct=3.0)
        with pytest.raises(InvalidProfile):
            p.validate()

    def test_drop_target_range(self):
        p = ConditionProfile(kind=ConditionKind.BANDWIDTH_DROP, session_id="s",
                             seed=1, drop_to_kbps=500.0, drop_times_s=(60.0,))
        with pytest.raises(InvalidProfile):
            p.validate()

    def test_drop_needs_times(self):
        p = ConditionProfile(kind=ConditionKind.BANDWIDTH_DROP, session_id="s",
                             seed=1, drop_to_kbps=50.0)
        with pytest.raises(InvalidProfile):
            p.validate()

    def test_profile_dict_roundtrip(self):
        p = ConditionProfile(kind=ConditionKind.BANDWIDTH_DROP, session_id="d",
                             seed=9, drop_to_kbps=80.0, drop_times_s=(30.0, 90.0))
        assert ConditionProfile.from_dict(p.to_dict()) == p


class TestBandwidthProfile:
    def test_limit_noise_band(self):
        bw = bandwidth_profile(limit_profile(250.0, duration=240.0))
        assert len(bw) == 240
        assert bw.min() >= 237.5 and bw.max() <= 262.5

    def test_loss_is_flat_250(self):
        p = ConditionProfile(kind=ConditionKind.PACKET_LOSS, session_id="s",
                             seed=1, duration=100.0, loss_pct=5.0)
        bw = bandwidth_profile(p)
        assert np.all(bw == 250.0)

    def test_drop_window_and_recovery(self):
        p = ConditionProfile(kind=ConditionKind.BANDWIDTH_DROP, session_id="s",
                             seed=1, duration=120.0, drop_to_kbps=50.0,
                             drop_times_s=(60.0,))
        bw = bandwidth_profile(p)
        assert np.all(bw[:60] == 250.0)
        assert np.all(bw[60:70] == 50.0)
        # first drop recovers at +40 kBps/s
        assert bw[71] == pytest.approx(90.0)
        assert bw[72] == pytest.approx(130.0)
        assert np.all(bw[76:] == 250.0)

    def test_second_drop_recovers_slowly(self):
        p = ConditionProfile(kind=ConditionKind.BANDWIDTH_DROP, session_id="s",
                             seed=1, duration=200.0, drop_to_kbps=50.0,
                             drop_times_s=(40.0, 100.0))
        bw = bandwidth_profile(p)
        assert bw[111] == pytest.approx(60.0)   # +10 kBps/s after later drops
        assert bw[120] == pytest.approx(150.0)


class TestSampleSlotTraffic:
    def test_reference_slot_at_250(self):
        rng = np.random.default_rng(0)
        packets, fps, piqe, brisque = sample_slot_traffic(250.0, 0.0, rng)
        video = [p for p in packets if p.payload_len > 275]
        assert len(video) == pytest.approx(238, abs=3)
        mean_size = np.mean([p.payload_len for p in video])
        assert mean_size == pytest.approx(1052, abs=25)
        assert 17 <= fps <= 23

    def test_low_bandwidth_slot(self):
        rng = np.random.default_rng(1)
        piqes = []
        for _ in range(40):
            packets, fps, piqe, _ = sample_slot_traffic(15.0, 0.0, rng)
            assert 12 <= fps <= 18
            piqes.append(piqe)
        assert np.mean(piqes) == pytest.approx(cal.piqe_center(15.0), abs=1.5)
        assert np.mean(piqes) > 50  # Poor band

    def test_loss_creates_gaps_and_retx(self):
        rng = np.random.default_rng(2)
        packets, _, _, _ = sample_slot_traffic(250.0, 10.0, rng)
        video = [p for p in packets if p.payload_len > 275]
        out = extract_rtp_features(sorted(video, key=lambda p: (p.ts, p.rtp.seq)))
        idx = {n: i for i, n in enumerate(RTP_FEATURES)}
        assert out[idx["seq_gap_count"]] > 0
        assert any(p.rtp.payload_type == PT_RETX for p in video)

    def test_stable_quality_flag_pins_good_band(self):
        rng = np.random.default_rng(3)
        vals = [sample_slot_traffic(250.0, 0.0, rng, stable_quality=True)[2]
                for _ in range(50)]
        assert np.mean(vals) == pytest.approx(cal.PIQE_LOSS_CONDITION_CENTER, abs=1.0)

    def test_mean_size_monotone_in_bandwidth(self):
        for lo, hi in [(30, 60), (60, 125), (125, 250), (40, 200)]:
            assert cal.mean_video_size(lo) < cal.mean_video_size(hi)


class TestGenerateSession:
    def test_shape_and_ordering(self):
        packets, labels, meta = generate_session(limit_profile(duration=20.0))
        assert len(labels) == 20
        assert [lb.key.slot_end for lb in labels] == list(range(1, 21))
        ts = [p.ts for p in packets]
        assert ts == sorted(ts)
        assert meta.condition_kind is ConditionKind.BANDWIDTH_LIMIT
        assert meta.condition_level == "250kBps"
        meta.validate()

    def test_same_seed_bit_identical(self):
        a = generate_session(limit_profile(seed=77))
        b = generate_session(limit_profile(seed=77))
        assert a[0] == b[0]
        assert a[1] == b[1]

    def test_different_seed_differs(self):
        a = generate_session(limit_profile(seed=1))
        b = generate_session(limit_profile(seed=2))
        assert a[0] != b[0]

    def test_per_slot_bandwidth_conservation(self):
        profile = limit_profile(duration=30.0, seed=5)
        packets, labels, _ = generate_session(profile)
        bw = bandwidth_profile(profile)
        video, _, _ = classify_trace(packets)
        per_slot = {}
        for p in video:
            per_slot.setdefault(slot_index(p.ts), 0)
            per_slot[slot_index(p.ts)] += p.payload_len
        for i in range(30):
            assert per_slot[i + 1] == pytest.approx(bw[i] * 1000, rel=0.10)

    def test_size_means_concentrate_at_full_bandwidth(self):
        from qoe_lens.featurize import UDP_FEATURES, featurize_session

        packets, _, meta = generate_session(limit_profile(duration=60.0, seed=8))
        video, _, _ = classify_trace(packets)
        slots = featurize_session(video, meta.duration, meta.session_id)
        i = UDP_FEATURES.index("size_mean")
        means = np.array([s.udp[i] for s in slots if s.udp[0] > 0])
        in_range = np.mean((means >= 900) & (means <= 1150))
        assert in_range >= 0.82

    def test_labels_have_ratings(self):
        _, labels, _ = generate_session(limit_profile(duration=5.0))
        for lb in labels:
            assert isinstance(lb.piqe_rating, Rating)
            assert isinstance(lb.brisque_rating, Rating)
            assert 0 <= lb.piqe <= 100 and 0 <= lb.brisque <= 100
            assert not lb.scores_missing

    def test_loss_session_fps_spread_widens(self):
        base = ConditionProfile(kind=ConditionKind.PACKET_LOSS, session_id="l0",
                                seed=11, duration=120.0, loss_pct=0.0)
        heavy = ConditionProfile(kind=ConditionKind.PACKET_LOSS, session_id="l10",
                                 seed=11, duration=120.0, loss_pct=10.0)
        _, labels0, _ = generate_session(base)
        _, labels10, _ = generate_session(heavy)
        fps0 = np.array([lb.fps for lb in labels0])
        fps10 = np.array([lb.fps for lb in labels10])
        assert fps10.std() > fps0.std()
        assert fps10.mean() < fps0.mean()

    def test_packets_never_outlive_capture(self):
        p = ConditionProfile(kind=ConditionKind.PACKET_LOSS, session_id="l",
                             seed=3, duration=10.0, loss_pct=10.0)
        packets, _, _ = generate_session(p)
        assert max(x.ts for x in packets) <= 10.0


class TestCorpusSpec:
    def test_default_composition(self):
        spec = default_corpus_spec(seed=7)
        assert len(spec.profiles) == 107
        kinds = Counter(p.kind for p in spec.profiles)
        assert kinds[ConditionKind.BANDWIDTH_LIMIT] == 55
        assert kinds[ConditionKind.BANDWIDTH_DROP] == 27
        assert kinds[ConditionKind.PACKET_LOSS] == 25

    def test_levels_evenly_distributed(self):
        spec = default_corpus_spec(seed=7)
        limit_levels = Counter(p.limit_kbps for p in spec.profiles
                               if p.kind is ConditionKind.BANDWIDTH_LIMIT)
        assert set(limit_levels.values()) == {11}
        loss_levels = Counter(p.loss_pct for p in spec.profiles
                              if p.kind is ConditionKind.PACKET_LOSS)
        assert set(loss_levels.values()) == {5}

    def test_unique_session_ids_and_seeds(self):
        spec = default_corpus_spec(seed=7)
        ids = [p.session_id for p in spec.profiles]
        seeds = [p.seed for p in spec.profiles]
        assert len(set(ids)) == len(ids)
        assert len(set(seeds)) == len(seeds)

    def test_json_roundtrip(self):
        spec = default_corpus_spec(seed=3)
        again = CorpusSpec.from_json(spec.to_json())
        assert again == spec
        json.loads(spec.to_json())  # well-formed

    def test_all_profiles_validate(self):
        for p in default_corpus_spec(seed=1).profiles:
            p.validate()
