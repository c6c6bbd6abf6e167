import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comp_cse.errors import InvalidArgumentError, SingularChannelError
from comp_cse.simgen import (
    JT,
    RSRP_P_COLUMNS,
    RSRP_S_COLUMNS,
    ST,
    RawFrame,
    SystemConfig,
    TracePoint,
    achievable_rate,
    beam_rsrps,
    dft_codebook,
    draw_channel,
    emit_frames,
    frames_from_records,
    frames_to_records,
    gen_trace,
    zf_beamformer,
)


@pytest.fixture
def cfg():
    return SystemConfig(frames_per_second=4, seed=7)


def unit_cfg(**kw):
    # per-stream power / noise power == 1
    return SystemConfig(per_stream_power=1.0, noise_power=1.0, **kw)


def test_config_rejects_bad_values():
    with pytest.raises(InvalidArgumentError):
        SystemConfig(num_streams=3, num_rx_antennas=2)
    with pytest.raises(InvalidArgumentError):
        SystemConfig(codebook_size=4)
    with pytest.raises(InvalidArgumentError):
        SystemConfig(corruption_fraction=1.5)
    with pytest.raises(InvalidArgumentError):
        SystemConfig(noise_power=0.0)


class TestTrace:
    def test_indexing(self, cfg):
        trace = gen_trace(cfg, 3)
        assert [p.second_index for p in trace] == [0, 1, 2]

    def test_deterministic(self, cfg):
        assert gen_trace(cfg, 50) == gen_trace(cfg, 50)

    def test_seed_changes_trace(self):
        a = gen_trace(SystemConfig(seed=7), 20)
        b = gen_trace(SystemConfig(seed=8), 20)
        assert any(p.ue_distance_primary_m != q.ue_distance_primary_m for p, q in zip(a, b))

    def test_rejects_empty(self, cfg):
        with pytest.raises(InvalidArgumentError):
            gen_trace(cfg, 0)

    def test_smooth_walk_and_handover(self):
        cfg = SystemConfig(seed=3, walk_step_m=5.0, handover_interval_s=10)
        trace = gen_trace(cfg, 400)
        dp = np.diff([p.ue_distance_primary_m for p in trace])
        ds = np.diff([p.ue_distance_secondary_m for p in trace])
        assert np.abs(dp).max() <= 5.0 + 1e-12
        assert np.abs(ds).max() <= 5.0 + 1e-12
        for a, b in zip(trace, trace[1:]):
            assert a.primary_bs_id != a.secondary_bs_id
            assert a.ue_distance_primary_m > 0
            if b.second_index % 10:
                assert (a.primary_bs_id, a.secondary_bs_id) == (b.primary_bs_id, b.secondary_bs_id)


class TestChannel:
    def test_shape(self):
        cfg = SystemConfig(num_rx_antennas=2, num_tx_antennas=4)
        ch = draw_channel(cfg, TracePoint(0, 100.0, 150.0, 0, 1))
        assert ch.h_primary.shape == (2, 4)
        assert ch.h_secondary.shape == (2, 4)

    def test_deterministic(self, cfg):
        p = TracePoint(5, 120.0, 180.0, 2, 3)
        a, b = draw_channel(cfg, p, 3), draw_channel(cfg, p, 3)
        assert np.array_equal(a.h_primary, b.h_primary)
        assert np.array_equal(a.h_secondary, b.h_secondary)

    def test_pathloss_ratio_monte_carlo(self):
        # E|H|_F^2 = Nr*Nt*d^-alpha without shadowing; 100 m vs 200 m at alpha 3 -> 8
        cfg = SystemConfig(shadowing_sigma_db=0.0, pathloss_exponent=3.0, seed=11)
        near = TracePoint(0, 100.0, 100.0, 0, 1)
        far = TracePoint(0, 200.0, 200.0, 0, 1)
        e_near = np.mean([np.sum(np.abs(draw_channel(cfg, near, k).h_primary) ** 2) for k in range(10000)])
        e_far = np.mean([np.sum(np.abs(draw_channel(cfg, far, k).h_primary) ** 2) for k in range(10000)])
        assert e_near / e_far == pytest.approx(8.0, rel=0.05)


class TestZeroForcing:
    def test_identity(self):
        np.testing.assert_allclose(zf_beamformer(np.eye(2), 2).v, np.eye(2), atol=1e-15)

    def test_scaled_identity(self):
        np.testing.assert_allclose(zf_beamformer(2 * np.eye(2), 2).v, np.eye(2), atol=1e-15)

    def test_random_diagonal_product(self):
        rng = np.random.default_rng(0)
        h = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
        v = zf_beamformer(h, 2).v
        prod = h[:2] @ v
        off = prod - np.diag(np.diag(prod))
        assert np.abs(off).max() < 1e-9 * np.abs(np.diag(prod)).min()
        np.testing.assert_allclose(np.linalg.norm(v, axis=0), 1.0, atol=1e-12)

    def test_singular(self):
        h = np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]])
        with pytest.raises(SingularChannelError):
            zf_beamformer(h, 2)

    def test_uses_first_rows_only(self):
        rng = np.random.default_rng(1)
        h = rng.standard_normal((3, 6)) + 1j * rng.standard_normal((3, 6))
        v = zf_beamformer(h, 2).v
        assert v.shape == (6, 2)
        prod = h[:2] @ v
        assert abs(prod[0, 1]) < 1e-9 * abs(prod[0, 0])


class TestRate:
    def test_zero_channel(self):
        z = np.zeros((2, 2))
        assert achievable_rate(z, np.eye(2), z, np.eye(2), unit_cfg(), JT) == 0.0

    def test_identity_st(self):
        assert achievable_rate(np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2), unit_cfg(), ST) == pytest.approx(2.0, abs=1e-12)

    def test_coherent_jt(self):
        i = np.eye(2)
        assert achievable_rate(i, i, i, i, unit_cfg(), JT) == pytest.approx(np.log2(25.0), abs=1e-12)

    def test_phase_alignment_makes_combining_coherent(self):
        # secondary precoder arrives with the opposite phase; alignment must undo it
        i = np.eye(2)
        assert achievable_rate(i, i, i, -i, unit_cfg(), JT) == pytest.approx(np.log2(25.0), abs=1e-12)

    def test_non_finite(self):
        h = np.array([[np.nan, 0], [0, 1]])
        with pytest.raises(InvalidArgumentError):
            achievable_rate(h, np.eye(2), None, None, unit_cfg(), ST)

    def test_monotone_in_snr(self):
        rng = np.random.default_rng(4)
        hp = rng.standard_normal((2, 8)) + 1j * rng.standard_normal((2, 8))
        hs = rng.standard_normal((2, 8)) + 1j * rng.standard_normal((2, 8))
        vp, vs = zf_beamformer(hp, 2).v, zf_beamformer(hs, 2).v
        for mode in (ST, JT):
            rates = [achievable_rate(hp, vp, hs, vs, SystemConfig(per_stream_power=p, noise_power=1.0), mode)
                     for p in (0.1, 1.0, 10.0)]
            assert rates == sorted(rates)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_jt_never_below_st_when_rows_equal_streams(self, seed):
        rng = np.random.default_rng(seed)
        hp = rng.standard_normal((2, 8)) + 1j * rng.standard_normal((2, 8))
        hs = 0.3 * (rng.standard_normal((2, 8)) + 1j * rng.standard_normal((2, 8)))
        vp, vs = zf_beamformer(hp, 2).v, zf_beamformer(hs, 2).v
        cfg = SystemConfig(per_stream_power=1.0, noise_power=0.1)
        assert achievable_rate(hp, vp, hs, vs, cfg, JT) >= achievable_rate(hp, vp, None, None, cfg, ST)


class TestBeamRsrps:
    def test_zero_energy_clamps_to_floor(self):
        cfg = SystemConfig()
        out = beam_rsrps(np.zeros((2, 8)), cfg)
        assert list(out) == [cfg.rsrp_floor_dbm] * 8

    def test_standard_basis_codebook(self):
        cfg = SystemConfig(per_stream_power=1.0, num_rx_antennas=1, num_streams=1)
        gains = np.array([1e-3, 4e-3, 2e-3, 8e-3, 5e-4, 6e-3, 3e-3, 7e-3, 1e-4, 9e-3])
        h = gains[None, :].astype(complex) ** 0.5
        expected = np.sort(10 * np.log10(gains) + 30)[::-1][:8]
        out = beam_rsrps(h, cfg, codebook=np.eye(10))
        np.testing.assert_allclose(out, expected, atol=1e-12)
        perm = np.random.default_rng(0).permutation(10)
        np.testing.assert_allclose(beam_rsrps(h[:, perm], cfg, codebook=np.eye(10)), expected, atol=1e-12)

    def test_matches_exhaustive_codebook_scan(self):
        cfg = SystemConfig()
        rng = np.random.default_rng(9)
        h = 1e-4 * (rng.standard_normal((2, 8)) + 1j * rng.standard_normal((2, 8)))
        # brute force: evaluate each of the 16 DFT beams one at a time
        powers = []
        for k in range(16):
            w = np.array([np.exp(2j * np.pi * n * k / 16) for n in range(8)]) / np.sqrt(8)
            p = cfg.per_stream_power * sum(abs(sum(h[r, n] * w[n] for n in range(8))) ** 2 for r in range(2)) / 2
            powers.append(max(10 * np.log10(p) + 30, cfg.rsrp_floor_dbm))
        expected = sorted(powers, reverse=True)[:8]
        np.testing.assert_allclose(beam_rsrps(h, cfg), expected, atol=1e-10)

    def test_codebook_columns_unit_norm(self):
        np.testing.assert_allclose(np.linalg.norm(dft_codebook(8, 16), axis=0), 1.0, atol=1e-12)


class TestFrames:
    def test_alternation(self):
        cfg = SystemConfig(frames_per_second=2, seed=1)
        frames = emit_frames(cfg, gen_trace(cfg, 2))
        assert list(frames["mode"]) == [ST, ST, JT, JT]
        assert list(frames["timestamp_ms"]) == [0, 500, 1000, 1500]
        assert frames["secondary_bs_id"].isna().tolist() == [True, True, False, False]

    def test_deterministic(self, cfg):
        trace = gen_trace(cfg, 6)
        assert emit_frames(cfg, trace).equals(emit_frames(cfg, trace))

    def test_empty_trace(self, cfg):
        with pytest.raises(InvalidArgumentError):
            emit_frames(cfg, [])

    def test_jt_rsrps_complete_and_sorted(self, cfg):
        frames = emit_frames(cfg, gen_trace(cfg, 20))
        jt = frames[frames["mode"] == JT]
        st_rows = frames[frames["mode"] == ST]
        assert not jt[RSRP_P_COLUMNS + RSRP_S_COLUMNS].isna().any().any()
        assert st_rows[RSRP_P_COLUMNS + RSRP_S_COLUMNS].isna().all().all()
        for cols in (RSRP_P_COLUMNS, RSRP_S_COLUMNS):
            assert (np.diff(jt[cols].to_numpy(), axis=1) <= 0).all()
        assert (frames["data_volume_bits"] >= 0).all()

    def test_records_round_trip(self, cfg):
        frames = emit_frames(cfg, gen_trace(cfg, 4))
        records = frames_to_records(frames)
        assert all(isinstance(r, RawFrame) for r in records)
        back = frames_from_records(records)
        assert back.equals(frames)

    def test_jt_volume_beats_st_without_impairments(self):
        cfg = SystemConfig(frames_per_second=3, seed=21, corruption_fraction=0.0,
                           volume_noise_sigma=0.0, rsrp_noise_db=0.0)
        frames = emit_frames(cfg, gen_trace(cfg, 200))
        per_second = frames.groupby(frames["timestamp_ms"] // 1000)["data_volume_bits"].mean().to_numpy()
        assert np.all(per_second[1::2] >= per_second[0::2])

    def test_raw_frame_invariants(self):
        with pytest.raises(InvalidArgumentError):
            RawFrame(0, 1, 2, ST, 1.0)
        with pytest.raises(InvalidArgumentError):
            RawFrame(0, 1, 2, JT, 1.0, tuple(range(16)))  # ascending RSRPs
        RawFrame(0, 1, 2, JT, 1.0, tuple(range(8, 0, -1)) * 2)
