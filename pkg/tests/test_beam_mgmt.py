"""Protocol core: SSB reception, RSRP, feedback, subsets, SINR, SE."""
import numpy as np
import pytest

from beamweaver import autodiff as ad
from beamweaver import beam_mgmt as bm
from beamweaver import codebook as cb
from beamweaver.channel import ArrayGeometry, ChannelTensor
from beamweaver.errors import ConfigError, ShapeError


def _scalar_geometry():
    return ArrayGeometry(n_x=1, n_y=1, dual_polarized=False)


def _tensor(values):
    return ChannelTensor(values=np.asarray(values, dtype=np.complex64))


# ------------------------------ SSB receive ------------------------------

def test_ssb_receive_trivial_unity():
    h = _tensor(np.ones((1, 1, 1, 1, 1, 1)))
    ssb = [cb.SsbCodebook(beams=np.ones((1, 1)), geometry=_scalar_geometry())]
    rec = bm.ssb_receive(h, ssb, sigma2=0.0, seed=0)
    np.testing.assert_allclose(rec.y.reshape(()), 1.0)


def test_ssb_receive_zero_channel():
    h = _tensor(np.zeros((1, 1, 1, 1, 1, 1)))
    ssb = [cb.SsbCodebook(beams=np.ones((1, 1)), geometry=_scalar_geometry())]
    rec = bm.ssb_receive(h, ssb, sigma2=0.0, seed=0)
    assert not rec.y.any()


def test_ssb_interference_in_interferer_column_space():
    # two cells, NT=1, N_R=2: interference seen from cell 0 must lie along
    # the other cell's channel column
    h = np.zeros((2, 1, 1, 1, 2, 1), dtype=np.complex128)
    h[0, ..., 0] = [1.0, 0.0]
    h[1, ..., 0] = [0.0, 1.0]
    ssb = [cb.SsbCodebook(beams=np.ones((1, 1)), geometry=_scalar_geometry())
           for _ in range(2)]
    rec = bm.ssb_receive(_tensor(h), ssb, sigma2=0.0, seed=0)
    intf = rec.interference[0, 0, 0, 0, 0]  # (N_R,) as seen from cell 0
    col = h[1, 0, 0, 0, :, 0]
    resid = intf - col * (np.conj(col) @ intf) / (np.conj(col) @ col)
    assert np.linalg.norm(resid) < 1e-10


def test_ssb_receive_codebook_count_mismatch():
    h = _tensor(np.ones((2, 1, 1, 1, 1, 1)))
    ssb = [cb.SsbCodebook(beams=np.ones((1, 1)), geometry=_scalar_geometry())]
    with pytest.raises(ShapeError):
        bm.ssb_receive(h, ssb, sigma2=0.0, seed=0)


# -------------------------------- RSRP -----------------------------------

def test_measure_rsrp_unity():
    h = _tensor(np.ones((1, 1, 1, 1, 1, 1)))
    ssb = [cb.SsbCodebook(beams=np.ones((1, 1)), geometry=_scalar_geometry())]
    rec = bm.ssb_receive(h, ssb, sigma2=0.0, seed=0)
    np.testing.assert_allclose(bm.measure_rsrp(rec), [[[1.0]]])


def test_rsrp_quadruples_with_double_gain():
    h = _tensor(np.ones((1, 1, 1, 1, 1, 1)))
    geo = _scalar_geometry()
    one = [cb.SsbCodebook(beams=np.ones((1, 1)), geometry=geo)]
    two = [cb.SsbCodebook(beams=2.0 * np.ones((1, 1)), geometry=geo)]
    r1 = bm.measure_rsrp(bm.ssb_receive(h, one, 0.0, 0))
    r2 = bm.measure_rsrp(bm.ssb_receive(h, two, 0.0, 0))
    np.testing.assert_allclose(r2, 4.0 * r1)


def test_matched_beam_maximizes_rsrp():
    rng = np.random.default_rng(5)
    geo = ArrayGeometry(n_x=2, n_y=2, dual_polarized=False)
    hrow = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    h = _tensor(hrow.reshape(1, 1, 1, 1, 1, 4))
    matched = np.conj(hrow) / np.linalg.norm(hrow)
    best = bm.measure_rsrp(bm.ssb_receive(
        h, [cb.SsbCodebook(beams=matched[None], geometry=geo)], 0.0, 0))[0, 0, 0]
    for _ in range(50):
        f = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        f /= np.linalg.norm(f)
        r = bm.measure_rsrp(bm.ssb_receive(
            h, [cb.SsbCodebook(beams=f[None], geometry=geo)], 0.0, 0))[0, 0, 0]
        assert r <= best + 1e-9


def test_rsrp_tensor_matches_noiseless_measure():
    rng = np.random.default_rng(6)
    h = (rng.standard_normal((1, 3, 1, 2, 2, 4))
         + 1j * rng.standard_normal((1, 3, 1, 2, 2, 4)))
    geo = ArrayGeometry(n_x=2, n_y=2, dual_polarized=False)
    beams = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
    book = [cb.SsbCodebook(beams=beams, geometry=geo)]
    rec = bm.ssb_receive(_tensor(h), book, sigma2=0.0, seed=0)
    want = bm.measure_rsrp(rec)[0]  # (L, U)
    got = bm.rsrp_tensor(np.asarray(_tensor(h).values[0], np.complex128),
                         beams, k_sub=2, n_t=4).value.real
    np.testing.assert_allclose(got, want, rtol=1e-10)


# ----------------------------- feedback ----------------------------------

def test_aggregate_feedback_picks_max():
    rsrp = np.zeros((2, 4, 1))
    rsrp[0, 0, 0] = 2.0
    rsrp[1, 3, 0] = 5.0
    rep = bm.aggregate_feedback(rsrp)
    assert rep.b[0] == 1 and rep.m[0] == 3 and rep.p[0] == 5.0


def test_aggregate_feedback_tie_goes_to_cell_zero():
    rsrp = np.ones((2, 2, 1))
    rep = bm.aggregate_feedback(rsrp)
    assert rep.b[0] == 0 and rep.m[0] == 0


def test_aggregate_feedback_partition_sizes():
    rsrp = np.zeros((3, 2, 4))
    rsrp[2, 1, :] = 1.0
    rep = bm.aggregate_feedback(rsrp)
    sizes = [len(rep.users_of_cell(c)) for c in range(3)]
    assert sizes == [0, 0, 4]


def test_aggregate_feedback_scale_invariance():
    rng = np.random.default_rng(8)
    rsrp = rng.random((3, 4, 6))
    a = bm.aggregate_feedback(rsrp)
    b = bm.aggregate_feedback(7.3 * rsrp)
    assert np.array_equal(a.b, b.b) and np.array_equal(a.m, b.m)


def test_aggregate_feedback_rejects_nonfinite():
    rsrp = np.ones((1, 2, 1))
    rsrp[0, 0, 0] = np.inf
    with pytest.raises(ConfigError):
        bm.aggregate_feedback(rsrp)


def test_new_users_excluded_from_statistics():
    rsrp = np.zeros((1, 2, 3))
    rsrp[0, 1, :] = 1.0
    rep = bm.aggregate_feedback(rsrp, new_user_mask=[False, True, False])
    assert list(rep.users_of_cell(0)) == [0, 2]
    np.testing.assert_allclose(rep.beam_counts(0), [0.0, 2.0])


# --------------------------- subset selection ----------------------------

def test_apportion_spec_example():
    np.testing.assert_array_equal(bm._apportion(np.array([3.0, 1.0]), 4), [3, 1])


def test_apportion_one_seat_floor():
    np.testing.assert_array_equal(bm._apportion(np.array([99.0, 1.0]), 2), [1, 1])


def test_apportion_tie_to_lowest_index():
    np.testing.assert_array_equal(bm._apportion(np.array([1.0, 1.0, 1.0]), 4),
                                  [2, 1, 1])


def test_apportion_budget_too_small():
    with pytest.raises(ConfigError):
        bm._apportion(np.array([1.0, 1.0, 1.0]), 2)


def _books(geo, l_max, n_cb, b_g):
    window = (-1.01, 1.01)
    ssb = cb.build_dft_ssb(geo, l_max, elevation_window=window)
    csirs = cb.build_dft_csirs(geo, n_cb, b_g, oversampling=2,
                               elevation_window=window)
    return ssb, csirs


def test_subset_single_beam_takes_most_correlated():
    geo = ArrayGeometry(n_x=4, n_y=1, dual_polarized=False)
    ssb, csirs = _books(geo, l_max=4, n_cb=8, b_g=1)
    rsrp = np.zeros((1, 4, 2))
    rsrp[0, 1, :] = 1.0  # both users on beam 1
    rep = bm.aggregate_feedback(rsrp)
    sel = bm.select_csirs_subset(ssb, csirs, rep, 0, n_csi=3)
    corr = np.abs(np.einsum("t,jts->js", np.conj(ssb.beams[1]),
                            csirs.precoders)).max(axis=1)
    want = list(np.argsort(-corr, kind="stable")[:3])
    assert sel.subset_indices == [int(w) for w in want]


def test_subset_fallback_when_cell_empty():
    geo = ArrayGeometry(n_x=4, n_y=1, dual_polarized=False)
    ssb, csirs = _books(geo, l_max=4, n_cb=8, b_g=1)
    rsrp = np.ones((2, 4, 1))
    rsrp[1, 0, 0] = 2.0  # the only user belongs to cell 1
    rep = bm.aggregate_feedback(rsrp)
    sel = bm.select_csirs_subset(ssb, csirs, rep, 0, n_csi=4)
    assert sel.fallback and sel.subset_indices == [0, 1, 2, 3]


def test_subset_no_duplicates_and_exact_size():
    geo = ArrayGeometry(n_x=4, n_y=2, dual_polarized=False)
    ssb, csirs = _books(geo, l_max=8, n_cb=16, b_g=1)
    rng = np.random.default_rng(0)
    rsrp = rng.random((1, 8, 12))
    rep = bm.aggregate_feedback(rsrp)
    sel = bm.select_csirs_subset(ssb, csirs, rep, 0, n_csi=8)
    assert len(sel.subset_indices) == 8
    assert len(set(sel.subset_indices)) == 8


def test_subset_rejects_oversized_request():
    geo = ArrayGeometry(n_x=4, n_y=1, dual_polarized=False)
    ssb, csirs = _books(geo, l_max=4, n_cb=8, b_g=1)
    rep = bm.aggregate_feedback(np.ones((1, 4, 1)))
    with pytest.raises(ConfigError):
        bm.select_csirs_subset(ssb, csirs, rep, 0, n_csi=9)


# ------------------------------ SINR / SE --------------------------------

def test_csirs_sinr_scalar_snr():
    h = np.ones((1, 1, 1, 1, 1, 1), dtype=np.complex128)
    subsets = [np.ones((1, 1, 1), dtype=np.complex128)]
    rec = bm.csirs_sinr(h, subsets, assoc=np.array([0]), sigma2=0.5)
    np.testing.assert_allclose(rec.sinr.value.reshape(()), 2.0, rtol=1e-12)


def _random_sinr_instance(rng, n_rx=4, n_int=3):
    v = rng.standard_normal(n_rx) + 1j * rng.standard_normal(n_rx)
    b = rng.standard_normal((n_rx, n_int)) + 1j * rng.standard_normal((n_rx, n_int))
    r = np.outer(v, np.conj(v)) + b @ np.conj(b.T) + 0.1 * np.eye(n_rx)
    return v, r


def test_sinr_matrix_inversion_lemma_oracle():
    rng = np.random.default_rng(42)
    for _ in range(50):
        v, r = _random_sinr_instance(rng)
        q = float(np.real(np.conj(v) @ np.linalg.inv(r) @ v))
        lhs = q / (1.0 - q)
        rhs = float(np.real(np.conj(v) @ np.linalg.inv(r - np.outer(v, np.conj(v))) @ v))
        assert abs(lhs - rhs) / abs(rhs) < 1e-8


def test_orthogonal_interferer_leaves_sinr_unchanged():
    h = np.zeros((2, 1, 1, 1, 2, 2), dtype=np.complex128)
    h[0, 0, 0, 0] = [[1.0, 0.0], [0.0, 0.0]]  # desired along rx antenna 0
    h[1, 0, 0, 0] = [[0.0, 0.0], [0.0, 1.0]]  # interferer along rx antenna 1
    sub = np.zeros((1, 2, 1), dtype=np.complex128)
    sub[0, 0, 0] = 1.0
    base = bm.csirs_sinr(h * np.array([1, 0]).reshape(2, 1, 1, 1, 1, 1),
                         [sub, sub], np.array([0]), sigma2=0.3)
    with_int = bm.csirs_sinr(h, [sub, sub], np.array([0]), sigma2=0.3)
    d = abs(float(base.sinr.value.real.reshape(()))
            - float(with_int.sinr.value.real.reshape(())))
    assert d < 1e-9


def test_sinr_monotone_in_noise():
    rng = np.random.default_rng(2)
    h = (rng.standard_normal((1, 1, 1, 1, 2, 4))
         + 1j * rng.standard_normal((1, 1, 1, 1, 2, 4)))
    sub = rng.standard_normal((2, 4, 1)) + 1j * rng.standard_normal((2, 4, 1))
    last = -np.inf
    for sigma2 in [10.0, 1.0, 0.1, 0.01, 1e-4]:
        rec = bm.csirs_sinr(h, [sub], np.array([0]), sigma2)
        s = float(rec.sinr.value.real.max())
        assert s > last
        last = s


def test_extra_interfering_cell_never_raises_sinr():
    rng = np.random.default_rng(3)
    h = (rng.standard_normal((2, 2, 1, 1, 3, 4))
         + 1j * rng.standard_normal((2, 2, 1, 1, 3, 4)))
    sub = rng.standard_normal((2, 4, 2)) + 1j * rng.standard_normal((2, 4, 2))
    solo = bm.csirs_sinr(h[:1], [sub], np.array([0, 0]), 0.5)
    duo = bm.csirs_sinr(h, [sub, sub], np.array([0, 0]), 0.5)
    assert np.all(duo.sinr.value.real <= solo.sinr.value.real + 1e-12)


def test_achievable_se_constant_sinr():
    rec = bm.SinrRecord(sinr=ad.constant(np.full((1, 1, 1, 1, 1), 3.0)))
    rec = bm.achievable_se(rec)
    np.testing.assert_allclose(rec.se.value.real, [[2.0]])


def test_achievable_se_resource_choice():
    sinr = np.zeros((1, 2, 1, 1, 1))
    sinr[0, 0] = 1.0   # SE 1.0
    sinr[0, 1] = 4.6569  # SE ~2.5
    rec = bm.achievable_se(bm.SinrRecord(sinr=ad.constant(sinr)))
    assert rec.chosen[0] == 1


def test_achievable_se_mean_then_log():
    sinr = np.array([1.0, 3.0]).reshape(1, 1, 1, 2, 1)
    rec = bm.achievable_se(bm.SinrRecord(sinr=ad.constant(sinr)))
    np.testing.assert_allclose(rec.se.value.real, np.log2(3.0), rtol=1e-12)


def test_achievable_se_tie_to_lowest():
    rec = bm.achievable_se(bm.SinrRecord(sinr=ad.constant(np.ones((1, 3, 1, 1, 1)))))
    assert rec.chosen[0] == 0


def test_effective_sinr_values():
    np.testing.assert_allclose(bm.effective_sinr([1.0]), [0.0], atol=1e-12)
    np.testing.assert_allclose(bm.effective_sinr([2.0]), [10.0 * np.log10(3.0)])
    assert bm.effective_sinr([0.0])[0] == -np.inf
    with pytest.raises(ConfigError):
        bm.effective_sinr([-0.1])


def test_effective_sinr_inverts_single_stream_se():
    sinr = np.full((1, 1, 1, 1, 1), 5.0)
    rec = bm.achievable_se(bm.SinrRecord(sinr=ad.constant(sinr)))
    back = bm.effective_sinr(rec.se.value.real.reshape(-1))
    np.testing.assert_allclose(back, [10.0 * np.log10(5.0)], rtol=1e-12)
