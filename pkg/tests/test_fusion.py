import threading

import numpy as np
import pytest

import doafusion as df
from doafusion.fusion import (
    ActiveSetMismatchError,
    CalibrationSet,
    ConcatenatedDoa,
    MissingArrayMapper,
    NoObservationError,
    PartialProjectionWarning,
    ReferencePair,
    calibration_from_csv,
    calibration_to_csv,
    concat_doas,
    fit_affine,
    fit_pca,
    load_affine_map,
    load_pca_model,
    map_affine,
    map_from_reference,
    map_with_missing,
    pca_to_room,
    project_pca,
    save_affine_map,
    save_pca_model,
)
from doafusion.simulate import true_doa
from oracles import qr_affine_fit, svd_of_wide


def unit_per_array(rng, m=5):
    """A random concatenated DOA column with unit 3-subvectors, dz >= 0."""
    v = rng.normal(size=(m, 3))
    v[:, 2] = np.abs(v[:, 2])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v.ravel()


def exact_affine_set(rng, m=5, n_dim=2, k=4, reps=100):
    """Calibration data generated by a known affine map (zero residual)."""
    b_true = rng.normal(size=(n_dim, 3 * m))
    r0_true = rng.normal(size=n_dim)
    base = np.array([unit_per_array(rng, m) for _ in range(k)]).T  # (3m, k)
    D = np.repeat(base, reps, axis=1)
    R = r0_true[:, None] + b_true @ D
    segments = [(pid, pid * reps, (pid + 1) * reps) for pid in range(k)]
    cal = CalibrationSet(D=D, R=R, segments=segments)
    return cal, base, b_true, r0_true


def in_hull_columns(rng, base, n=50):
    """Affine combinations of the base columns (weights summing to one)."""
    w = rng.normal(size=(base.shape[1], n))
    w /= w.sum(axis=0)
    return base @ w


class TestConcatDoas:
    def test_five_arrays_gives_fifteen_values(self):
        doas = [df.DoaVector(0.0, 0.0, 1.0)] * 5
        obs = concat_doas(doas, timestamp_ms=10)
        assert obs.values.shape == (15,)
        assert obs.active_mask.all()
        assert obs.timestamp_ms == 10
        obs.validate()

    def test_absent_array_zero_filled(self):
        doas = [df.DoaVector(0.0, 0.0, 1.0)] * 5
        doas[2] = None
        obs = concat_doas(doas)
        assert not obs.active_mask[2]
        assert np.all(obs.values[6:9] == 0.0)
        obs.validate()

    def test_all_absent_is_valid(self):
        obs = concat_doas([None] * 5)
        assert not obs.active_mask.any()
        assert np.all(obs.values == 0.0)
        obs.validate()

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            concat_doas([])

    def test_validate_catches_bad_subvector(self):
        obs = concat_doas([df.DoaVector(0.0, 0.0, 1.0)] * 2)
        obs.values[0] = 0.5
        with pytest.raises(ValueError):
            obs.validate()


def planar_calibration(n=40, half=0.9, seed=9):
    """Noiseless DOAs for sources scattered on a horizontal plane."""
    scn = df.default_paper_scenario()
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(2.0 - half, 2.0 + half, n),
                           rng.uniform(2.0 - half, 2.0 + half, n),
                           np.full(n, 0.78)])
    D = np.array([np.concatenate([true_doa(p, s) for p in scn.poses])
                  for s in pts]).T
    segments = [(i, i, i + 1) for i in range(n)]
    return CalibrationSet(D=D, R=pts[:, :2].T, segments=segments)


class TestFitPca:
    def test_rank_one_rejects_two_components(self):
        col = unit_per_array(np.random.default_rng(0))
        D = np.tile(col[:, None], (1, 10))
        cal = CalibrationSet(D=D, R=np.ones((2, 10)), segments=[(1, 0, 10)])
        model = fit_pca(cal, J=1)
        assert np.allclose(np.abs(model.U[:, 0]), np.abs(col / np.linalg.norm(col)))
        with pytest.raises(ValueError):
            fit_pca(cal, J=2)

    def test_planar_room_matches_jacobi_oracle(self):
        cal = planar_calibration()
        model = fit_pca(cal, J=2)
        _, s_oracle, _ = svd_of_wide(cal.D)
        assert np.max(np.abs(model.singular_values - s_oracle)) < 1e-9 * s_oracle[0]
        share = np.sum(s_oracle[:2] ** 2) / np.sum(s_oracle ** 2)
        impl_share = (np.sum(model.singular_values[:2] ** 2)
                      / np.sum(model.singular_values ** 2))
        assert abs(impl_share - share) < 1e-12
        assert share >= 0.95  # sources on a plane: two components dominate

    def test_orthonormal_vectors(self):
        model = fit_pca(planar_calibration(), J=2)
        assert np.max(np.abs(model.U.T @ model.U - np.eye(2))) < 1e-9

    def test_sign_convention_largest_entry_positive(self):
        model = fit_pca(planar_calibration(), J=2)
        for j in range(2):
            k = np.argmax(np.abs(model.U[:, j]))
            assert model.U[k, j] > 0

    def test_left_vectors_match_oracle_up_to_sign(self):
        cal = planar_calibration()
        model = fit_pca(cal, J=2)
        u_oracle, _, _ = svd_of_wide(cal.D)
        for j in range(2):
            u = u_oracle[:, j]
            if u[np.argmax(np.abs(u))] < 0:
                u = -u
            assert np.max(np.abs(model.U[:, j] - u)) < 1e-9

    def test_rejects_partial_calibration(self):
        cal = planar_calibration(n=10)
        cal.masks = np.ones((5, 10), dtype=bool)
        cal.masks[1, 3] = False
        with pytest.raises(ValueError):
            fit_pca(cal)

    def test_eckart_young_optimality(self):
        cal = planar_calibration()
        model = fit_pca(cal, J=2)
        best = np.linalg.norm(cal.D - model.U @ (model.U.T @ cal.D))
        rng = np.random.default_rng(31)
        scale = np.linalg.norm(cal.D)
        for _ in range(20):
            left = rng.normal(size=(15, 2))
            right = rng.normal(size=(2, cal.n_obs))
            candidate = left @ right
            candidate *= scale / np.linalg.norm(candidate)
            assert best <= np.linalg.norm(cal.D - candidate) + 1e-12


class TestProjectPca:
    @pytest.fixture()
    def model(self):
        return fit_pca(planar_calibration(), J=2)

    def test_first_vector_projects_to_e1(self, model):
        a = project_pca(model, model.U[:, 0])
        assert np.allclose(a, [1.0, 0.0], atol=1e-12)

    def test_orthogonal_vector_projects_to_zero(self, model):
        rng = np.random.default_rng(13)
        v = rng.normal(size=15)
        v -= model.U @ (model.U.T @ v)
        assert np.allclose(project_pca(model, v), 0.0, atol=1e-9)

    def test_projection_is_contraction(self, model):
        rng = np.random.default_rng(14)
        for _ in range(10):
            d = unit_per_array(rng)
            assert np.linalg.norm(model.U @ project_pca(model, d)) \
                <= np.linalg.norm(d) + 1e-12

    def test_linearity(self, model):
        rng = np.random.default_rng(15)
        d1, d2 = rng.normal(size=15), rng.normal(size=15)
        a, b = 0.7, -2.3
        lhs = project_pca(model, a * d1 + b * d2)
        rhs = a * project_pca(model, d1) + b * project_pca(model, d2)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_partial_observation_warns(self, model):
        obs = concat_doas([df.DoaVector(0.0, 0.0, 1.0)] * 4 + [None])
        with pytest.warns(PartialProjectionWarning):
            a = project_pca(model, obs)
        assert a.shape == (2,)

    def test_full_observation_does_not_warn(self, model):
        obs = concat_doas([df.DoaVector(0.0, 0.0, 1.0)] * 5)
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            project_pca(model, obs)


class TestFitAffine:
    def test_exact_affine_recovery_on_held_out(self):
        rng = np.random.default_rng(40)
        cal, base, b_true, r0_true = exact_affine_set(rng)
        amap = fit_affine(cal)
        held_out = in_hull_columns(rng, base)
        for col in held_out.T:
            obs = ConcatenatedDoa(values=col, active_mask=np.ones(5, bool))
            want = r0_true + b_true @ col
            assert np.linalg.norm(map_affine(amap, obs) - want) < 1e-8

    def test_optimality_residuals(self, scenario):
        cal = df.synthesize_calibration(scenario, dwell_s=2.0,
                                        points=[1, 2, 3, 4, 5, 6])
        amap = fit_affine(cal)
        E = cal.R - amap.r0[:, None] - amap.B @ cal.D
        scale = np.linalg.norm(cal.R)
        assert np.linalg.norm(E.sum(axis=1)) < 1e-6 * scale
        assert np.linalg.norm(E @ cal.D.T) < 1e-6 * scale

    def test_matches_qr_oracle_on_small_instances(self):
        rng = np.random.default_rng(41)
        for trial in range(5):
            m, L = 3, 30  # 3M = 9 rows
            D = np.array([unit_per_array(rng, m) for _ in range(L)]).T
            D += 0.01 * rng.normal(size=D.shape)  # break exact structure
            R = rng.normal(size=(2, L))
            segments = [(i, i, i + 1) for i in range(L)]
            cal = CalibrationSet(D=D, R=R, segments=segments)
            amap = fit_affine(cal)
            r0_qr, b_qr = qr_affine_fit(D, R)
            fitted = amap.r0[:, None] + amap.B @ D
            fitted_qr = r0_qr[:, None] + b_qr @ D
            assert np.max(np.abs(fitted - fitted_qr)) < 1e-6

    def test_two_points_map_to_their_line(self):
        rng = np.random.default_rng(42)
        base = np.array([unit_per_array(rng) for _ in range(2)]).T
        D = np.repeat(base, 10, axis=1)
        p1, p2 = np.array([0.2, 0.4]), np.array([1.4, 2.0])
        R = np.repeat(np.column_stack([p1, p2]), 10, axis=1)
        cal = CalibrationSet(D=D, R=R, segments=[(1, 0, 10), (2, 10, 20)])
        amap = fit_affine(cal)
        assert not amap.report.spans_space
        direction = (p2 - p1) / np.linalg.norm(p2 - p1)
        for _ in range(30):
            obs = ConcatenatedDoa(values=unit_per_array(rng),
                                  active_mask=np.ones(5, bool))
            r = map_affine(amap, obs)
            perp = (r - p1) - direction * (direction @ (r - p1))
            assert np.linalg.norm(perp) < 1e-8

    def test_three_points_span_their_plane(self):
        rng = np.random.default_rng(43)
        base = np.array([unit_per_array(rng) for _ in range(3)]).T
        D = np.repeat(base, 5, axis=1)
        pts3 = np.array([[0.0, 0.0, 0.5], [1.0, 0.0, 0.9], [0.0, 1.5, 1.3]]).T
        R = np.repeat(pts3, 5, axis=1)
        cal = CalibrationSet(D=D, R=R,
                             segments=[(i, 5 * i, 5 * i + 5) for i in range(3)])
        amap = fit_affine(cal)
        normal = np.cross(pts3[:, 1] - pts3[:, 0], pts3[:, 2] - pts3[:, 0])
        normal /= np.linalg.norm(normal)
        for _ in range(30):
            obs = ConcatenatedDoa(values=unit_per_array(rng),
                                  active_mask=np.ones(5, bool))
            r = map_affine(amap, obs)
            assert abs(normal @ (r - pts3[:, 0])) < 1e-8

    def test_rejects_single_point(self):
        rng = np.random.default_rng(44)
        D = np.repeat(unit_per_array(rng)[:, None], 10, axis=1)
        cal = CalibrationSet(D=D, R=np.ones((2, 10)), segments=[(1, 0, 10)])
        with pytest.raises(ValueError, match="distinct calibration points"):
            fit_affine(cal)

    def test_rank_deficiency_flagged_in_report(self):
        rng = np.random.default_rng(45)
        cal, *_ = exact_affine_set(rng, k=4, reps=5)
        amap = fit_affine(cal)
        assert amap.report.n_dropped > 0  # 4 points cannot excite 15 directions
        assert amap.report.rank < 15
        assert amap.report.messages


class TestMapAffine:
    def test_calibration_mean_maps_to_location_mean(self, scenario):
        cal = df.synthesize_calibration(scenario, dwell_s=1.0,
                                        points=[1, 2, 3, 4, 5, 6])
        amap = fit_affine(cal)
        obs = ConcatenatedDoa(values=cal.D.mean(axis=1),
                              active_mask=np.ones(5, bool))
        assert np.allclose(map_affine(amap, obs), cal.R.mean(axis=1), atol=1e-9)

    def test_calibration_columns_reproduced_exactly(self):
        rng = np.random.default_rng(46)
        cal, *_ = exact_affine_set(rng)
        amap = fit_affine(cal)
        for ell in range(0, cal.n_obs, 37):
            obs = ConcatenatedDoa(values=cal.D[:, ell],
                                  active_mask=np.ones(5, bool))
            assert np.linalg.norm(map_affine(amap, obs) - cal.R[:, ell]) < 1e-8

    def test_missing_required_array_raises(self):
        rng = np.random.default_rng(47)
        cal, *_ = exact_affine_set(rng)
        amap = fit_affine(cal)
        obs = ConcatenatedDoa(values=cal.D[:, 0],
                              active_mask=np.array([True, False, True, True, True]))
        with pytest.raises(ActiveSetMismatchError):
            map_affine(amap, obs)

    def test_interpolation_stays_on_segment(self):
        rng = np.random.default_rng(48)
        cal, base, b_true, r0_true = exact_affine_set(rng)
        amap = fit_affine(cal)
        d1, d2 = base[:, 0], base[:, 2]
        r1, r2 = r0_true + b_true @ d1, r0_true + b_true @ d2
        for alpha in np.linspace(0, 1, 7):
            obs = ConcatenatedDoa(values=(1 - alpha) * d1 + alpha * d2,
                                  active_mask=np.ones(5, bool))
            want = (1 - alpha) * r1 + alpha * r2
            assert np.linalg.norm(map_affine(amap, obs) - want) < 1e-8


class TestMapWithMissing:
    def test_all_active_equals_plain_affine(self):
        rng = np.random.default_rng(50)
        cal, base, *_ = exact_affine_set(rng)
        amap = fit_affine(cal)
        cache = {}
        obs = ConcatenatedDoa(values=base[:, 1], active_mask=np.ones(5, bool))
        assert np.array_equal(map_with_missing(cal, obs, cache),
                              map_affine(amap, obs))

    def test_dropping_one_array_changes_nothing_in_span(self):
        rng = np.random.default_rng(51)
        cal, base, b_true, r0_true = exact_affine_set(rng)
        cache = {}
        for col in in_hull_columns(rng, base, n=10).T:
            want = r0_true + b_true @ col
            for drop in range(5):
                values = col.copy()
                values[3 * drop: 3 * drop + 3] = 0.0
                mask = np.ones(5, bool)
                mask[drop] = False
                obs = ConcatenatedDoa(values=values, active_mask=mask)
                assert np.linalg.norm(map_with_missing(cal, obs, cache) - want) < 1e-8

    def test_cache_is_transparent(self):
        rng = np.random.default_rng(52)
        cal, base, *_ = exact_affine_set(rng)
        obs = ConcatenatedDoa(values=np.where(np.arange(15) < 12, base[:, 0], 0.0),
                              active_mask=np.array([1, 1, 1, 1, 0], bool))
        cache = {}
        first = map_with_missing(cal, obs, cache)
        assert len(cache) == 1
        second = map_with_missing(cal, obs, cache)
        fresh = map_with_missing(cal, obs, {})
        assert np.array_equal(first, second)
        assert np.array_equal(first, fresh)

    def test_empty_active_set_raises(self):
        rng = np.random.default_rng(53)
        cal, *_ = exact_affine_set(rng)
        obs = concat_doas([None] * 5)
        with pytest.raises(NoObservationError):
            map_with_missing(cal, obs, {})

    def test_reuse_full_r0_switch_shifts_by_constant(self):
        # keeping the full-set offset with a subset-fit B displaces every
        # mapped point by the same constant; refitting r0 stays exact
        rng = np.random.default_rng(54)
        cal, base, b_true, r0_true = exact_affine_set(rng)
        mask = np.array([1, 1, 1, 1, 0], bool)
        offsets = []
        for col in in_hull_columns(rng, base, n=6).T:
            values = col.copy()
            values[12:] = 0.0
            obs = ConcatenatedDoa(values=values, active_mask=mask)
            refit = map_with_missing(cal, obs, {}, reuse_full_r0=False)
            reuse = map_with_missing(cal, obs, {}, reuse_full_r0=True)
            assert np.linalg.norm(refit - (r0_true + b_true @ col)) < 1e-8
            offsets.append(reuse - refit)
        offsets = np.array(offsets)
        assert np.max(np.abs(offsets - offsets[0])) < 1e-8

    def test_ceiling_arrays_beat_wall_arrays_alone(self, scenario):
        # sources move in a horizontal plane; the ceiling arrays look straight
        # down at it while the wall arrays see it nearly edge-on
        cal = df.synthesize_calibration(scenario, dwell_s=2.0,
                                        points=[1, 2, 3, 4, 5, 6])
        records = df.synthesize_doa_stream(scenario, "rectangle-1234")
        truth = np.array([r.true_position[:2] for r in records])
        rmse = {}
        cache = {}
        for array_id in range(5):
            mask = np.zeros(5, bool)
            mask[array_id] = True
            est = []
            for r in records:
                values = np.zeros(15)
                sub = r.observed.subvector(array_id)
                values[3 * array_id: 3 * array_id + 3] = sub
                obs = ConcatenatedDoa(values=values, active_mask=mask)
                est.append(map_with_missing(cal, obs, cache))
            err = np.array(est) - truth
            rmse[array_id] = np.sqrt(np.mean(np.sum(err ** 2, axis=1)))
        wall = [rmse[0], rmse[1]]
        ceiling = [rmse[2], rmse[3], rmse[4]]
        assert max(ceiling) < min(wall)
        assert np.mean(ceiling) < 0.7 * np.mean(wall)

    def test_concurrent_mapping_is_consistent(self):
        rng = np.random.default_rng(55)
        cal, base, *_ = exact_affine_set(rng)
        mapper = MissingArrayMapper(cal)
        observations = []
        for i in range(40):
            drop = i % 5
            values = in_hull_columns(rng, base, n=1)[:, 0]
            values[3 * drop: 3 * drop + 3] = 0.0
            mask = np.ones(5, bool)
            mask[drop] = False
            observations.append(ConcatenatedDoa(values=values, active_mask=mask))
        serial = [mapper.map(o) for o in observations]

        shared = MissingArrayMapper(cal)
        results = [None] * len(observations)
        def work(start):
            for i in range(start, len(observations), 4):
                results[i] = shared.map(observations[i])
        threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for a, b in zip(serial, results):
            assert np.array_equal(a, b)


class TestReferenceMapping:
    def test_zero_disturbance_returns_reference(self):
        rng = np.random.default_rng(60)
        cal, base, *_ = exact_affine_set(rng)
        amap = fit_affine(cal)
        obs = ConcatenatedDoa(values=base[:, 0], active_mask=np.ones(5, bool))
        ref = ReferencePair(d_ref=obs, r_ref=cal.R[:, 0])
        assert np.array_equal(map_from_reference(amap, ref, obs), ref.r_ref)

    def test_consistent_reference_equals_map_affine(self):
        rng = np.random.default_rng(61)
        cal, base, *_ = exact_affine_set(rng)
        amap = fit_affine(cal)
        d_ref = ConcatenatedDoa(values=base[:, 0], active_mask=np.ones(5, bool))
        ref = ReferencePair(d_ref=d_ref, r_ref=map_affine(amap, d_ref))
        for col in in_hull_columns(rng, base, n=10).T:
            obs = ConcatenatedDoa(values=col, active_mask=np.ones(5, bool))
            assert np.linalg.norm(map_from_reference(amap, ref, obs)
                                  - map_affine(amap, obs)) < 1e-9

    def test_recovers_other_calibration_point(self):
        rng = np.random.default_rng(62)
        cal, base, *_ = exact_affine_set(rng)
        amap = fit_affine(cal)
        ref = ReferencePair(
            d_ref=ConcatenatedDoa(values=base[:, 0], active_mask=np.ones(5, bool)),
            r_ref=cal.R[:, 0])
        obs = ConcatenatedDoa(values=base[:, 2], active_mask=np.ones(5, bool))
        want = cal.R[:, 2 * 100]  # third point's location
        assert np.linalg.norm(map_from_reference(amap, ref, obs) - want) < 1e-8


def rank2_setup(seed=70, L=30):
    """Calibration data whose DOA columns all lie in a 2-D subspace."""
    rng = np.random.default_rng(seed)
    u0, _ = np.linalg.qr(rng.normal(size=(15, 2)))
    A = rng.normal(size=(2, L))
    D = u0 @ A
    b_true = rng.normal(size=(2, 15))
    r0_true = rng.normal(size=2)
    R = r0_true[:, None] + b_true @ D
    segments = [(i, i, i + 1) for i in range(L)]
    cal = CalibrationSet(D=D, R=R, segments=segments)
    return cal, u0, rng


class TestPcaToRoom:
    def test_zero_disturbance(self):
        cal, _, _ = rank2_setup()
        amap = fit_affine(cal)
        model = fit_pca(cal, J=2)
        d_ref = ConcatenatedDoa(values=cal.D[:, 0], active_mask=np.ones(5, bool))
        ref = ReferencePair(d_ref=d_ref, r_ref=cal.R[:, 0]).with_projection(model)
        r = pca_to_room(amap, model, ref, ref.a_ref)
        assert np.array_equal(r, ref.r_ref)

    def test_equals_reference_mapping_on_rank2_data(self):
        cal, _, rng = rank2_setup()
        amap = fit_affine(cal)
        model = fit_pca(cal, J=2)
        d_ref = ConcatenatedDoa(values=cal.D[:, 0], active_mask=np.ones(5, bool))
        ref = ReferencePair(d_ref=d_ref, r_ref=cal.R[:, 0]).with_projection(model)
        for ell in range(1, cal.n_obs, 3):
            obs = ConcatenatedDoa(values=cal.D[:, ell], active_mask=np.ones(5, bool))
            via_pca = pca_to_room(amap, model, ref, project_pca(model, obs))
            via_ref = map_from_reference(amap, ref, obs)
            assert np.linalg.norm(via_pca - via_ref) < 1e-8

    def test_affine_in_coefficients(self):
        cal, _, rng = rank2_setup()
        amap = fit_affine(cal)
        model = fit_pca(cal, J=2)
        d_ref = ConcatenatedDoa(values=cal.D[:, 0], active_mask=np.ones(5, bool))
        ref = ReferencePair(d_ref=d_ref, r_ref=cal.R[:, 0]).with_projection(model)
        a1, a2 = rng.normal(size=2), rng.normal(size=2)
        mid = pca_to_room(amap, model, ref, (a1 + a2) / 2)
        r1 = pca_to_room(amap, model, ref, a1)
        r2 = pca_to_room(amap, model, ref, a2)
        assert np.allclose(mid, (r1 + r2) / 2, atol=1e-12)

    def test_requires_reference_coefficients(self):
        cal, _, _ = rank2_setup()
        amap = fit_affine(cal)
        model = fit_pca(cal, J=2)
        ref = ReferencePair(
            d_ref=ConcatenatedDoa(values=cal.D[:, 0], active_mask=np.ones(5, bool)),
            r_ref=cal.R[:, 0])
        with pytest.raises(ValueError, match="no PCA coefficients"):
            pca_to_room(amap, model, ref, np.zeros(2))

    def test_dimension_mismatch(self):
        cal, _, _ = rank2_setup()
        amap = fit_affine(cal)
        model = fit_pca(cal, J=2)
        ref = ReferencePair(
            d_ref=ConcatenatedDoa(values=cal.D[:, 0], active_mask=np.ones(5, bool)),
            r_ref=cal.R[:, 0]).with_projection(model)
        with pytest.raises(ValueError):
            pca_to_room(amap, model, ref, np.zeros(3))


class TestSerialization:
    def test_affine_round_trip(self, tmp_path):
        rng = np.random.default_rng(80)
        cal, *_ = exact_affine_set(rng)
        amap = fit_affine(cal, active=[0, 2, 3])
        path = tmp_path / "map.affine.txt"
        save_affine_map(path, amap)
        back = load_affine_map(path)
        assert np.array_equal(back.r0, amap.r0)
        assert np.array_equal(back.B, amap.B)
        assert back.active_set == amap.active_set

    def test_pca_round_trip(self, tmp_path):
        model = fit_pca(planar_calibration(), J=2)
        path = tmp_path / "model.pca.txt"
        save_pca_model(path, model)
        back = load_pca_model(path)
        assert np.array_equal(back.U, model.U)
        assert np.array_equal(back.singular_values, model.singular_values)
        assert back.J == model.J

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("something else\n")
        with pytest.raises(ValueError):
            load_affine_map(path)
        with pytest.raises(ValueError):
            load_pca_model(path)


class TestCalibrationCsv:
    def test_round_trip(self, scenario, tmp_path):
        cal = df.synthesize_calibration(scenario, dwell_s=0.5)
        path = tmp_path / "cal.csv"
        calibration_to_csv(path, cal)
        back = calibration_from_csv(path)
        assert np.array_equal(back.D, cal.D)
        assert np.array_equal(back.R, cal.R)
        assert back.segments == cal.segments
        assert np.array_equal(back.timestamps_ms, cal.timestamps_ms)
        assert np.array_equal(back.masks, cal.masks)

    def test_subset_selection(self, scenario):
        cal = df.synthesize_calibration(scenario, dwell_s=0.5)
        sub = cal.subset([1, 2, 3])
        assert sub.point_ids == [1, 2, 3]
        assert sub.n_obs == 3 * (cal.n_obs // 11)
        with pytest.raises(KeyError):
            cal.subset([99])

    def test_segment_consistency_enforced(self):
        D = np.zeros((15, 4))
        R = np.array([[0.0, 0.0, 1.0, 1.0], [0.0, 0.1, 1.0, 1.0]])
        with pytest.raises(ValueError, match="varies inside"):
            CalibrationSet(D=D, R=R, segments=[(1, 0, 2), (2, 2, 4)])
