from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgrecon.deformation import build_graph
from surgrecon.fusion import (
    FusionConfig,
    FusionRejected,
    admit_new,
    fuse_into,
    fuse_pair,
    prune_stale,
)
from surgrecon.geometry import InvalidInputError
from surgrecon.surfels import Surfel, SurfelMap

Z = np.array([0.0, 0.0, -1.0])


def _surfel(pos, c=1.0, t=0, r=0.001, n=Z, col=(100.0, 100.0, 100.0)):
    return Surfel(np.asarray(pos, float), np.asarray(n, float), c, t, r, np.asarray(col, float))


def _map(positions, conf=1.0, t=0, radius=0.0005, normals=None):
    p = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(p)
    nrm = np.tile(Z, (n, 1)) if normals is None else np.asarray(normals, float)
    return SurfelMap(
        positions=p, normals=nrm, confidence=np.broadcast_to(conf, n).astype(float).copy(),
        last_seen=np.full(n, t, dtype=np.int64), radius=np.full(n, radius),
        colors=np.full((n, 3), 128.0), ids=np.arange(n, dtype=np.int64),
        origin_frame=np.zeros(n, dtype=np.int64), origin_pixel=np.arange(n, dtype=np.int64),
    )


def _grid(n=11, spacing=0.001, z=0.1):
    x, y = np.meshgrid(np.arange(n) * spacing, np.arange(n) * spacing)
    return np.stack([x.ravel(), y.ravel(), np.full(n * n, z)], axis=1)


# -- fuse_pair ------------------------------------------------------------------


def test_equal_weight_midpoint():
    out = fuse_pair(_surfel((0, 0, 1)), _surfel((0, 0, 3)), 7)
    np.testing.assert_allclose(out.position, (0, 0, 2))
    assert out.confidence == 2.0
    assert out.last_seen == 7


def test_zero_weight_observation_only_touches_timestamp():
    ref = _surfel((0.1, 0.2, 0.3), c=2.5, t=3, r=0.002, col=(10, 20, 30))
    obs = _surfel((5, 5, 5), c=0.0, r=0.0001, n=(0.0, 0.6, -0.8), col=(200, 200, 200))
    out = fuse_pair(ref, obs, 9)
    np.testing.assert_array_equal(out.position, ref.position)
    np.testing.assert_array_equal(out.normal, ref.normal)
    np.testing.assert_array_equal(out.color, ref.color)
    assert (out.confidence, out.radius, out.last_seen) == (2.5, 0.002, 9)


def test_weighted_mean_by_hand():
    out = fuse_pair(_surfel((0, 0, 0), c=3.0), _surfel((0, 0, 0.04), c=1.0), 1)
    np.testing.assert_allclose(out.position, (0, 0, 0.01), atol=1e-15)
    assert out.confidence == 4.0


def test_radius_takes_minimum_and_colour_is_weighted():
    out = fuse_pair(_surfel((0, 0, 0), c=1.0, r=0.003, col=(0, 0, 0)),
                    _surfel((0, 0, 0), c=3.0, r=0.001, col=(100, 40, 8)), 1)
    assert out.radius == 0.001
    np.testing.assert_allclose(out.color, (75, 30, 6))


def test_antiparallel_normals_rejected():
    with pytest.raises(FusionRejected):
        fuse_pair(_surfel((0, 0, 0)), _surfel((0, 0, 0), n=-Z), 1)


unit = st.tuples(*[st.floats(-1, 1)] * 3).map(np.array).filter(lambda v: np.linalg.norm(v) > 0.1)


@st.composite
def surfel_pairs(draw):
    n1 = draw(unit)
    n1 = n1 / np.linalg.norm(n1)
    n2 = draw(unit)
    n2 = n2 / np.linalg.norm(n2)
    if n1 @ n2 < 0:
        n2 = -n2
    coord = st.floats(-1, 1)
    a = Surfel(np.array([draw(coord) for _ in range(3)]), n1, draw(st.floats(0.01, 10)), 0,
               draw(st.floats(1e-4, 1e-2)), np.array([draw(st.floats(0, 255)) for _ in range(3)]))
    b = Surfel(np.array([draw(coord) for _ in range(3)]), n2, draw(st.floats(0.01, 10)), 1,
               draw(st.floats(1e-4, 1e-2)), np.array([draw(st.floats(0, 255)) for _ in range(3)]))
    return a, b


@given(surfel_pairs())
@settings(max_examples=200, deadline=None)
def test_fuse_pair_symmetric_and_conserves_confidence(pair):
    a, b = pair
    ab, ba = fuse_pair(a, b, 5), fuse_pair(b, a, 5)
    np.testing.assert_allclose(ab.position, ba.position, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ab.normal, ba.normal, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ab.color, ba.color, rtol=1e-12, atol=1e-9)
    assert ab.radius == ba.radius
    assert ab.confidence == a.confidence + b.confidence == ba.confidence
    assert abs(np.linalg.norm(ab.normal) - 1.0) < 1e-12


# -- fuse_into ------------------------------------------------------------------


def test_fuse_into_matches_pairwise():
    rng = np.random.default_rng(3)
    ref = _map(rng.normal(size=(6, 3)), conf=rng.uniform(0.5, 3, 6), radius=0.001)
    obs = _map(rng.normal(size=(4, 3)), conf=rng.uniform(0.5, 3, 4), radius=0.0007)
    obs.normals[1] = -Z  # antiparallel: rejected
    expected = {r: fuse_pair(ref.surfel(r), obs.surfel(o), 4) for r, o in ((0, 3), (2, 0), (5, 2))}
    before = ref.copy()
    ok = fuse_into(ref, np.array([0, 4, 2, 5]), obs, np.array([3, 1, 0, 2]), 4)
    assert ok.tolist() == [True, False, True, True]
    for r, s in expected.items():
        np.testing.assert_allclose(ref.positions[r], s.position, rtol=1e-14)
        np.testing.assert_allclose(ref.normals[r], s.normal, rtol=1e-14)
        assert ref.confidence[r] == s.confidence and ref.last_seen[r] == 4
    for k in (1, 3, 4):
        np.testing.assert_array_equal(ref.positions[k], before.positions[k])
        assert ref.last_seen[k] == 0


def test_fuse_into_requires_unique_reference_indices():
    ref, obs = _map(np.zeros((2, 3))), _map(np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        fuse_into(ref, np.array([0, 0]), obs, np.array([0, 1]), 1)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_total_confidence_never_drops_under_fusion(seed):
    rng = np.random.default_rng(seed)
    ref = _map(rng.normal(size=(20, 3)), conf=rng.uniform(0, 3, 20))
    obs = _map(rng.normal(size=(20, 3)), conf=rng.uniform(0, 3, 20))
    flip = rng.random(20) < 0.3
    obs.normals[flip] *= -1
    ri = rng.permutation(20)[:12]
    oi = rng.permutation(20)[:12]
    total = ref.confidence.sum()
    ok = fuse_into(ref, ri, obs, oi, 1)
    assert ref.confidence.sum() == pytest.approx(total + obs.confidence[oi[ok]].sum(), rel=1e-12)
    assert np.all(np.isfinite(ref.positions))
    np.testing.assert_allclose(np.linalg.norm(ref.normals, axis=1), 1.0, atol=1e-6)


# -- admission ------------------------------------------------------------------

CFG = FusionConfig()


def test_empty_model_admits_everything():
    ref = SurfelMap()
    cand = _map(_grid(5))
    res = admit_new(ref, cand, None, CFG, 0)
    assert len(res.admitted) == len(cand) == len(ref)


def test_dense_high_confidence_neighbourhood_admits():
    ref = _map(_grid(11), conf=1.0, radius=0.0002)
    centre = ref.positions[60] + np.array([0.0005, 0.0005, 0.0])
    res = admit_new(ref, _map(centre), None, CFG, 3)
    assert res.admitted.tolist() == [0]
    assert len(ref) == 122 and ref.last_seen[-1] == 3


def test_sparse_low_confidence_neighbourhood_rejects():
    ref = _map(_grid(3, spacing=0.004), conf=0.3, radius=0.0002)
    cand = _map(ref.positions[4] + np.array([0.001, 0.001, 0.0]))
    res = admit_new(ref, cand, None, CFG, 3)
    assert len(res.admitted) == 0 and res.rejected_confidence == 1
    assert len(ref) == 9


def test_frontier_candidate_admitted_despite_low_confidence():
    ref = _map(_grid(3, spacing=0.004), conf=0.1)
    far = ref.positions.max(axis=0) + np.array([2.5 * CFG.neighborhood_radius, 0.0, 0.0])
    res = admit_new(ref, _map(far), None, CFG, 2)
    assert res.admitted.tolist() == [0]


def test_sheared_support_nodes_reject_candidate():
    pts = _grid(21, spacing=0.001)
    g = build_graph(pts, 0.006)
    # push half the nodes sideways so neighbouring nodes disagree
    left = g.positions[:, 0] < 0.01
    g.translations[left] = [0.0, 0.004, 0.0]
    ref = _map(pts, conf=1.0, radius=0.0002)
    x = np.array([0.0105, 0.0105, 0.1])
    res = admit_new(ref, _map(x), g, CFG, 4)
    assert len(res.admitted) == 0 and res.rejected_motion == 1
    # with a rigid graph the same candidate passes
    g.translations[:] = [0.0, 0.004, 0.0]
    res = admit_new(ref, _map(x), g, CFG, 4)
    assert res.admitted.tolist() == [0]


def test_duplicate_refreshes_timestamp_only():
    ref = _map(_grid(11), conf=1.0, radius=0.0008)
    before = ref.copy()
    cand = _map(ref.positions[60] + np.array([0.0001, 0.0, 0.0]))
    res = admit_new(ref, cand, None, CFG, 8)
    assert len(res.admitted) == 0 and res.duplicates == 1
    assert len(ref) == len(before)
    assert ref.last_seen[60] == 8
    np.testing.assert_array_equal(ref.confidence, before.confidence)
    np.testing.assert_array_equal(ref.positions, before.positions)
    res = admit_new(ref, cand, None, CFG, 9, skip_duplicates=False)
    assert res.admitted.tolist() == [0]


# -- pruning --------------------------------------------------------------------


def test_fresh_map_keeps_everything():
    ref = _map(_grid(4), conf=0.1, t=10)
    assert prune_stale(ref, 10, CFG) == 0


def test_stale_low_confidence_removed():
    ref = _map(_grid(2), conf=[0.5, 0.5, 5.0, 0.5], t=0)
    ref.last_seen[:] = [0, 9, 0, 1]
    assert prune_stale(ref, CFG.max_age + 1, CFG) == 1
    assert ref.ids.tolist() == [1, 2, 3]


def test_boundary_age_kept():
    ref = _map(_grid(1), conf=0.5, t=0)
    assert prune_stale(ref, CFG.max_age, CFG) == 0


def test_occluded_high_confidence_tissue_survives_and_needs_no_readmission():
    tissue = _grid(11)
    ref = _map(tissue, conf=1.0, t=0)
    strip = tissue[:, 0] < 0.004
    # build confidence over a few frames, then hide the strip for 40 frames
    for t in range(1, 4):
        idx = np.arange(len(tissue))
        fuse_into(ref, idx, _map(tissue, conf=1.0, t=t), idx, t)
    for t in range(4, 44):
        seen = np.nonzero(~strip)[0]
        fuse_into(ref, seen, _map(tissue[seen], conf=1.0), np.arange(len(seen)), t)
        assert prune_stale(ref, t, CFG) == 0
    ids_before = ref.ids.copy()
    idx = np.arange(len(tissue))
    fuse_into(ref, idx, _map(tissue, conf=1.0), idx, 44)
    res = admit_new(ref, _map(tissue[strip]).subset(np.zeros(strip.sum(), bool)), None, CFG, 44)
    assert len(res.admitted) == 0
    np.testing.assert_array_equal(ref.ids, ids_before)
    assert np.all(ref.last_seen == 44)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        FusionConfig(max_age=0)
    with pytest.raises(InvalidInputError):
        FusionConfig(neighborhood_radius=-1.0)
