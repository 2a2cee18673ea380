import numpy as np
import pytest

from conftest import constant_map
from services.errors import GridMismatch, OutOfRange
from services.sp_core import SphericalGrid
from services.sp_quality import (
    QualityWeights,
    combined_quality,
    edge_mask,
    edge_weighted_l1,
    highpass_mask,
    spectral_loss,
)

GRID = SphericalGrid(32, 64)


def _step_map():
    """One layer: 0.3 on the western half, 0.4 on the eastern half."""
    sp_map = constant_map(GRID, [0.3])
    sp_map.depth[0, :, 32:] = 0.4
    return sp_map


def _noisy(sp_map, sigma: float):
    noise = np.random.default_rng(11).standard_normal(sp_map.depth.shape)
    return sp_map.with_depth(sp_map.depth + sigma * noise)


def test_identical_maps_score_zero():
    ref = _step_map()
    scores = combined_quality(ref, _step_map())
    assert scores.as_dict() == {"l_total": 0.0, "l1": 0.0, "l_edge": 0.0, "l_spec": 0.0}


def test_scores_grow_with_noise():
    ref = _step_map()
    scores = [combined_quality(_noisy(ref, sigma), ref) for sigma in (0.01, 0.02, 0.04)]
    for low, high in zip(scores, scores[1:]):
        assert high.l1 > low.l1 > 0
        assert high.l_edge > low.l_edge > 0
        assert high.l_spec > low.l_spec > 0
        assert high.total > low.total


def test_total_grows_with_edge_weight():
    ref = _step_map()
    cand = _noisy(ref, 0.02)
    scores = [combined_quality(cand, ref, QualityWeights(alpha=alpha)) for alpha in (0.0, 1.0, 2.0)]
    assert scores[0].total < scores[1].total < scores[2].total
    assert scores[0].total == pytest.approx(scores[0].l1 + 0.1 * scores[0].l_spec)
    assert scores[2].total - scores[1].total == pytest.approx(scores[1].l_edge)


def test_edge_mask_follows_the_step_across_the_seam():
    layer = _step_map().depth[0].astype(np.float64)
    tight = edge_mask(layer, margin=0)
    assert tight.mask[:, 31].all() and tight.mask[:, 32].all()
    # the western and eastern borders meet at the seam
    assert tight.mask[:, 0].all() and tight.mask[:, 63].all()
    assert not tight.mask[:, 16].any()
    wide = edge_mask(layer, margin=2)
    assert wide.mask.sum() > tight.mask.sum()
    assert wide.mask[:, 29].all()
    assert not wide.mask[:, 16].any()


def test_flat_layer_has_no_edges():
    assert not edge_mask(np.full((8, 16), 0.4)).mask.any()


def test_edge_weight_mu_selects_the_band():
    ref = np.zeros((8, 16))
    cand = np.zeros((8, 16))
    cand[:, :4] = 1.0
    mask = edge_mask(ref, margin=0, threshold=1.0)
    mask.mask[:, :4] = True
    assert edge_weighted_l1(cand, ref, mask, mu=1.0) == pytest.approx(1.0)
    assert edge_weighted_l1(cand, ref, mask, mu=0.0) == pytest.approx(0.0)
    assert edge_weighted_l1(cand, ref, mask, mu=0.8) == pytest.approx(0.8)


def test_highpass_mask_excludes_low_frequencies():
    mask = highpass_mask((32, 64), 0.25)
    assert not mask[16, 32]
    assert mask[0, 0]
    assert spectral_loss(np.ones((8, 8)), np.ones((8, 8))) == 0.0


def test_weights_are_validated():
    with pytest.raises(OutOfRange):
        QualityWeights(mu=1.5)
    with pytest.raises(OutOfRange):
        QualityWeights(beta=-0.1)


def test_grid_mismatch():
    with pytest.raises(GridMismatch):
        combined_quality(constant_map(SphericalGrid(8, 16), [0.3]), _step_map())
    with pytest.raises(GridMismatch):
        spectral_loss(np.zeros((4, 8)), np.zeros((8, 8)))


def _textured_layer() -> np.ndarray:
    return _noisy(_step_map(), 0.03).depth[0].astype(np.float64)


@pytest.mark.parametrize("shift", [1, 7, 32, 63])
def test_edge_mask_commutes_with_column_roll(shift):
    layer = _textured_layer()
    rolled = edge_mask(np.roll(layer, shift, axis=1)).mask
    assert np.array_equal(rolled, np.roll(edge_mask(layer).mask, shift, axis=1))


def test_spectral_loss_ignores_constant_offsets():
    ref = _step_map().depth[0].astype(np.float64)
    cand = _textured_layer()
    base = spectral_loss(cand, ref)
    assert base > 0
    assert spectral_loss(cand + 0.25, ref) == pytest.approx(base, rel=1e-9)
    assert spectral_loss(cand + 0.25, ref + 0.25) == pytest.approx(base, rel=1e-9)
    assert spectral_loss(cand + 0.1, cand) == pytest.approx(0.0, abs=1e-9)
