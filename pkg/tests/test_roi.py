import numpy as np
import pytest
from sklearn.decomposition import FastICA

from atomreadout.camera import (
    DEFAULT_SITE_CENTERS,
    CameraConfig,
    default_camera,
    site_psfs,
    synth_frame,
    top_pixels,
)
from atomreadout.roi import (
    RoiError,
    fast_ica,
    ica_decompose,
    loading_stack,
    read_roi_json,
    select_roi,
    write_component_csv,
    write_roi_json,
)

CFG = default_camera()
SITES = [tuple(c) for c in DEFAULT_SITE_CENTERS]


def true_top5(cfg=CFG):
    cols = cfg.pixel_grid[1]
    return [sorted(tuple(int(v) for v in divmod(int(p), cols)) for p in top_pixels(m, 5)) for m in cfg.site_psf]


@pytest.fixture(scope="module")
def noisy_stack():
    return loading_stack(3000, CFG, load_probability=0.25, site_signal=1000.0, rng=2)


@pytest.fixture(scope="module")
def noiseless_stack():
    return loading_stack(1500, CFG, load_probability=0.25, site_signal=150.0, rng=3, noise=False)


def test_fast_ica_matches_sklearn(noisy_stack):
    frames, _ = noisy_stack
    x = np.array([f.counts.ravel() for f in frames])
    ours, _, _ = fast_ica(x, 5, contrast="cube")
    ref = FastICA(5, whiten="unit-variance", fun="cube", random_state=0, max_iter=2000, tol=1e-8).fit_transform(x)
    corr = np.abs(np.corrcoef(ours.T, ref.T)[:5, 5:])
    assert np.all(corr.max(axis=1) > 0.999)


def test_fast_ica_rejects_unknown_contrast():
    with pytest.raises(ValueError):
        fast_ica(np.random.default_rng(0).random((50, 4)), 2, contrast="tanh")


def test_five_sites_resolved(noisy_stack):
    frames, occ = noisy_stack
    cm = ica_decompose(frames, 5, site_positions=SITES)
    assert cm.n_components == 5
    for k in range(5):
        assert np.corrcoef(cm.activations[:, k], occ[:, k])[0, 1] > 0.95
        assert np.abs(cm.centroids[k] - SITES[k]).max() < 0.6
    assert np.allclose(cm.maps.sum(axis=(1, 2)), 1.0)
    assert np.array_equal(cm.occupancy, occ)


def test_order_without_positions_follows_chain(noisy_stack):
    frames, _ = noisy_stack
    a = ica_decompose(frames, 5)
    b = ica_decompose(frames, 5, site_positions=SITES)
    assert np.allclose(a.maps, b.maps)


def test_single_site_component_is_psf():
    psf = site_psfs([(2.4, 2.6)], [0.6], (5, 5))
    cfg = CameraConfig(pixel_grid=(5, 5), site_psf=psf)
    frames, _ = loading_stack(600, cfg, site_signal=200.0, rng=4, noise=False)
    cm = ica_decompose(frames, 1)
    assert np.allclose(cm.maps[0], psf[0] / psf[0].sum(), atol=1e-10)


def test_noiseless_selection_equals_truth(noiseless_stack):
    frames, _ = noiseless_stack
    sel = select_roi(ica_decompose(frames, 5, site_positions=SITES), 5)
    assert sel.pixels == true_top5()
    assert np.allclose(sel.enclosed, [0.76, 0.88, 0.89, 0.92, 0.76], atol=1e-6)


def test_noisy_selection_and_fractions(noisy_stack):
    frames, _ = noisy_stack
    sel = select_roi(ica_decompose(frames, 5, site_positions=SITES), 5)
    assert sel.pixels == true_top5()
    # |map| normalization picks up per-pixel noise, so estimates sit slightly low
    assert np.all(np.abs(sel.enclosed - [0.76, 0.88, 0.89, 0.92, 0.76]) < 0.02)
    assert sel.neighbour_crosstalk == pytest.approx(0.02, abs=0.005)


def test_half_loading_falls_back_to_kurtosis():
    # Bernoulli(0.5) occupancy has no skewness for the default contrast to use
    frames, _ = loading_stack(1500, CFG, load_probability=0.5, site_signal=150.0, rng=4, noise=False)
    with pytest.raises(RoiError):
        ica_decompose(frames, 5, site_positions=SITES, contrast="skew")
    assert select_roi(ica_decompose(frames, 5, site_positions=SITES), 5).pixels == true_top5()


def test_disjoint_sets():
    frames, _ = loading_stack(800, CFG, site_signal=150.0, rng=5, noise=False)
    cm = ica_decompose(frames, 5, site_positions=SITES)
    for k in (1, 3, 5, 8):
        sel = select_roi(cm, k)
        flat = [p for px in sel.pixels for p in px]
        assert len(flat) == len(set(flat)) == 5 * k


def test_enclosure_non_decreasing_in_k(noiseless_stack):
    frames, _ = noiseless_stack
    cm = ica_decompose(frames, 5, site_positions=SITES)
    fractions = np.array([select_roi(cm, k).enclosed for k in range(1, 15)])
    assert np.all(np.diff(fractions, axis=0) >= -1e-15)


def test_whole_grid_single_site_encloses_everything(noiseless_stack):
    frames, _ = noiseless_stack
    cm = ica_decompose(frames, 5, site_positions=SITES)
    n_pix = cm.maps[0].size
    sel = select_roi(cm, n_pix, disjoint=False)
    assert np.allclose(sel.enclosed, 1.0)
    with pytest.raises(RoiError, match="contested"):
        select_roi(cm, n_pix // 4)
    with pytest.raises(RoiError):
        select_roi(cm, n_pix + 1)
    with pytest.raises(ValueError):
        select_roi(cm, 0)


def test_frame_order_does_not_change_roi(noisy_stack):
    frames, _ = noisy_stack
    perm = np.random.default_rng(9).permutation(len(frames))
    a = select_roi(ica_decompose(frames, 5, site_positions=SITES), 5)
    b = select_roi(ica_decompose([frames[i] for i in perm], 5, site_positions=SITES), 5)
    assert a.pixels == b.pixels


@pytest.mark.parametrize("noise", [False, True])
def test_never_loaded_site_is_named(noise):
    rng = np.random.default_rng(6)
    occ = rng.random((1500, 5)) < 0.25
    occ[:, 3] = False
    frames = [synth_frame(o, 1000.0, CFG, rng, noise=noise) for o in occ]
    with pytest.raises(RoiError, match=r"site\(s\) \[3\]"):
        ica_decompose(frames, 5, site_positions=SITES)


def test_input_validation():
    with pytest.raises(RoiError):
        ica_decompose(np.zeros((3, 4)), 1)
    with pytest.raises(RoiError):
        ica_decompose(np.zeros((4, 3, 3)), 5)


def test_exports(tmp_path, noiseless_stack):
    frames, _ = noiseless_stack
    cm = ica_decompose(frames, 5, site_positions=SITES)
    sel = select_roi(cm, 5)
    write_component_csv(cm, tmp_path / "maps.csv")
    lines = (tmp_path / "maps.csv").read_text().splitlines()
    assert lines[0] == "site,row,col,weight" and len(lines) == 1 + cm.maps.size
    write_roi_json(sel, tmp_path / "roi.json")
    back = read_roi_json(tmp_path / "roi.json")
    assert [back[s] for s in range(5)] == sel.pixels
