"""Region-of-interest extraction from stacks of camera frames.

Sites load independently, so each site's fluorescence is an independent
source; independent component analysis recovers one pixel map per site.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .camera import CameraConfig, synth_frame

__all__ = [
    "RoiError",
    "ComponentMap",
    "RoiSelection",
    "fast_ica",
    "ica_decompose",
    "select_roi",
    "loading_stack",
    "write_component_csv",
    "write_roi_json",
    "read_roi_json",
]


class RoiError(ValueError):
    pass


def _whiten(x, n_components):
    """Centre and PCA-whiten samples (rows). Returns (z, K, mean) with z = (x - mean) @ K.T."""
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    vt = vt[:n_components]
    # fix each axis's sign by its largest-magnitude entry
    flip = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    vt = vt * flip[:, None]
    scale = s[:n_components] / np.sqrt(x.shape[0])
    if np.any(scale <= 1e-12 * max(s[0], 1e-300)):
        raise RoiError(f"data rank is below the requested {n_components} components")
    k = vt / scale[:, None]
    return xc @ k.T, k, mean


def _sym_decorrelate(w):
    vals, vecs = np.linalg.eigh(w @ w.T)
    return (vecs / np.sqrt(vals)) @ vecs.T @ w


# contrast derivatives g and g'
CONTRASTS = {
    "skew": (lambda y: y * y, lambda y: 2.0 * y),
    "cube": (lambda y: y**3, lambda y: 3.0 * y * y),
    "logcosh": (np.tanh, lambda y: 1.0 - np.tanh(y) ** 2),
}


def fast_ica(x, n_components, contrast="skew", max_iter=1000, tol=1e-10):
    """Symmetric fixed-point ICA.

    ``x`` holds one sample per row. The default contrast G(y) = y^3/3 rewards
    skewness, which suits on/off sources such as random trap loading; the
    symmetric log-cosh contrast mixes pairs of such sources. Iteration starts
    from the PCA axes, so results are deterministic. Returns
    (sources, mixing, mean) with ``x ~ sources @ mixing.T + mean`` and
    unit-variance sources.
    """
    if contrast not in CONTRASTS:
        raise ValueError(f"unknown contrast {contrast!r}")
    g_fn, dg_fn = CONTRASTS[contrast]
    x = np.asarray(x, dtype=float)
    z, k, mean = _whiten(x, n_components)
    n = z.shape[0]
    w = np.eye(n_components)
    for _ in range(max_iter):
        y = z @ w.T
        w_new = g_fn(y).T @ z / n - np.mean(dg_fn(y), axis=0)[:, None] * w
        w_new = _sym_decorrelate(w_new)
        change = np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0))
        w = w_new
        if change < tol:
            break
    else:
        raise RoiError(f"ICA did not converge in {max_iter} iterations (last change {change:.2e})")
    unmix = w @ k
    sources = (x - mean) @ unmix.T
    mixing = np.linalg.pinv(unmix)
    return sources, mixing, mean


@dataclass
class ComponentMap:
    """One normalized pixel map per site, ordered by site.

    ``maps`` are absolute-value maps scaled to unit total; ``signed`` keeps
    the raw mixing columns (peak made positive); ``activations`` are the
    matching per-frame source values and ``occupancy`` their on/off split
    when the maps were refitted.
    """

    maps: np.ndarray
    signed: np.ndarray
    activations: np.ndarray
    centroids: np.ndarray
    occupancy: np.ndarray | None = None

    @property
    def n_components(self) -> int:
        return len(self.maps)

    @property
    def grid(self):
        return self.maps.shape[1:]


@dataclass
class RoiSelection:
    pixels: list  # per site, list of (row, col)
    enclosed: np.ndarray  # per site fraction of its map inside its ROI
    crosstalk: np.ndarray  # [i, j]: fraction of site i's map inside site j's ROI (0 on the diagonal)

    @property
    def neighbour_crosstalk(self) -> float:
        """Mean fraction of a site's light landing in an adjacent site's ROI."""
        n = len(self.pixels)
        vals = [self.crosstalk[i, j] for i in range(n) for j in (i - 1, i + 1) if 0 <= j < n]
        return float(np.mean(vals)) if vals else 0.0


def _centroid(m):
    rows, cols = m.shape
    r = np.arange(rows) + 0.5
    c = np.arange(cols) + 0.5
    total = m.sum()
    return np.array([m.sum(axis=1) @ r / total, m.sum(axis=0) @ c / total])


def _localization(m, k=5):
    flat = np.sort(m.ravel())[::-1]
    return flat[:k].sum()


def _two_means(a, iters=100):
    """Split 1-D values into low/high clusters; returns the boolean high mask."""
    lo, hi = np.percentile(a, [10, 90])
    thr = 0.5 * (lo + hi)
    for _ in range(iters):
        upper = a > thr
        if upper.all() or not upper.any():
            break
        new = 0.5 * (a[~upper].mean() + a[upper].mean())
        if new == thr:
            break
        thr = new
    return a > thr


def ica_decompose(frames, n_components, site_positions=None, min_localization=0.3, ambiguity=0.8,
                  contrast="auto", refine=True):
    """Per-site pixel maps from a frame stack.

    ``frames`` is a sequence of Frame objects or an array (n_frames, rows,
    cols). Components whose five brightest pixels hold less than
    ``min_localization`` of their map are treated as noise. The rest are
    matched to ``site_positions`` ((row, col) in pixel units, pixel r
    spanning [r, r+1)) by nearest centroid; without positions they are
    ordered along the chain by centroid column. A site left without a
    component, or a component that is nearly equidistant from two sites, is
    an error.

    With ``refine`` each activation is split into on/off frames and the maps
    are refitted by least squares of the pixels on those indicators. Finite
    samples are never exactly independent, so the raw ICA columns carry a
    few percent of their neighbours; the refit removes that.

    ``contrast="auto"`` uses skewness and falls back to kurtosis ("cube")
    when that fails to converge, as it does for loading near 50%.
    """
    stack = np.asarray([getattr(f, "counts", f) for f in frames], dtype=float)
    if stack.ndim != 3:
        raise RoiError("frames must form an array of shape (n_frames, rows, cols)")
    n_frames, rows, cols = stack.shape
    if n_frames < 2 * n_components:
        raise RoiError("too few frames for the requested number of components")
    x = stack.reshape(n_frames, -1)
    sv = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    rank = int(np.sum(sv > 1e-9 * sv[0])) if sv[0] > 0 else 0
    if rank < n_components:
        if site_positions is None or rank == 0:
            raise RoiError(f"frames have rank {rank}, fewer than {n_components} independent sources")
        found = ica_decompose(stack, rank, site_positions=None, min_localization=min_localization,
                              contrast=contrast, refine=False)
        sites = np.asarray(site_positions, dtype=float)
        hit = {int(np.argmin(np.linalg.norm(sites - c, axis=1))) for c in found.centroids}
        missing = [s for s in range(n_components) if s not in hit]
        raise RoiError(f"no independent component found for site(s) {missing}; were they ever loaded?")
    if contrast == "auto":
        try:
            sources, mixing, _ = fast_ica(x, n_components, "skew")
        except RoiError:
            sources, mixing, _ = fast_ica(x, n_components, "cube")
    else:
        sources, mixing, _ = fast_ica(x, n_components, contrast)

    signed = mixing.T.reshape(n_components, rows, cols).copy()
    for i in range(n_components):
        peak = np.argmax(np.abs(signed[i]))
        if signed[i].ravel()[peak] < 0:
            signed[i] *= -1
            sources[:, i] *= -1
    maps = np.abs(signed)
    maps /= maps.sum(axis=(1, 2), keepdims=True)
    centroids = np.array([_centroid(m) for m in maps])
    good = [i for i in range(n_components) if _localization(maps[i]) >= min_localization]

    if site_positions is None:
        if len(good) < n_components:
            raise RoiError(f"{n_components - len(good)} component(s) carry no localized signal")
        order = sorted(good, key=lambda i: centroids[i, 1])
    else:
        sites = np.asarray(site_positions, dtype=float)
        if len(sites) != n_components:
            raise RoiError("need one site position per component")
        assigned = {}
        for i in good:
            d = np.linalg.norm(sites - centroids[i], axis=1)
            best = np.argsort(d)
            if len(d) > 1 and d[best[0]] > ambiguity * d[best[1]]:
                raise RoiError(f"component {i} at {centroids[i].round(2).tolist()} is ambiguous between "
                               f"sites {int(best[0])} and {int(best[1])}")
            site = int(best[0])
            # two components on one site: keep the better localized one
            if site in assigned and _localization(maps[assigned[site]]) >= _localization(maps[i]):
                continue
            assigned[site] = i
        missing = [s for s in range(n_components) if s not in assigned]
        if missing:
            raise RoiError(f"no independent component found for site(s) {missing}; "
                           "were they ever loaded?")
        order = [assigned[s] for s in range(n_components)]
    occupancy = None
    if refine:
        occupancy = np.column_stack([_two_means(sources[:, i]) for i in order])
        design = np.column_stack([occupancy, np.ones(n_frames)]).astype(float)
        coef = np.linalg.lstsq(design, x, rcond=None)[0][:n_components]
        signed = np.empty_like(signed)
        signed[order] = coef.reshape(n_components, rows, cols)
        maps = np.abs(signed)
        maps /= maps.sum(axis=(1, 2), keepdims=True)
    return ComponentMap(maps=maps[order], signed=signed[order], activations=sources[:, order],
                        centroids=centroids[order], occupancy=occupancy)


def select_roi(component_map: ComponentMap, k: int, disjoint=True) -> RoiSelection:
    """Top-k pixels per site, greedily kept disjoint across sites.

    Pixels are claimed in order of decreasing weight; a pixel already taken
    by another site is skipped, and that site falls back to its next
    brightest pixel.
    """
    maps = component_map.maps
    n_sites = len(maps)
    n_pix = maps[0].size
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n_pix:
        raise RoiError(f"k={k} exceeds the {n_pix} pixels on the grid")
    cols = maps.shape[2]
    flat = maps.reshape(n_sites, -1)
    if not disjoint:
        chosen = [list(np.argsort(-flat[s], kind="stable")[:k]) for s in range(n_sites)]
    else:
        chosen = [[] for _ in range(n_sites)]
        owner = {}
        order = np.argsort(-flat, axis=None, kind="stable")
        for idx in order:
            s, p = divmod(int(idx), n_pix)
            if len(chosen[s]) < k and p not in owner:
                owner[p] = s
                chosen[s].append(p)
        short = [s for s in range(n_sites) if len(chosen[s]) < k]
        if short:
            tops = [set(np.argsort(-flat[s], kind="stable")[:k]) for s in range(n_sites)]
            contested = sorted({p for a in range(n_sites) for b in range(a + 1, n_sites) for p in tops[a] & tops[b]})
            raise RoiError(f"cannot give sites {short} {k} disjoint pixels; contested pixels "
                           f"{[divmod(p, cols) for p in contested]}")
    enclosed = np.array([flat[s, chosen[s]].sum() for s in range(n_sites)])
    cross = np.zeros((n_sites, n_sites))
    for i in range(n_sites):
        for j in range(n_sites):
            if i != j:
                cross[i, j] = flat[i, chosen[j]].sum()
    pixels = [[tuple(int(v) for v in divmod(p, cols)) for p in sorted(c)] for c in chosen]
    return RoiSelection(pixels=pixels, enclosed=enclosed, crosstalk=cross)


def loading_stack(n_frames, config: CameraConfig, load_probability=0.25, site_signal=150.0, rng=None,
                  noise=True):
    """Frames with independent random loading of every site.

    Returns (frames, occupancy) with occupancy of shape (n_frames, n_sites).
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n_sites = len(config.site_psf)
    occ = rng.random((n_frames, n_sites)) < load_probability
    frames = [synth_frame(o, site_signal, config, rng, shot=i, noise=noise) for i, o in enumerate(occ)]
    return frames, occ


def write_component_csv(component_map: ComponentMap, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "row", "col", "weight"])
        for s, m in enumerate(component_map.maps):
            for (r, c), v in np.ndenumerate(m):
                w.writerow([s, r, c, repr(float(v))])


def write_roi_json(selection: RoiSelection, path):
    doc = {
        "sites": {str(s): [list(p) for p in px] for s, px in enumerate(selection.pixels)},
        "enclosed_fraction": [float(v) for v in selection.enclosed],
        "neighbour_crosstalk": selection.neighbour_crosstalk,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_roi_json(path):
    """Site index -> list of (row, col) pixels."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return {int(s): [tuple(p) for p in px] for s, px in doc["sites"].items()}
