"""Diagnostics: what does the guidance residual actually push on?

The central quantity is the residual delta_e = positive - negative between
the two forward passes of a guidance method, measured at a chosen timestep
on freshly corrupted clean samples (the trajectory is never advanced; each
probe re-noises the clean sample directly).  The residual is compared
against the true corruption noise globally and per radial frequency band:

* a cosine near zero means the method's correction is orthogonal to the
  noise direction, i.e. it does not fight the denoising objective,
* a negative cosine means the correction actively re-injects noise.

Frequency bands partition the 2-D spectrum by radius sqrt(fx^2 + fy^2) of
the per-axis normalized frequencies (each in [-0.5, 0.5)) into uniform bins
up to a maximum radius, with everything beyond collected in a leftover
band.  The decomposition is exactly energy-preserving, which a Parseval
check in the tests enforces.

Also here: an unbiased RBF-kernel two-sample discrepancy used to score
sampled point clouds against held-out data.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .denoiser import Denoiser
from .diffusion import NoiseSchedule, forward_noise
from .errors import InvalidConfig, InvalidSize, ShapeMismatch
from .guidance import GuidanceConfig, GuidanceMethod, negative_eps
from .rng import SeededRng

DEGENERATE_NORM = 1e-12


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two tensors, flattened.

    Returns 0.0 (a flagged degenerate value) when either norm is below
    1e-12, so an all-zero residual reads as "no alignment" rather than NaN.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot compare shapes {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class RadialBinning:
    n_bins: int = 29
    max_radius: float = 0.7

    def __post_init__(self):
        if self.n_bins < 1:
            raise InvalidConfig(f"n_bins must be >= 1, got {self.n_bins}")
        # the largest attainable radius is sqrt(0.5) at the corner (-0.5, -0.5)
        if not (0.0 < self.max_radius <= np.sqrt(0.5) + 1e-9):
            raise InvalidConfig(
                f"max_radius must lie in (0, {np.sqrt(0.5):.6f}], got {self.max_radius}"
            )

    @property
    def bin_width(self) -> float:
        return self.max_radius / self.n_bins


@lru_cache(maxsize=64)
def _band_masks(h: int, w: int, n_bins: int, max_radius: float) -> np.ndarray:
    """(n_bins + 1, h, w) boolean masks; the last one is the leftover band."""
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    radius = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    width = max_radius / n_bins
    idx = np.minimum((radius / width).astype(np.int64), n_bins)
    idx[radius >= max_radius] = n_bins
    masks = np.zeros((n_bins + 1, h, w), dtype=bool)
    for b in range(n_bins + 1):
        masks[b] = idx == b
    return masks


def radial_band_decompose(field2d: np.ndarray, binning: RadialBinning) -> tuple[list[np.ndarray], np.ndarray]:
    """Split one 2-D field into per-band fields plus the leftover band.

    The bands sum back to the input exactly (the masks tile the spectrum),
    and because the masks are radially symmetric each band of a real field
    is real.  Returns (list of n_bins fields, leftover field).
    """
    field2d = np.asarray(field2d, dtype=np.float64)
    if field2d.ndim != 2 or field2d.shape[0] < 2 or field2d.shape[1] < 2:
        raise ShapeMismatch(f"need a 2-D field with both dims >= 2, got shape {field2d.shape}")
    h, w = field2d.shape
    masks = _band_masks(h, w, binning.n_bins, binning.max_radius)
    spectrum = np.fft.fft2(field2d)
    bands = [np.fft.ifft2(spectrum * masks[b]).real for b in range(binning.n_bins)]
    leftover = np.fft.ifft2(spectrum * masks[binning.n_bins]).real
    return bands, leftover


def _band_project(batch: np.ndarray, binning: RadialBinning) -> np.ndarray:
    """Vectorized band split of a (B, H, W, C) stack -> (n_bins, B, H, W, C).

    The leftover band is dropped; binned statistics only cover radii below
    the maximum.
    """
    b, h, w, c = batch.shape
    masks = _band_masks(h, w, binning.n_bins, binning.max_radius)
    spectrum = np.fft.fft2(batch, axes=(1, 2))
    out = np.empty((binning.n_bins, b, h, w, c))
    for i in range(binning.n_bins):
        out[i] = np.fft.ifft2(spectrum * masks[i][None, :, :, None], axes=(1, 2)).real
    return out


def band_cosine_and_norm(delta_e: np.ndarray, eps: np.ndarray,
                         binning: RadialBinning) -> tuple[np.ndarray, np.ndarray]:
    """Per-band cosine between delta_e and eps, and raw l2 norm of delta_e bands.

    Accepts one sample (H, W, C) or a batch (B, H, W, C); each band is
    flattened over all remaining axes before the cosine.  Norms are plain
    l2 norms of the residual band, with no per-pixel normalization.
    """
    delta_e = np.asarray(delta_e, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if delta_e.shape != eps.shape:
        raise ShapeMismatch(f"residual shape {delta_e.shape} != noise shape {eps.shape}")
    if delta_e.ndim == 3:
        delta_e = delta_e[None]
        eps = eps[None]
    if delta_e.ndim != 4:
        raise ShapeMismatch(f"expected (H, W, C) or (B, H, W, C), got {delta_e.shape}")
    if delta_e.shape[1] < 2 or delta_e.shape[2] < 2:
        raise ShapeMismatch(f"spatial dims must both be >= 2, got {delta_e.shape[1:3]}")
    d_bands = _band_project(delta_e, binning)
    e_bands = _band_project(eps, binning)
    cos = np.array([cosine(d_bands[i], e_bands[i]) for i in range(binning.n_bins)])
    norms = np.array([float(np.linalg.norm(d_bands[i])) for i in range(binning.n_bins)])
    return cos, norms


def residual_at(x0: np.ndarray, t: int, gcfg: GuidanceConfig, model: Denoiser,
                sched: NoiseSchedule, rng: SeededRng, c=None):
    """Probe one clean sample at one timestep: corrupt, run both passes.

    Draws fresh noise from ``rng``, corrupts x0 to step t, and returns
    (delta_e, eps) where delta_e is the positive-minus-negative residual of
    the configured method on that corrupted input.  The unguided method has
    an identically zero residual.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.generator().standard_normal(x0.shape)
    x_t = forward_noise(x0[None], t, eps[None], sched)
    eps_pos = model.forward(x_t, t, c)
    if gcfg.method is GuidanceMethod.NONE:
        delta = np.zeros_like(eps_pos)
    else:
        eps_neg = negative_eps(x_t, t, c, gcfg, model)
        delta = eps_pos - eps_neg
    return delta[0], eps


@dataclass
class AnalysisGrid:
    """Sweep output: per (timestep, method) global and per-band statistics.

    Global arrays are (timesteps, methods); band dicts map method name to a
    (timesteps, n_bins) array.  All cosines are per-sample values averaged
    arithmetically over the probed samples.
    """

    timesteps: list[int]
    methods: list[str]
    binning: RadialBinning
    cos_global: np.ndarray
    cos_guided_global: np.ndarray
    norm_global: np.ndarray
    cos_bands: dict[str, np.ndarray] = field(default_factory=dict)
    cos_guided_bands: dict[str, np.ndarray] = field(default_factory=dict)
    norm_bands: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self):
        for arr in (self.cos_global, self.cos_guided_global, self.norm_global):
            if not np.all(np.isfinite(arr)):
                raise InvalidConfig("analysis grid contains non-finite entries")
        for d in (self.cos_bands, self.cos_guided_bands, self.norm_bands):
            for arr in d.values():
                if not np.all(np.isfinite(arr)):
                    raise InvalidConfig("analysis grid contains non-finite entries")
        for arr in (self.cos_global, self.cos_guided_global):
            if np.any(np.abs(arr) > 1.0 + 1e-9):
                raise InvalidConfig("cosine outside [-1, 1]")


def _sample_key(x0: np.ndarray) -> int:
    """Content hash of one sample, so noise pairing survives dataset reordering."""
    digest = hashlib.blake2s(np.ascontiguousarray(x0).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def sweep(samples: np.ndarray, labels, timesteps, gcfgs: dict[str, GuidanceConfig],
          model: Denoiser, sched: NoiseSchedule, n_samples: int, seed: int,
          binning: RadialBinning = RadialBinning(), conditional: bool = True,
          threads: int = 1) -> AnalysisGrid:
    """Measure every configured method at every timestep on the same probes.

    For each timestep, the first n_samples clean samples are corrupted with
    noise keyed by (seed, t, sample content), so every method sees the same
    corrupted inputs and the result does not depend on dataset ordering when
    the whole set is covered.  Per-sample cosines and norms are averaged
    arithmetically.  Band statistics need 2-D samples (images).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 4:
        raise InvalidConfig("sweep needs image-shaped samples (n, H, W, C) for band statistics")
    if n_samples < 1 or n_samples > len(samples):
        raise InvalidSize(f"n_samples {n_samples} outside [1, {len(samples)}]")
    timesteps = [sched.check_step(int(t), lo=1) for t in timesteps]
    methods = list(gcfgs)
    x0 = samples[:n_samples]
    lab = None
    if conditional and labels is not None:
        lab = np.asarray(labels)[:n_samples]
    keys = [_sample_key(x0[i]) for i in range(n_samples)]

    n_t, n_m, n_b = len(timesteps), len(methods), binning.n_bins
    cos_g = np.zeros((n_t, n_m))
    cos_gg = np.zeros((n_t, n_m))
    norm_g = np.zeros((n_t, n_m))
    cos_b = {m: np.zeros((n_t, n_b)) for m in methods}
    cos_gb = {m: np.zeros((n_t, n_b)) for m in methods}
    norm_b = {m: np.zeros((n_t, n_b)) for m in methods}
    root = SeededRng(seed)

    def one_timestep(it: int):
        t = timesteps[it]
        eps = np.stack([
            root.stream("eps", t, keys[i]).generator().standard_normal(x0.shape[1:])
            for i in range(n_samples)
        ])
        x_t = forward_noise(x0, t, eps, sched)
        e_bands = _band_project(eps, binning)
        e_band_norms = np.sqrt(np.einsum("kbhwc,kbhwc->kb", e_bands, e_bands))
        eps_flat = eps.reshape(n_samples, -1)
        eps_norms = np.linalg.norm(eps_flat, axis=1)
        eps_pos = model.forward(x_t, t, lab)
        for im, m in enumerate(methods):
            gcfg = gcfgs[m]
            if gcfg.method is GuidanceMethod.NONE:
                delta = np.zeros_like(eps_pos)
            else:
                eps_neg = negative_eps(x_t, t, lab, gcfg, model)
                delta = eps_pos - eps_neg
            guided = eps_pos + gcfg.resolved_gamma() * delta
            cos_g[it, im] = np.mean(_per_sample_cos(delta, eps_flat, eps_norms))
            cos_gg[it, im] = np.mean(_per_sample_cos(guided, eps_flat, eps_norms))
            norm_g[it, im] = np.mean(np.linalg.norm(delta.reshape(n_samples, -1), axis=1))
            d_bands = _band_project(delta, binning)
            g_bands = _band_project(guided, binning)
            cos_b[m][it] = _mean_band_cos(d_bands, e_bands, e_band_norms)
            cos_gb[m][it] = _mean_band_cos(g_bands, e_bands, e_band_norms)
            norm_b[m][it] = np.mean(
                np.sqrt(np.einsum("kbhwc,kbhwc->kb", d_bands, d_bands)), axis=1
            )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one_timestep, range(n_t)))
    else:
        for it in range(n_t):
            one_timestep(it)

    grid = AnalysisGrid(
        timesteps=timesteps, methods=methods, binning=binning,
        cos_global=cos_g, cos_guided_global=cos_gg, norm_global=norm_g,
        cos_bands=cos_b, cos_guided_bands=cos_gb, norm_bands=norm_b,
    )
    grid.validate()
    return grid


def _per_sample_cos(a: np.ndarray, b_flat: np.ndarray, b_norms: np.ndarray) -> np.ndarray:
    a_flat = a.reshape(len(b_flat), -1)
    a_norms = np.linalg.norm(a_flat, axis=1)
    dots = np.einsum("ij,ij->i", a_flat, b_flat)
    denom = a_norms * b_norms
    out = np.zeros(len(b_flat))
    ok = (a_norms >= DEGENERATE_NORM) & (b_norms >= DEGENERATE_NORM)
    out[ok] = dots[ok] / denom[ok]
    return out


def _mean_band_cos(a_bands: np.ndarray, b_bands: np.ndarray, b_norms: np.ndarray) -> np.ndarray:
    """Mean over samples of per-sample band cosines; (bins, B, ...) inputs."""
    k, b = a_bands.shape[0], a_bands.shape[1]
    a_flat = a_bands.reshape(k, b, -1)
    b_flat = b_bands.reshape(k, b, -1)
    a_norms = np.sqrt(np.einsum("kbi,kbi->kb", a_flat, a_flat))
    dots = np.einsum("kbi,kbi->kb", a_flat, b_flat)
    out = np.zeros((k, b))
    ok = (a_norms >= DEGENERATE_NORM) & (b_norms >= DEGENERATE_NORM)
    out[ok] = dots[ok] / (a_norms[ok] * b_norms[ok])
    return out.mean(axis=1)


# ---------------------------------------------------------------------------
# two-sample discrepancy

def mmd(a: np.ndarray, b: np.ndarray, bandwidth: float, biased: bool = False) -> float:
    """Squared maximum mean discrepancy under an RBF kernel.

    Kernel: k(x, y) = exp(-||x - y||^2 / (2 * bandwidth^2)).  The default
    estimator is the unbiased one (diagonal terms of the within-set sums
    removed), clamped at zero since the unbiased estimate can dip slightly
    negative; ``biased=True`` keeps the diagonals, which makes identical
    sets score exactly zero.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if not (bandwidth > 0):
        raise InvalidConfig(f"bandwidth must be positive, got {bandwidth}")
    m, n = len(a), len(b)
    if m < 1 or n < 1:
        raise InvalidSize("both sets must be non-empty")
    if not biased and (m < 2 or n < 2):
        raise InvalidSize("the unbiased estimator needs at least two points per set")

    def gram(x, y):
        sq = (np.sum(x * x, axis=1)[:, None] + np.sum(y * y, axis=1)[None, :]
              - 2.0 * (x @ y.T))
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth * bandwidth))

    kxx = gram(a, a)
    kyy = gram(b, b)
    kxy = gram(a, b)
    if biased:
        est = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    else:
        sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        est = sxx + syy - 2.0 * kxy.mean()
    return float(max(est, 0.0))


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled sets (the usual heuristic)."""
    x = np.concatenate([np.atleast_2d(a), np.atleast_2d(b)])
    sq = (np.sum(x * x, axis=1)[:, None] + np.sum(x * x, axis=1)[None, :]
          - 2.0 * (x @ x.T))
    d = np.sqrt(np.maximum(sq[np.triu_indices(len(x), k=1)], 0.0))
    med = float(np.median(d))
    return med if med > 0 else 1.0


# ---------------------------------------------------------------------------
# serialization of grids

CSV_HEADER = "method,timestep,bin,cos_delta_eps,cos_guided_eps,norm_delta"


def grid_to_csv(grid: AnalysisGrid) -> str:
    """Flat CSV: one global row (bin = -1) plus one row per band.

    Rows appear method-major in the grid's method order, then by the grid's
    timestep order, then bins ascending.  Norm values are raw l2 norms (see
    the header comment in the output).
    """
    lines = [
        "# cos_delta_eps / cos_guided_eps: mean per-sample cosine against the true noise",
        "# norm_delta: mean per-sample raw l2 norm of the residual (band), unnormalized",
        CSV_HEADER,
    ]
    fmt = "%.10g"
    for im, m in enumerate(grid.methods):
        for it, t in enumerate(grid.timesteps):
            lines.append(",".join([
                m, str(t), "-1",
                fmt % grid.cos_global[it, im],
                fmt % grid.cos_guided_global[it, im],
                fmt % grid.norm_global[it, im],
            ]))
            for b in range(grid.binning.n_bins):
                lines.append(",".join([
                    m, str(t), str(b),
                    fmt % grid.cos_bands[m][it, b],
                    fmt % grid.cos_guided_bands[m][it, b],
                    fmt % grid.norm_bands[m][it, b],
                ]))
    return "\n".join(lines) + "\n"


def heatmap_u8(grid: AnalysisGrid, method: str, quantity: str, upscale: int = 8) -> np.ndarray:
    """Render one (method, quantity) panel as an 8-bit grayscale raster.

    Rows are timesteps in descending order (largest at the top), columns are
    the frequency bins.  Cosines map linearly from [-1, 1] to [0, 255];
    norms are mapped on a log scale over the panel's own range.
    """
    if quantity not in ("cos", "norm"):
        raise InvalidConfig(f"quantity must be 'cos' or 'norm', got {quantity!r}")
    if method not in grid.methods:
        raise InvalidConfig(f"method {method!r} not present in the grid")
    if upscale < 1:
        raise InvalidConfig(f"upscale must be >= 1, got {upscale}")
    order = np.argsort(grid.timesteps)[::-1]
    if quantity == "cos":
        panel = grid.cos_bands[method][order]
        scaled = (panel + 1.0) / 2.0
    else:
        panel = np.log10(np.maximum(grid.norm_bands[method][order], DEGENERATE_NORM))
        lo, hi = panel.min(), panel.max()
        scaled = np.zeros_like(panel) if hi == lo else (panel - lo) / (hi - lo)
    img = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    return np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)
