"""Synthetic DPC cells with a known morphology-to-marker coupling.

Each cell has a class ``c``, four marker values ``z ~ N(mu_c, sd_c^2)`` and a
rendered latent ``s = kappa * z + (1 - kappa) * xi`` with ``xi`` an
independent draw from the same class-conditional Gaussian. The latent drives
the rendering: ``s1`` scales the cytoplasm phase, ``s2`` the granule
amplitude, ``s3`` the cell radius and ``s4`` the nucleus phase. A fraction of
lymphocytes and monocytes (``ambiguity``) is drawn with the other class's
nucleus. The four illumination channels are signed directional gradients of
the phase map plus Gaussian pixel noise.

Because the generator is known, the best achievable accuracy and marker
correlation given the rendered latents ``(morphology, s)`` can be computed
exactly for any emitted subset (:meth:`OracleReport.ceiling`). Pixel noise and
rendering nuisances are ignored there, so the figures are upper bounds on
what any image model can reach.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CLASS_NAMES, MARKER_NAMES, CellRecord, Dataset
from .tensorcore import Rng, derive_seed

# CD45 / CD16 class means and stds from the BSCCM test split table; the two
# composite markers default to +-0.5 by lineage with std 0.9.
DEFAULT_MARKER_MEANS = (
    (-0.18, -0.72, 0.5, -0.5),   # lymphocyte
    (0.32, 0.65, -0.5, -0.5),    # granulocyte
    (0.24, -0.13, -0.5, 0.5),    # monocyte
)
DEFAULT_MARKER_STDS = (
    (0.95, 0.81, 0.9, 0.9),
    (0.88, 0.92, 0.9, 0.9),
    (1.04, 0.87, 0.9, 0.9),
)
GRANULES = (12, 30, 12)
HW = 28


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int | tuple[int, int, int] = 100
    marker_means: tuple = DEFAULT_MARKER_MEANS
    marker_stds: tuple = DEFAULT_MARKER_STDS
    kappa: float = 1.0
    noise_sigma: float = 0.02
    ambiguity: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        if not 0.0 <= self.ambiguity < 0.5:
            raise ValueError("ambiguity must lie in [0, 0.5)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def counts(self) -> tuple[int, int, int]:
        n = self.n_per_class
        return (n, n, n) if isinstance(n, int) else tuple(int(v) for v in n)


@dataclass
class OracleReport:
    """Generator ceilings plus the latents needed to recompute them on any subset."""

    cfg: SynthConfig
    ids: list[str]
    cls: np.ndarray
    morph: np.ndarray
    markers: np.ndarray
    latent: np.ndarray
    accuracy_ceiling: float = 0.0
    marker_r_ceiling: np.ndarray = field(default_factory=lambda: np.zeros(4))

    @property
    def mean_r_ceiling(self) -> float:
        return float(np.mean(self.marker_r_ceiling))

    def _index(self, ids) -> np.ndarray:
        pos = {k: i for i, k in enumerate(self.ids)}
        return np.array([pos[i] for i in ids], dtype=np.int64)

    def posterior(self, idx: np.ndarray | None = None) -> np.ndarray:
        """P(class | morphology, latent) for each cell, [N, 3]."""
        idx = np.arange(len(self.ids)) if idx is None else idx
        mu = np.asarray(self.cfg.marker_means, dtype=np.float64)
        sd = np.asarray(self.cfg.marker_stds, dtype=np.float64)
        k = self.cfg.kappa
        scale = np.sqrt(k * k + (1 - k) ** 2)
        counts = np.asarray(self.cfg.counts, dtype=np.float64)
        prior = counts / counts.sum()
        s = self.latent[idx]
        m = self.morph[idx]
        logp = np.zeros((len(idx), 3))
        for c in range(3):
            var = (scale * sd[c]) ** 2
            ll = -0.5 * ((s - mu[c]) ** 2 / var + np.log(2 * np.pi * var)).sum(axis=1)
            logp[:, c] = np.log(prior[c]) + ll + np.log(np.maximum(_morph_likelihood(c, m, self.cfg.ambiguity), 1e-300))
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        return p / p.sum(axis=1, keepdims=True)

    def bayes_markers(self, idx: np.ndarray | None = None) -> np.ndarray:
        """E[z | morphology, latent] for each cell, [N, 4]."""
        idx = np.arange(len(self.ids)) if idx is None else idx
        mu = np.asarray(self.cfg.marker_means, dtype=np.float64)
        k = self.cfg.kappa
        gain = k / (k * k + (1 - k) ** 2)
        post = self.posterior(idx)
        s = self.latent[idx]
        est = np.zeros_like(s)
        for c in range(3):
            est += post[:, [c]] * (mu[c] + gain * (s - mu[c]))
        return est

    def ceiling(self, ids=None) -> tuple[float, np.ndarray]:
        """(accuracy ceiling, per-marker Pearson ceiling) over ``ids`` (all cells if None)."""
        idx = np.arange(len(self.ids)) if ids is None else self._index(ids)
        pred = self.posterior(idx).argmax(axis=1)
        acc = float((pred == self.cls[idx]).mean())
        est = self.bayes_markers(idx)
        z = self.markers[idx]
        r = np.array([_pearson(est[:, j], z[:, j]) for j in range(z.shape[1])])
        return acc, r


def _morph_likelihood(c: int, morph: np.ndarray, ambiguity: float) -> np.ndarray:
    if c == 1:
        return (morph == 1).astype(np.float64)
    other = 2 if c == 0 else 0
    return np.where(morph == c, 1.0 - ambiguity, np.where(morph == other, ambiguity, 0.0))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).mean() * (b * b).mean())
    return float((a * b).mean() / den) if den > 0 else 0.0


def _soft_disk(d: np.ndarray, r: float, edge: float = 0.7) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh((r - d) / (2.0 * edge)))


def render_phase(morph: int, latent: np.ndarray, rng: Rng) -> np.ndarray:
    """Phase map of one cell on the 28x28 grid."""
    s1, s2, s3, s4 = (float(v) for v in latent)
    yy, xx = np.mgrid[0:HW, 0:HW].astype(np.float64)
    cx = (HW - 1) / 2 + rng.uniform(-1.0, 1.0)
    cy = (HW - 1) / 2 + rng.uniform(-1.0, 1.0)
    theta = rng.uniform(0.0, 2 * np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct

    radius = 9.5 + 1.8 * np.tanh(s3 / 2.0)
    body = 0.8 * np.exp(0.3 * s1) * _soft_disk(np.hypot(u, v), radius)

    if morph == 0:  # compact round nucleus
        nuc = _soft_disk(np.hypot(u - 0.1 * radius, v), 0.62 * radius)
    elif morph == 1:  # three lobes on an arc
        nuc = np.zeros_like(u)
        for ang in (-2.1, 0.0, 2.1):
            lx, ly = 0.42 * radius * np.cos(ang), 0.42 * radius * np.sin(ang)
            nuc = np.maximum(nuc, _soft_disk(np.hypot(u - lx, v - ly), 0.27 * radius))
    else:  # kidney: disk with an off-centre bite
        outer = _soft_disk(np.hypot(u + 0.1 * radius, v), 0.55 * radius)
        bite = _soft_disk(np.hypot(u - 0.5 * radius, v), 0.33 * radius)
        nuc = np.clip(outer - bite, 0.0, 1.0)
    nucleus = 0.7 * np.exp(0.5 * s4) * nuc

    granules = np.zeros_like(u)
    amp = 0.3 * np.exp(0.6 * s2)
    for _ in range(GRANULES[morph]):
        rr = 0.85 * radius * np.sqrt(rng.uniform())
        aa = rng.uniform(0.0, 2 * np.pi)
        gx, gy = rr * np.cos(aa), rr * np.sin(aa)
        granules += np.exp(-((u - gx) ** 2 + (v - gy) ** 2) / (2 * 0.7 ** 2))
    return body + nucleus + amp * granules


def dpc_channels(phase: np.ndarray, noise_sigma: float, rng: Rng) -> np.ndarray:
    """Left/right/top/bottom intensities from the phase gradient, plus noise."""
    gy, gx = np.gradient(phase)
    img = np.stack([1.0 + gx, 1.0 - gx, 1.0 + gy, 1.0 - gy])
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return img.astype(np.float32)


def synthesize(cfg: SynthConfig, id_prefix: str = "syn") -> tuple[Dataset, OracleReport]:
    """Render ``cfg.counts`` cells per class; deterministic in ``cfg.seed``.

    The returned dataset has a single split ``"all"``; see :func:`split_dataset`.
    """
    rng = Rng(derive_seed(cfg.seed, "synth"))
    mu = np.asarray(cfg.marker_means, dtype=np.float64)
    sd = np.asarray(cfg.marker_stds, dtype=np.float64)
    classes = np.concatenate([np.full(n, c) for c, n in enumerate(cfg.counts)]).astype(np.int64)
    classes = classes[rng.permutation(len(classes))]
    n = len(classes)
    z = mu[classes] + sd[classes] * rng.normal(0.0, 1.0, (n, 4))
    xi = mu[classes] + sd[classes] * rng.normal(0.0, 1.0, (n, 4))
    latent = cfg.kappa * z + (1.0 - cfg.kappa) * xi
    swap = rng.random(n) < cfg.ambiguity
    morph = classes.copy()
    morph[swap & (classes == 0)] = 2
    morph[swap & (classes == 2)] = 0

    records = []
    ids = [f"{id_prefix}-{i:06d}" for i in range(n)]
    for i in range(n):
        phase = render_phase(int(morph[i]), latent[i], rng)
        img = dpc_channels(phase, cfg.noise_sigma, rng)
        records.append(CellRecord(img, int(classes[i]), z[i].astype(np.float32), ids[i]))

    oracle = OracleReport(cfg, ids, classes, morph, z.astype(np.float32).astype(np.float64), latent)
    oracle.accuracy_ceiling, oracle.marker_r_ceiling = oracle.ceiling()
    ds = Dataset(records, {"all": list(ids)}, MARKER_NAMES, CLASS_NAMES)
    return ds, oracle


def split_dataset(ds: Dataset, sizes: dict[str, int], seed: int = 0) -> Dataset:
    """Assign records to named splits of the given sizes after a seeded shuffle."""
    total = sum(sizes.values())
    if total > len(ds):
        raise ValueError(f"requested {total} records, dataset has {len(ds)}")
    order = Rng(derive_seed(seed, "split")).permutation(len(ds))
    splits, start = {}, 0
    for name, size in sizes.items():
        splits[name] = [ds.records[i].id for i in sorted(order[start:start + size])]
        start += size
    return Dataset(ds.records, splits, ds.marker_names, ds.class_names)
