"""Synthetic surrogate for a clinical slice-quality dataset.

Each stack renders an elliptical "brain" phantom (bright rim, smooth
internal texture) over a darker tissue-like background:

* ``D`` slices show the uncorrupted phantom with its sharp boundary.
* ``N`` slices take the same rendering and corrupt it with one to three
  operators: Gaussian blur over the brain region, full-width signal-void
  bands, and a shifted-copy ghost (wrap-around aliasing).
* ``W`` slices contain background texture only, no phantom.

Generation is pure given (config, seed): the same call yields bit-identical
pixels.  Output intensities are quantized to the 16-bit grid so that the
PNG round trip in :mod:`fetaliqa.data` is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Dataset, Label, Slice
from .errors import ConfigError

# Any corrupted slice differs from its clean counterpart by at least this
# mean absolute intensity whenever corruption_strength > 0.
CORRUPTION_MAD_FLOOR = 0.004


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator.

    ``label_fractions`` are the per-stack proportions of (D, N, W) slices,
    realized exactly per stack via the largest-remainder rule.
    ``corruption_strength`` in [0, 1] scales blur width, void-band count
    and ghost amplitude; at exactly 0 the N slices are left uncorrupted.
    ``pixel_noise`` is the sigma of the additive Gaussian sensor noise laid
    over every rendered slice.
    """

    n_stacks: int
    slices_per_stack: int = 30
    label_fractions: tuple[float, float, float] = (0.5, 0.3, 0.2)
    corruption_strength: float = 0.7
    seed: int = 0
    image_size: int = 64
    pixel_noise: float = 0.02

    def validate(self) -> None:
        if self.n_stacks < 1:
            raise ConfigError("n_stacks must be >= 1")
        if self.slices_per_stack < 1:
            raise ConfigError("slices_per_stack must be >= 1")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if self.pixel_noise < 0:
            raise ConfigError("pixel_noise must be >= 0")
        fr = self.label_fractions
        if len(fr) != 3 or any(f < 0 for f in fr):
            raise ConfigError("label_fractions must be three non-negative values")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"label_fractions must sum to 1, got {sum(fr)}")
        if not 0.0 <= self.corruption_strength <= 1.0:
            raise ConfigError("corruption_strength must lie in [0, 1]")


@dataclass(eq=False)
class SliceTruth:
    """Generator-side ground truth for one slice (tests and calibration)."""

    label: Label
    ellipse: tuple[float, float, float, float, float] | None  # (cr, cc, a, b, phi)
    ellipse_mask: np.ndarray | None
    clean: np.ndarray | None  # pre-corruption rendering, N slices only


def largest_remainder_counts(fractions: tuple[float, ...], total: int) -> list[int]:
    """Apportion ``total`` into integer counts proportional to ``fractions``.

    Floors first, then hands out the remainder by descending fractional
    part; ties go to the lower index.  Counts always sum to ``total``.
    """
    exact = [f * total for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    rem = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return counts


def _elliptical_radius2(size: int, cr: float, cc: float, a: float, b: float, phi: float) -> np.ndarray:
    """Squared elliptical radius of every pixel center; 1.0 on the boundary."""
    rr, cc_grid = np.mgrid[0:size, 0:size].astype(np.float64)
    dr, dc = rr - cr, cc_grid - cc
    u = dr * math.cos(phi) + dc * math.sin(phi)
    v = -dr * math.sin(phi) + dc * math.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2


def _low_freq_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Smooth zero-mean random field with unit standard deviation."""
    f = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode="reflect")
    sd = f.std()
    return f / sd if sd > 0 else f


def _stack_appearance(rng: np.random.Generator, size: int) -> dict:
    """Draw per-stack appearance latents (anatomy and contrast vary by scan).

    The ranges are deliberately wide: a couple hundred labeled slices do not
    pin down the appearance manifold, while a few thousand unlabeled ones do.
    """
    a = rng.uniform(0.13, 0.26) * size
    return {
        "center": (
            size / 2 + rng.uniform(-0.12, 0.12) * size,
            size / 2 + rng.uniform(-0.12, 0.12) * size,
        ),
        "axes": (a, a * rng.uniform(0.60, 1.0)),
        "phi": rng.uniform(0.0, math.pi),
        "mu_bg": rng.uniform(0.05, 0.24),
        "mu_in": rng.uniform(0.55, 0.85),
        "mu_rim": rng.uniform(0.70, 1.00),
        "bg_texture_amp": rng.uniform(0.03, 0.10),
        "in_texture_amp": rng.uniform(0.05, 0.16),
        "rim_inner": rng.uniform(0.70, 0.88),
        "bias_amp": rng.uniform(0.0, 0.06),
    }


def _apply_bias(img: np.ndarray, rng: np.random.Generator, size: int, app: dict) -> np.ndarray:
    """Additive low-frequency intensity inhomogeneity (coil-profile-like)."""
    if app["bias_amp"] <= 0.0:
        return img
    return img + app["bias_amp"] * _low_freq_field(rng, size, sigma=size / 5)


def _render_background(rng: np.random.Generator, size: int, app: dict) -> np.ndarray:
    bg = app["mu_bg"] + app["bg_texture_amp"] * _low_freq_field(rng, size, sigma=size / 9)
    # A few soft tissue-like blobs so "no brain" is not just "dark frame".
    for _ in range(int(rng.integers(0, 3))):
        bcr, bcc = rng.uniform(0, size, size=2)
        bsig = rng.uniform(0.06, 0.14) * size
        bamp = rng.uniform(0.08, 0.22)
        rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
        bg += bamp * np.exp(-((rr - bcr) ** 2 + (cc - bcc) ** 2) / (2 * bsig**2))
    return bg


def _render_phantom_slice(
    rng: np.random.Generator, size: int, app: dict
) -> tuple[np.ndarray, tuple[float, float, float, float, float], np.ndarray]:
    """Render one brain-bearing slice; returns (image, ellipse, ellipse mask)."""
    # Per-slice anatomical jitter around the stack's latent ellipse.
    cr = app["center"][0] + rng.uniform(-1.5, 1.5)
    cc = app["center"][1] + rng.uniform(-1.5, 1.5)
    scale = rng.uniform(0.92, 1.08)
    a, b = app["axes"][0] * scale, app["axes"][1] * scale
    phi = app["phi"] + rng.uniform(-0.1, 0.1)

    img = _render_background(rng, size, app)
    rho2 = _elliptical_radius2(size, cr, cc, a, b, phi)
    inside = rho2 <= 1.0
    interior = rho2 <= app["rim_inner"] ** 2

    tex = _low_freq_field(rng, size, sigma=size / 14)
    brain = app["mu_rim"] * np.ones((size, size))
    brain_interior = app["mu_in"] + app["in_texture_amp"] * tex
    # A darker ventricle-like inclusion for internal structure.
    vcr = cr + rng.uniform(-0.2, 0.2) * a
    vcc = cc + rng.uniform(-0.2, 0.2) * b
    vrho2 = _elliptical_radius2(size, vcr, vcc, 0.30 * a, 0.30 * b, phi)
    brain_interior = np.where(vrho2 <= 1.0, brain_interior - 0.18, brain_interior)
    brain = np.where(interior, brain_interior, brain)

    img = np.where(inside, brain, img)
    return img, (cr, cc, a, b, phi), inside


def _blur_brain(img: np.ndarray, rho2: np.ndarray, s_eff: float) -> np.ndarray:
    sigma = 0.8 + 2.2 * s_eff
    blurred = gaussian_filter(img, sigma=sigma, mode="reflect")
    region = rho2 <= 1.35**2
    return np.where(region, blurred, img)


def _void_bands(img: np.ndarray, rng: np.random.Generator, cr: float, a: float, s_eff: float) -> np.ndarray:
    out = img.copy()
    size = img.shape[0]
    n_bands = 1 + int(round(2.0 * s_eff))
    for _ in range(n_bands):
        h = int(rng.integers(2, 6))
        r0 = int(np.clip(round(cr + rng.uniform(-1.0, 1.0) * a), 0, size - h))
        out[r0 : r0 + h, :] *= 0.05
    return out


def _ghost(img: np.ndarray, rng: np.random.Generator, s_eff: float) -> np.ndarray:
    amp = 0.1 + 0.2 * s_eff
    shift = int(round(img.shape[0] * rng.uniform(0.20, 0.35)))
    if rng.random() < 0.5:
        shift = -shift
    return np.clip(img + amp * np.roll(img, shift, axis=0), 0.0, 1.0)


def _corrupt(
    img: np.ndarray,
    rng: np.random.Generator,
    ellipse: tuple[float, float, float, float, float],
    strength: float,
) -> np.ndarray:
    """Apply 1-3 artifact operators; guarantees the corruption floor."""
    cr, cc, a, b, phi = ellipse
    rho2 = _elliptical_radius2(img.shape[0], cr, cc, a, b, phi)
    s_eff = strength * rng.uniform(0.55, 1.0)
    ops = rng.permutation(3)[: 1 + int(rng.integers(0, 3))]
    out = img
    for op in ops:
        if op == 0:
            out = _blur_brain(out, rho2, s_eff)
        elif op == 1:
            out = _void_bands(out, rng, cr, a, s_eff)
        else:
            out = _ghost(out, rng, s_eff)
    # A weak single operator can fall under the detectability floor; force
    # at least one unmistakable void band in that case.
    while float(np.mean(np.abs(out - img))) < CORRUPTION_MAD_FLOOR:
        out = _void_bands(out, rng, cr, a, 1.0)
    return out


def _assign_labels(
    rng: np.random.Generator, counts: list[int], n_slices: int
) -> list[Label]:
    """Place W at the stack ends (brain out of view) and scatter N in between."""
    n_d, n_n, n_w = counts
    labels: list[Label | None] = [None] * n_slices
    head = (n_w + 1) // 2
    for i in range(head):
        labels[i] = Label.W
    for i in range(n_slices - (n_w - head), n_slices):
        labels[i] = Label.W
    middle = [i for i, lab in enumerate(labels) if lab is None]
    middle_perm = rng.permutation(len(middle))
    for j in middle_perm[:n_n]:
        labels[middle[j]] = Label.N
    for i in middle:
        if labels[i] is None:
            labels[i] = Label.D
    return labels  # type: ignore[return-value]


def _quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and snap to the 16-bit grid (exact PNG round trip)."""
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0
    return q.astype(np.float32)


def generate_with_truth(
    config: SynthConfig, split: str = "train"
) -> tuple[Dataset, dict[tuple[str, int], SliceTruth]]:
    """Generate a fully labeled synthetic dataset plus per-slice ground truth.

    Stack ids carry the split name (``"<split>-<k>"``), which keeps stack
    ids of different splits disjoint by construction.
    """
    config.validate()
    root = np.random.SeedSequence(
        [config.seed, int.from_bytes(split.encode(), "little")]
    )
    stack_seeds = root.spawn(config.n_stacks)
    counts = largest_remainder_counts(config.label_fractions, config.slices_per_stack)

    dataset = Dataset(split=split)
    truth: dict[tuple[str, int], SliceTruth] = {}
    size = config.image_size
    for k in range(config.n_stacks):
        rng = np.random.default_rng(stack_seeds[k])
        stack_id = f"{split}-{k:04d}"
        app = _stack_appearance(rng, size)
        labels = _assign_labels(rng, counts, config.slices_per_stack)
        for idx, label in enumerate(labels):
            if label is Label.W:
                img = _render_background(rng, size, app)
                ellipse = None
                ellipse_mask = None
            else:
                img, ellipse, ellipse_mask = _render_phantom_slice(rng, size, app)
            img = _apply_bias(img, rng, size, app)
            img = img + rng.normal(0.0, config.pixel_noise, size=(size, size))
            img = np.clip(img, 0.0, 1.0)
            clean = None
            if label is Label.N and config.corruption_strength > 0.0:
                clean = _quantize(img)
                img = _corrupt(img, rng, ellipse, config.corruption_strength)
            pixels = _quantize(img)
            s = Slice(pixels=pixels, stack_id=stack_id, slice_index=idx)
            dataset.labeled.append((s, label))
            truth[(stack_id, idx)] = SliceTruth(
                label=label, ellipse=ellipse, ellipse_mask=ellipse_mask, clean=clean
            )
    return dataset, truth


def generate_synthetic(config: SynthConfig, split: str = "train") -> Dataset:
    """Generate a fully labeled synthetic dataset (see :func:`generate_with_truth`)."""
    dataset, _ = generate_with_truth(config, split=split)
    return dataset
