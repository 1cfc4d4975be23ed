"""Training-free pose classifier on a synthetic glyph corpus.

Four pose categories: ``front`` / ``back`` share a silhouette and differ in
interior texture (stripes vs. dots); ``left`` / ``right`` are exact mirror
images of an asymmetric arrow.  Every glyph carries a left-to-right
intensity ramp so that patch features encode horizontal position, which is
what the patch-matching orientation score keys on.

The classifier combines a cosine texture similarity of global features with
a patch-matching orientation similarity, multiplies them after min-max
normalisation (an and-gate: a category wins only if both families agree),
and sharpens with a low-temperature softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SegmentationError
from .estimator import tweedie_x0

IMG_SIZE = 64
GRID_SIZE = 16
PATCH = IMG_SIZE // GRID_SIZE
NUM_FEATURES = 4
CATEGORIES = ("front", "back", "left", "right")

# Expected-foreground descriptor: glyph patches carry gradient energy and
# variance, flat background carries none.  Deliberately ignores the mean
# channel so contrast inversion does not flip the segmentation sign.
DEFAULT_FOREGROUND_HINT = np.array([0.0, 1.0, 1.0, 1.0]) / np.sqrt(3.0)


@dataclass(frozen=True)
class GlyphImage:
    pixels: np.ndarray                 # (64, 64) in [0, 1]
    true_category: str | None = None


@dataclass(frozen=True)
class FeatureMap:
    cls: np.ndarray                    # (NUM_FEATURES,)
    patches: np.ndarray                # (GRID_SIZE, GRID_SIZE, NUM_FEATURES)


@dataclass(frozen=True)
class Template:
    category: str
    features: FeatureMap
    mask: np.ndarray                   # (GRID_SIZE, GRID_SIZE) bool
    coord: np.ndarray                  # (GRID_SIZE, GRID_SIZE), NaN off-foreground


@dataclass(frozen=True)
class PoseClassifier:
    templates: tuple[Template, ...]
    tau_pat: float = 0.01
    tau_pose: float = 0.05

    def __post_init__(self):
        if self.tau_pat <= 0 or self.tau_pose <= 0:
            raise ValueError("temperatures must be positive")
        cats = [t.category for t in self.templates]
        if len(set(cats)) != len(cats):
            raise ValueError("one template per category required")

    @classmethod
    def from_images(cls, images: dict[str, GlyphImage], tau_pat: float = 0.01, tau_pose: float = 0.05) -> "PoseClassifier":
        templates = tuple(build_template(img, cat) for cat, img in images.items())
        return cls(templates=templates, tau_pat=tau_pat, tau_pose=tau_pose)

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(t.category for t in self.templates)


# ---------------------------------------------------------------------------
# Glyph corpus
# ---------------------------------------------------------------------------

def _ramp(col: np.ndarray, lo_col: float, hi_col: float) -> np.ndarray:
    frac = np.clip((col - lo_col) / max(hi_col - lo_col, 1.0), 0.0, 1.0)
    return 0.35 + 0.6 * frac


def _arrow_right() -> np.ndarray:
    """Right-pointing arrow with a long shaft and a large triangular head."""
    rows, cols = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE]
    shaft = (rows >= 22) & (rows <= 42) & (cols >= 4) & (cols <= 38)
    half = np.round(16.0 * (58 - cols) / 20.0)
    head = (cols >= 38) & (cols <= 58) & (np.abs(rows - 32) <= half)
    mask = shaft | head
    img = np.zeros((IMG_SIZE, IMG_SIZE))
    img[mask] = _ramp(cols, 4, 58)[mask]
    return img


def _oval_mask() -> np.ndarray:
    rows, cols = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE]
    return ((cols - 32.0) / 18.0) ** 2 + ((rows - 32.0) / 26.0) ** 2 <= 1.0


def _front_pattern() -> np.ndarray:
    """Vertical stripes modulated by the horizontal ramp."""
    rows, cols = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE]
    mask = _oval_mask()
    stripes = np.where((cols // 3) % 2 == 0, 1.0, 0.45)
    img = np.zeros((IMG_SIZE, IMG_SIZE))
    img[mask] = (_ramp(cols, 14, 50) * stripes)[mask]
    return img


def _back_pattern() -> np.ndarray:
    """Dot lattice modulated by the same horizontal ramp."""
    rows, cols = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE]
    mask = _oval_mask()
    # dot base level chosen so front/back share mean intensity
    # (0.25 * 1.0 + 0.75 * base = 0.725, the stripe average): patch matching
    # then aligns on position, leaving texture to the cls channel
    dots = np.where((rows % 6 < 3) & (cols % 6 < 3), 1.0, 0.475 / 0.75)
    img = np.zeros((IMG_SIZE, IMG_SIZE))
    img[mask] = (_ramp(cols, 14, 50) * dots)[mask]
    return img


def _jitter(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(-3, 4, size=2)
    out = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
    fg = out > 0
    noise = rng.normal(1.0, 0.05, size=out.shape)
    out = np.where(fg, np.clip(out * noise, 0.05, 1.0), 0.0)
    return out


def generate_glyph(category: str, jitter_seed: int | None = None) -> GlyphImage:
    """Deterministic glyph for one pose category; None seed means no jitter.

    Left/right glyphs with the same seed are exact horizontal mirrors;
    front/back glyphs with the same seed share their binary silhouette.
    """
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if category in ("left", "right"):
        img = _arrow_right()
    elif category == "front":
        img = _front_pattern()
    else:
        img = _back_pattern()
    if jitter_seed is not None:
        img = _jitter(img, np.random.default_rng(jitter_seed))
    if category == "left":
        img = img[:, ::-1]
    return GlyphImage(pixels=np.clip(img, 0.0, 1.0), true_category=category)


def glyph_silhouette(img: GlyphImage) -> np.ndarray:
    """Binary foreground of a generated glyph (background is exactly zero)."""
    return img.pixels > 0


def generate_corpus(per_category: int, seed: int = 0) -> list[GlyphImage]:
    """Labelled jittered glyphs, per_category of each pose."""
    corpus = []
    for ci, cat in enumerate(CATEGORIES):
        for j in range(per_category):
            corpus.append(generate_glyph(cat, jitter_seed=seed + 10_000 * ci + j))
    return corpus


def template_images() -> dict[str, GlyphImage]:
    """Canonical (unjittered) glyph per category, used as templates."""
    return {cat: generate_glyph(cat, jitter_seed=None) for cat in CATEGORIES}


# ---------------------------------------------------------------------------
# Features, segmentation, coordinates
# ---------------------------------------------------------------------------

def extract_features(img: GlyphImage) -> FeatureMap:
    """Per-patch descriptors plus an intensity-weighted global descriptor.

    Channels: mean intensity, horizontal gradient energy, vertical gradient
    energy, variance.  All four are invariant to mirroring a patch, so the
    patch grid of a mirrored image is the column-reversed grid.
    """
    px = img.pixels
    if px.shape != (IMG_SIZE, IMG_SIZE):
        raise ValueError(f"expected {IMG_SIZE}x{IMG_SIZE} image, got {px.shape}")
    blocks = px.reshape(GRID_SIZE, PATCH, GRID_SIZE, PATCH).transpose(0, 2, 1, 3)
    mean = blocks.mean(axis=(2, 3))
    hgrad = np.abs(np.diff(blocks, axis=3)).mean(axis=(2, 3))
    vgrad = np.abs(np.diff(blocks, axis=2)).mean(axis=(2, 3))
    var = blocks.var(axis=(2, 3))
    patches = np.stack([mean, hgrad, vgrad, var], axis=-1)
    weights = mean
    total = weights.sum()
    if total <= 0:
        cls_vec = np.zeros(NUM_FEATURES)
    else:
        cls_vec = np.tensordot(weights, patches, axes=([0, 1], [0, 1])) / total
    return FeatureMap(cls=cls_vec, patches=patches)


def segment_foreground(fm: FeatureMap, reference_hint: np.ndarray | None = None) -> np.ndarray:
    """First-principal-component split of the patch grid.

    The component's sign is arbitrary, so the foreground side is the one
    whose average descriptor correlates better with the reference hint.
    """
    hint = DEFAULT_FOREGROUND_HINT if reference_hint is None else np.asarray(reference_hint, dtype=float)
    flat = fm.patches.reshape(-1, NUM_FEATURES)
    centered = flat - flat.mean(axis=0)
    if np.sum(centered**2) < 1e-18:
        raise SegmentationError("degenerate feature grid: all patch descriptors equal")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    scores = centered @ vt[0]
    side = scores > 0
    pos_corr = flat[side].mean(axis=0) @ hint if np.any(side) else -np.inf
    neg_corr = flat[~side].mean(axis=0) @ hint if np.any(~side) else -np.inf
    mask = side if pos_corr >= neg_corr else ~side
    if not np.any(mask):
        raise SegmentationError("segmentation produced an empty foreground")
    return mask.reshape(GRID_SIZE, GRID_SIZE)


def coordinate_map(mask: np.ndarray) -> np.ndarray:
    """Horizontal coordinates on the foreground: leftmost column -0.5,
    rightmost +0.5, linear in between; NaN off the foreground."""
    mask = np.asarray(mask, dtype=bool)
    cols = np.flatnonzero(mask.any(axis=0))
    if cols.size == 0:
        raise ValueError("coordinate_map needs a nonempty mask")
    lo, hi = cols[0], cols[-1]
    coord = np.full(mask.shape, np.nan)
    col_idx = np.arange(mask.shape[1], dtype=float)
    values = np.zeros(mask.shape[1]) if hi == lo else (col_idx - lo) / (hi - lo) - 0.5
    coord[mask] = np.broadcast_to(values, mask.shape)[mask]
    return coord


# ---------------------------------------------------------------------------
# Similarities and classification
# ---------------------------------------------------------------------------

def texture_similarity(input_cls: np.ndarray, template_cls: np.ndarray) -> float:
    """Cosine similarity of global descriptors."""
    a = np.asarray(input_cls, dtype=float)
    b = np.asarray(template_cls, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("texture similarity undefined for a zero descriptor")
    return float(a @ b / (na * nb))


def orientation_similarity(input_parts, template: Template, tau_pat: float = 0.01) -> float:
    """Patch-matching orientation score.

    Each foreground input patch is soft-matched (softmax over template
    patches, concentrated on the nearest descriptor) and charged the
    horizontal-coordinate discrepancy of its match.
    """
    patches, mask, coord = input_parts
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask) or not np.any(template.mask):
        raise ValueError("orientation similarity needs nonempty foregrounds")
    f_in = patches[mask]
    m_in = coord[mask]
    f_tm = template.features.patches[template.mask]
    m_tm = template.coord[template.mask]
    dist = np.sqrt(np.sum((f_in[:, None, :] - f_tm[None, :, :]) ** 2, axis=-1))
    logits = -dist / tau_pat
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    penalty = np.sum(w * np.abs(m_in[:, None] - m_tm[None, :])) / (f_in.shape[0] * f_tm.shape[0])
    return float(np.clip(1.0 - penalty, 0.0, 1.0))


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-12:
        return np.ones_like(values)
    return (values - lo) / (hi - lo)


def _softmax(values: np.ndarray, tau: float) -> np.ndarray:
    z = values / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def classify(pc: PoseClassifier, img: GlyphImage, mode: str = "full") -> np.ndarray:
    """Pose probabilities in template order.

    ``mode`` selects the and-gate inputs: "full", "orientation-only", or
    "texture-only" (the two degraded variants drop one similarity family).
    """
    if mode not in ("full", "orientation-only", "texture-only"):
        raise ValueError(f"unknown mode {mode!r}")
    fm = extract_features(img)
    mask = segment_foreground(fm)
    coord = coordinate_map(mask)
    s_tex = np.array([texture_similarity(fm.cls, t.features.cls) for t in pc.templates])
    s_ori = np.array([orientation_similarity((fm.patches, mask, coord), t, pc.tau_pat) for t in pc.templates])
    if mode == "texture-only":
        fused = _minmax(s_tex)
    elif mode == "orientation-only":
        fused = _minmax(s_ori)
    else:
        fused = _minmax(s_tex) * _minmax(s_ori)
    return _softmax(fused, pc.tau_pose)


def build_template(img: GlyphImage, category: str, reference_hint: np.ndarray | None = None) -> Template:
    fm = extract_features(img)
    mask = segment_foreground(fm, reference_hint)
    return Template(category=category, features=fm, mask=mask, coord=coordinate_map(mask))


# ---------------------------------------------------------------------------
# Noisy-image adapter
# ---------------------------------------------------------------------------

class CorpusDenoiser:
    """Empirical-Bayes noise predictor over a reference image stack.

    Models the clean distribution as a Gaussian kernel density centered on
    the stack and returns the posterior *mode* component's shrinkage
    estimate.  The mode (rather than the posterior mean) keeps the clean
    estimate on the data manifold, which the downstream classifier needs:
    averaging across the stack would blur every pose into one blob.

    At low noise the shrinkage factor is near 1, so the input passes
    through almost unchanged; at high noise the estimate collapses to a
    stack image, so classifications on pure noise spread across poses.
    """

    def __init__(self, images, kernel_width: float = 0.25):
        self.data = np.stack([im.pixels.ravel() for im in images])
        self.kernel_width = float(kernel_width)

    def __call__(self, xt: np.ndarray, t: int, schedule) -> np.ndarray:
        a, s = schedule.alpha[t], schedule.sigma[t]
        tau2 = self.kernel_width**2
        var = a * a * tau2 + s * s
        log_w = -0.5 * np.sum((xt[None, :] - a * self.data) ** 2, axis=1) / var
        mode = self.data[int(np.argmax(log_w))]
        x0_hat = mode + (a * tau2 / var) * (xt - a * mode)
        return (xt - a * x0_hat) / s


def classifier_posterior_adapter(pc: PoseClassifier, schedule, denoiser, t: int, xt: np.ndarray,
                                 use_tweedie: bool = True) -> np.ndarray:
    """Pose posterior for a noisy flattened glyph.

    Default path denoises to a clean estimate first; ``use_tweedie=False``
    classifies the noisy image directly (the degraded variant).
    """
    if t < 1:
        raise ValueError("adapter needs t >= 1")
    xt = np.asarray(xt, dtype=float)
    if use_tweedie:
        x0 = tweedie_x0(schedule, t, xt, denoiser(xt, t, schedule))
    else:
        x0 = xt
    img = GlyphImage(pixels=np.clip(x0.reshape(IMG_SIZE, IMG_SIZE), 0.0, 1.0))
    return classify(pc, img)


# ---------------------------------------------------------------------------
# PGM round-trip
# ---------------------------------------------------------------------------

def write_pgm(path, pixels: np.ndarray) -> None:
    """Binary 8-bit portable graymap."""
    data = np.clip(np.asarray(pixels) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM file: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(float) / maxval
