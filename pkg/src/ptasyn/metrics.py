"""Generative-image evaluation: feature-space Frechet distance, the
exponentiated-KL quality/diversity score, and multiscale structural
similarity.

No large pretrained classifier exists at desk scale, so the default feature
extractor is a small convolutional network trained once on a deterministic
auxiliary task over phantom data (classifying the generating ellipse count
into 8 bins) and identified by a weight hash. Absolute metric values are
therefore only comparable between runs sharing an extractor_id, which the
distance computation enforces.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d
from torch import nn

from .data import (
    RANGE_SIGNED,
    RANGE_UNIT,
    PhantomConfig,
    Slice,
    SliceDataset,
    generate_phantom_volume,
)
from .errors import CheckpointError, ConfigurationError
from .nets import (
    NetworkConfig,
    fingerprint_tensors,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .seeding import derive_rng, derive_torch_generator

MSSSIM_CANONICAL_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class FeatureSet:
    """Feature matrix [N, d] plus the identity of the network that made it."""

    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"features must be [N, d], got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")


@dataclass
class MetricReport:
    fid: float
    is_mean: float
    is_std: float
    msssim_mean: float
    msssim_std: float
    n_generated: int
    n_reference: int
    extractor_id: str
    msssim_mode: str = "diversity"   # diversity | paired

    def validate(self) -> None:
        if self.fid < -1e-6:
            raise ValueError(f"fid must be >= 0, got {self.fid}")
        if self.is_mean < 1.0 - 1e-6:
            raise ValueError(f"is_mean must be >= 1, got {self.is_mean}")
        if not (-1e-6 <= self.msssim_mean <= 1.0 + 1e-6):
            raise ValueError(f"msssim_mean must be in [0, 1], got {self.msssim_mean}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def csv_columns(cls) -> list:
        return [
            "fid", "is_mean", "is_std", "msssim_mean", "msssim_std",
            "n_generated", "n_reference", "extractor_id", "msssim_mode",
        ]

    def csv_row(self) -> list:
        return [getattr(self, c) for c in self.csv_columns()]


# ---------------------------------------------------------------------------
# Matrix square root and Frechet distance
# ---------------------------------------------------------------------------


def matrix_sqrt_psd(m: np.ndarray, sym_tol: float = 1e-6) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Negative eigenvalues (numerical noise) are clamped to zero. Raises on
    input that is asymmetric beyond sym_tol relative to max(1, |m|_inf).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()) if m.size else 1.0)
    asym = float(np.abs(m - m.T).max()) if m.size else 0.0
    if asym > sym_tol * scale:
        raise ValueError(f"matrix is asymmetric beyond tolerance: {asym:.3g}")
    sym = (m + m.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    root = (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
    return (root + root.T) / 2.0


def _mean_and_cov(features: np.ndarray):
    feats = np.asarray(features, dtype=np.float64)
    mu = feats.mean(axis=0)
    cov = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    return mu, cov


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), with
    unbiased 1/(N-1) covariances. Tiny negative results are clamped to 0.
    """
    if a.extractor_id != b.extractor_id:
        raise ValueError(
            f"feature sets come from different extractors: "
            f"{a.extractor_id[:12]} vs {b.extractor_id[:12]}"
        )
    if a.features.shape[0] < 2 or b.features.shape[0] < 2:
        raise ValueError("fid needs at least 2 samples per set")
    if a.features.shape[1] != b.features.shape[1]:
        raise ValueError("feature dimensions differ")
    mu_a, cov_a = _mean_and_cov(a.features)
    mu_b, cov_b = _mean_and_cov(b.features)
    root_a = matrix_sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2.0
    cross = matrix_sqrt_psd(inner)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    if value < -1e-6:
        raise ArithmeticError(f"fid evaluated to {value}, below the numerical tolerance")
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Inception-style score
# ---------------------------------------------------------------------------


def inception_score(probs: np.ndarray, splits: int = 4):
    """exp(mean KL(p_i || split marginal)) per split; returns (mean, std).

    Rows must be probability distributions; zero entries contribute zero to
    the KL sum, so one-hot inputs are handled exactly.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"probs must be [N, K], got shape {probs.shape}")
    if splits < 1:
        raise ValueError("splits must be >= 1")
    if probs.shape[0] < splits:
        raise ValueError(f"need at least {splits} rows for {splits} splits")
    if (probs < -1e-9).any():
        raise ValueError("probabilities must be non-negative")
    row_sums = probs.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-5:
        raise ValueError("rows must sum to 1 within 1e-5")
    scores = []
    for chunk in np.array_split(np.arange(probs.shape[0]), splits):
        p = probs[chunk]
        marginal = p.mean(axis=0)
        mask = p > 0
        log_ratio = np.zeros_like(p)
        log_ratio[mask] = np.log(p[mask]) - np.log(marginal[np.nonzero(mask)[1]])
        kl = (p * log_ratio).sum(axis=1)
        scores.append(math.exp(float(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# Multiscale structural similarity
# ---------------------------------------------------------------------------


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_terms(x: np.ndarray, y: np.ndarray, window: np.ndarray, data_range: float):
    """Mean luminance*cs and mean cs over the valid window positions."""
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = convolve2d(x, window, mode="valid")
    mu_y = convolve2d(y, window, mode="valid")
    var_x = convolve2d(x * x, window, mode="valid") - mu_x ** 2
    var_y = convolve2d(y * y, window, mode="valid") - mu_y ** 2
    cov_xy = convolve2d(x * y, window, mode="valid") - mu_x * mu_y
    cs_map = (2.0 * cov_xy + c2) / (var_x + var_y + c2)
    lum_map = (2.0 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    return float((lum_map * cs_map).mean()), float(cs_map.mean())


def _downsample2(x: np.ndarray) -> np.ndarray:
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    return x[: h2 * 2, : w2 * 2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def ms_ssim_arrays(x: np.ndarray, y: np.ndarray, data_range: float, scales: int = 3) -> float:
    """Multiscale SSIM over plain arrays with an explicit dynamic range.

    Gaussian window 11/sigma 1.5, K1=0.01, K2=0.03; contrast-structure terms
    at every scale, luminance folded in at the final scale, canonical
    exponent weights renormalized to the first `scales` entries. Negative
    per-scale terms are clamped at zero before exponentiation and the result
    is clamped to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"expected equal 2D shapes, got {x.shape} vs {y.shape}")
    if scales < 1 or scales > len(MSSSIM_CANONICAL_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(MSSSIM_CANONICAL_WEIGHTS)}")
    min_size = SSIM_WINDOW * 2 ** (scales - 1)
    if min(x.shape) < min_size:
        raise ValueError(
            f"image dims {x.shape} too small for {scales} scales "
            f"(need at least {min_size})"
        )
    weights = np.array(MSSSIM_CANONICAL_WEIGHTS[:scales], dtype=np.float64)
    weights /= weights.sum()
    window = _gaussian_window()
    terms = []
    for scale in range(scales):
        if scale > 0:
            x = _downsample2(x)
            y = _downsample2(y)
        ssim_mean, cs_mean = _ssim_terms(x, y, window, data_range)
        terms.append(ssim_mean if scale == scales - 1 else cs_mean)
    value = float(np.prod([max(t, 0.0) ** w for t, w in zip(terms, weights)]))
    return min(max(value, 0.0), 1.0)


_DATA_RANGE = {RANGE_UNIT: 1.0, RANGE_SIGNED: 2.0}


def ms_ssim(a: Slice, b: Slice, scales: int = 3) -> float:
    """Multiscale SSIM of two slices, dynamic range from the declared tags."""
    if a.intensity_range != b.intensity_range:
        raise ValueError(
            f"intensity ranges differ: {a.intensity_range} vs {b.intensity_range}"
        )
    if a.intensity_range not in _DATA_RANGE:
        raise ConfigurationError(
            "ms_ssim needs a declared unit or signed range; normalize first"
        )
    return ms_ssim_arrays(a.pixels, b.pixels, _DATA_RANGE[a.intensity_range], scales)


# ---------------------------------------------------------------------------
# Feature extractor (trained once on a deterministic auxiliary task)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExtractorConfig:
    image_size: int = 64
    feature_dim: int = 64
    num_classes: int = 8
    base_channels: int = 16
    depth: int = 3
    steps: int = 600
    batch_size: int = 32
    learning_rate: float = 1e-3
    volumes_per_class: int = 6
    slices_per_volume: int = 8
    seed: int = 101

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            base_channels=self.base_channels,
            depth=self.depth,
            embed_dim=self.feature_dim,
            norm_kind="instance",
            seed=self.seed,
        )


class FeatureExtractor(nn.Module):
    """Conv trunk + GAP features, with a classification head for the score."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        ch_in = 1
        layers = []
        for level in range(cfg.depth):
            ch_out = cfg.base_channels * min(2 ** level, 4)
            layers += [
                nn.Conv2d(ch_in, ch_out, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch_out, affine=True, track_running_stats=False),
                nn.ReLU(inplace=True),
            ]
            ch_in = ch_out
        self.trunk = nn.Sequential(*layers)
        self.project = nn.Linear(ch_in, cfg.feature_dim)
        self.classify = nn.Linear(cfg.feature_dim, cfg.num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.trunk(x).mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classify(self.features(x))

    def state_tensors(self) -> dict:
        return {name: p.detach().clone() for name, p in self.named_parameters()}

    def fingerprint(self) -> str:
        return fingerprint_tensors(self.state_tensors(), self.cfg.network_config())


def _auxiliary_batches(cfg: ExtractorConfig):
    """Phantom slices labeled by their generating ellipse count bin."""
    images = []
    labels = []
    for cls in range(cfg.num_classes):
        phantom = PhantomConfig(
            image_size=cfg.image_size,
            num_volumes=cfg.volumes_per_class,
            slices_per_volume=cfg.slices_per_volume,
            num_ellipses=(cls + 1, cls + 1),
            lesion_probability=0.2,
            seed=cfg.seed * 1000 + cls,
        )
        for v in range(cfg.volumes_per_class):
            vol = generate_phantom_volume(phantom, v)
            for s in vol.slices:
                images.append(s.pixels * 2.0 - 1.0)
                labels.append(cls)
    x = torch.from_numpy(np.stack(images).astype(np.float32)).unsqueeze(1)
    y = torch.tensor(labels, dtype=torch.long)
    return x, y


def train_feature_extractor(cfg: ExtractorConfig) -> FeatureExtractor:
    """Deterministic recipe producing the default metric extractor."""
    torch.set_num_threads(1)
    net = FeatureExtractor(cfg)
    init_parameters(net, derive_torch_generator(cfg.seed, "extractor-init"))
    x, y = _auxiliary_batches(cfg)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    criterion = nn.CrossEntropyLoss()
    rng = derive_rng(cfg.seed, "extractor-batches")
    for _ in range(cfg.steps):
        pick = rng.choice(x.shape[0], size=min(cfg.batch_size, x.shape[0]), replace=False)
        loss = criterion(net(x[pick]), y[pick])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    net.eval()
    return net


def default_extractor(cache_dir=None, cfg: ExtractorConfig = ExtractorConfig()) -> FeatureExtractor:
    """Train (or load from cache) the default extractor for this recipe."""
    if cache_dir is None:
        return train_feature_extractor(cfg)
    import hashlib

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    recipe_tag = hashlib.sha256(repr(asdict(cfg)).encode("utf-8")).hexdigest()[:16]
    path = cache_dir / f"extractor_{recipe_tag}.ckpt"
    if path.exists():
        manifest, tensors = load_checkpoint(path)
        if manifest["stage"] != "extractor":
            raise CheckpointError(f"{path} is not an extractor checkpoint")
        net = FeatureExtractor(cfg)
        params = dict(net.named_parameters())
        for name, value in tensors.items():
            if name not in params:
                raise CheckpointError(f"unknown extractor parameter {name}")
            with torch.no_grad():
                params[name].copy_(value)
        net.eval()
        return net
    net = train_feature_extractor(cfg)
    save_checkpoint(
        path, net.state_tensors(), stage="extractor",
        config=cfg.network_config(), seed=cfg.seed,
        extra={"recipe": asdict(cfg)},
    )
    return net


def _dataset_signed_tensor(ds: SliceDataset) -> torch.Tensor:
    return torch.from_numpy(ds.signed_stack()).unsqueeze(1)


def extract_features(net: FeatureExtractor, ds: SliceDataset, batch_size: int = 64) -> FeatureSet:
    """Embed every dataset slice; row i corresponds to slice i."""
    if len(ds) == 0:
        raise ValueError("cannot extract features from an empty dataset")
    tensor = _dataset_signed_tensor(ds)
    rows = []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            rows.append(net.features(tensor[start:start + batch_size]))
    feats = torch.cat(rows).numpy().astype(np.float64)
    return FeatureSet(features=feats, extractor_id=net.fingerprint())


def class_probabilities(net: FeatureExtractor, ds: SliceDataset, batch_size: int = 64) -> np.ndarray:
    tensor = _dataset_signed_tensor(ds)
    rows = []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            rows.append(torch.softmax(net(tensor[start:start + batch_size]), dim=1))
    return torch.cat(rows).numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Whole-dataset evaluation
# ---------------------------------------------------------------------------


def _paired_slices(generated: SliceDataset, reference: SliceDataset, pairing):
    pairs = []
    for entry in pairing:
        gen_key = entry["lf"]
        ref_key = entry["hf"]
        try:
            gi = generated.index_of(gen_key["volume_id"], gen_key["slice_index"])
            ri = reference.index_of(ref_key["volume_id"], ref_key["slice_index"])
        except KeyError as exc:
            raise ConfigurationError(f"pairing entry not present in datasets: {exc}")
        pairs.append((gi, ri))
    return pairs


def evaluate(
    generated: SliceDataset,
    reference: SliceDataset,
    pairing=None,
    extractor: FeatureExtractor | None = None,
    is_splits: int = 4,
    msssim_scales: int = 3,
    msssim_pairs: int = 100,
    seed: int = 0,
) -> MetricReport:
    """Full metric report for a generated set against a reference set.

    MS-SSIM follows the diversity reading when `pairing` is absent (random
    intra-generated pairs, lower = more diverse) and fidelity when present
    (generated vs reference pairs).
    """
    if (generated.height, generated.width) != (reference.height, reference.width):
        raise ValueError("generated and reference dims differ")
    if extractor is None:
        extractor = default_extractor()
    feats_gen = extract_features(extractor, generated)
    feats_ref = extract_features(extractor, reference)
    fid_value = fid(feats_gen, feats_ref)
    probs = class_probabilities(extractor, generated)
    is_mean, is_std = inception_score(probs, splits=is_splits)

    gen_signed = generated.signed_stack()
    if pairing is None:
        n = len(generated)
        if n < 2:
            raise ValueError("diversity-mode MS-SSIM needs at least 2 generated slices")
        rng = derive_rng(seed, "msssim-pairs")
        all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        if len(all_pairs) > msssim_pairs:
            chosen = rng.choice(len(all_pairs), size=msssim_pairs, replace=False)
            all_pairs = [all_pairs[int(c)] for c in chosen]
        values = [
            ms_ssim_arrays(gen_signed[i], gen_signed[j], 2.0, msssim_scales)
            for i, j in all_pairs
        ]
        mode = "diversity"
    else:
        ref_signed = reference.signed_stack()
        values = [
            ms_ssim_arrays(gen_signed[gi], ref_signed[ri], 2.0, msssim_scales)
            for gi, ri in _paired_slices(generated, reference, pairing)
        ]
        mode = "paired"

    report = MetricReport(
        fid=fid_value,
        is_mean=is_mean,
        is_std=is_std,
        msssim_mean=float(np.mean(values)),
        msssim_std=float(np.std(values)),
        n_generated=len(generated),
        n_reference=len(reference),
        extractor_id=feats_gen.extractor_id,
        msssim_mode=mode,
    )
    report.validate()
    return report
