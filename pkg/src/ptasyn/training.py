"""Three-stage training pipeline plus slice matching and synthesis.

Stage 1 pretrains the slice encoder with the contrastive matching loss,
stage 2 pretrains the pretext reconstruction network on corrupted real HF
slices, and stage 3 runs cycle-consistent adversarial training guided by
the frozen pretext networks. Every stage is bit-reproducible from
(config, seed) on a fixed platform: all randomness flows through derived
RNGs and no global RNG state is touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import corruption
from .data import SliceDataset
from .errors import ConfigurationError
from .losses import (
    LossReport,
    LossWeights,
    info_nce,
    adversarial_losses,
    cycle_loss,
    lsc_loss,
    pairwise_cosine,
    sgp_contrastive_loss,
    synthesis_quality_loss,
    total_loss,
)
from .nets import (
    NetworkBundle,
    NetworkConfig,
    save_checkpoint,
)
from .seeding import derive_rng, stable_int

STAGES = ("sgp", "lsc", "pta")

# warm numpy's float introspection caches before any flush-denormal call so
# the CPU flag cannot distort them later
_ = np.finfo(np.float32), np.finfo(np.float64)


def _configure_torch() -> None:
    """Single-threaded, denormal-flushing torch setup for the training loops.

    The desk-scale convolutions here are faster on one thread than with
    intra-op parallelism, and a fixed thread count keeps reruns bit-identical.
    """
    torch.set_num_threads(1)
    torch.set_flush_denormal(True)


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    iterations: int
    batch_size: int
    learning_rate: float = 2e-4
    optimizer: str = "adaptive_moments"   # adaptive_moments | sgd_momentum
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 0.2
    block_size: int = 8
    rotate_fraction: float = 0.15
    mask_fraction: float = 0.15
    fill_value: float = 0.0
    use_sgp: bool = True
    use_lsc: bool = True
    checkpoint_every: int = 500
    sgp_context_slices: int = 1
    sgp_symmetric: bool = False
    d_updates: int = 1
    match_assignment: str = "argmax"      # argmax | hungarian

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigurationError(f"train.stage must be one of {STAGES}")
        if self.iterations < 0:
            raise ConfigurationError("train.iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("train.learning_rate must be > 0")
        if self.optimizer not in ("adaptive_moments", "sgd_momentum"):
            raise ConfigurationError(
                "train.optimizer must be 'adaptive_moments' or 'sgd_momentum'"
            )
        if self.tau <= 0:
            raise ConfigurationError("train.tau must be > 0")
        if self.rotate_fraction < 0 or self.mask_fraction < 0:
            raise ConfigurationError("train corruption fractions must be >= 0")
        if self.rotate_fraction + self.mask_fraction > 1:
            raise ConfigurationError("train corruption fractions must sum to <= 1")
        if self.checkpoint_every < 1:
            raise ConfigurationError("train.checkpoint_every must be >= 1")
        if self.sgp_context_slices < 1 or self.sgp_context_slices % 2 == 0:
            raise ConfigurationError("train.sgp_context_slices must be a positive odd integer")
        if self.d_updates < 1:
            raise ConfigurationError("train.d_updates must be >= 1")
        if self.match_assignment not in ("argmax", "hungarian"):
            raise ConfigurationError("train.match_assignment must be 'argmax' or 'hungarian'")
        self.weights.validate()


@dataclass
class MatchAssignment:
    """Row-wise slice matching result; pairs[i] = (lf_index, hf_index)."""

    pairs: list
    scores: np.ndarray


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adaptive_moments":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.5, 0.999))
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)


def _signed_tensor(ds: SliceDataset) -> torch.Tensor:
    """Dataset pixels as a [N, 1, H, W] float32 tensor in the signed range."""
    return torch.from_numpy(ds.signed_stack()).unsqueeze(1)


def _context_tensor(ds: SliceDataset, context: int) -> torch.Tensor:
    """[N, context, H, W] tensor stacking each slice with its in-volume
    neighbours (clamped at volume edges) as channels."""
    stack = torch.from_numpy(ds.signed_stack())
    if context == 1:
        return stack.unsqueeze(1)
    by_volume = {}
    for i, (vid, idx) in enumerate(ds.keys()):
        by_volume.setdefault(vid, {})[idx] = i
    half = context // 2
    rows = []
    for vid, idx in ds.keys():
        vol = by_volume[vid]
        lo, hi = min(vol), max(vol)
        channels = [
            stack[vol[min(max(idx + off, lo), hi)]]
            for off in range(-half, half + 1)
        ]
        rows.append(torch.stack(channels))
    return torch.stack(rows)


# ---------------------------------------------------------------------------
# Stage 1: contrastive slice-gap pretraining
# ---------------------------------------------------------------------------


def pretrain_sgp(
    lf: SliceDataset,
    hf: SliceDataset,
    cfg: TrainConfig,
    network_config: NetworkConfig,
):
    """Train the slice encoder so same-position (LF, HF) slices embed together.

    Positives are slices sharing (volume_id, slice_index); the rest of the
    shuffled batch provides negatives. Returns (encoder, loss history).
    """
    cfg.validate()
    _configure_torch()
    lf_keys = set(lf.keys())
    hf_keys = set(hf.keys())
    common = sorted(lf_keys & hf_keys)
    if not common:
        raise ConfigurationError("LF and HF datasets share no (volume_id, slice_index) keys")
    if cfg.batch_size > len(common):
        raise ConfigurationError(
            f"batch_size {cfg.batch_size} exceeds paired dataset size {len(common)}"
        )

    lf_tensor = _context_tensor(lf, cfg.sgp_context_slices)
    hf_tensor = _context_tensor(hf, cfg.sgp_context_slices)
    lf_index = {key: i for i, key in enumerate(lf.keys())}
    hf_index = {key: i for i, key in enumerate(hf.keys())}
    lf_rows = np.array([lf_index[k] for k in common])
    hf_rows = np.array([hf_index[k] for k in common])

    bundle = NetworkBundle(network_config, encoder_in_channels=cfg.sgp_context_slices)
    encoder = bundle.encoder
    optimizer = _make_optimizer(encoder.parameters(), cfg)
    rng = derive_rng(cfg.seed, "sgp-batches")

    history = []
    for step in range(cfg.iterations):
        pick = rng.choice(len(common), size=cfg.batch_size, replace=False)
        emb_lf = encoder(lf_tensor[lf_rows[pick]])
        emb_hf = encoder(hf_tensor[hf_rows[pick]])
        loss = sgp_contrastive_loss(emb_lf, emb_hf, cfg.tau, symmetric=cfg.sgp_symmetric)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        if not np.isfinite(value):
            raise ArithmeticError(f"SGP loss non-finite at step {step}: {value}")
        history.append(value)
    return encoder, history


def match_slices(encoder, lf_batch: torch.Tensor, hf_batch: torch.Tensor,
                 assignment: str = "argmax") -> MatchAssignment:
    """Match each LF slice to its most similar HF slice within the batch.

    Default rule is greedy row-wise argmax with ties broken by the lowest
    HF index; "hungarian" solves the optimal one-to-one assignment instead.
    """
    if lf_batch.shape[0] != hf_batch.shape[0]:
        raise ValueError(
            f"batch size mismatch: {lf_batch.shape[0]} LF vs {hf_batch.shape[0]} HF"
        )
    with torch.no_grad():
        emb_lf = encoder(lf_batch)
        emb_hf = encoder(hf_batch)
        scores = pairwise_cosine(emb_lf, emb_hf).numpy()
    if assignment == "hungarian":
        from scipy.optimize import linear_sum_assignment

        rows, cols = linear_sum_assignment(-scores)
        pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    else:
        # np.argmax returns the first maximum, i.e. the lowest hf_index on ties
        pairs = [(i, int(np.argmax(scores[i]))) for i in range(scores.shape[0])]
    return MatchAssignment(pairs=pairs, scores=scores)


def matching_accuracy(encoder, lf_batch, hf_batch, true_cols) -> float:
    """Fraction of LF slices whose matched HF index equals true_cols[i]."""
    match = match_slices(encoder, lf_batch, hf_batch)
    hits = sum(1 for i, j in match.pairs if j == true_cols[i])
    return hits / len(match.pairs)


# ---------------------------------------------------------------------------
# Stage 2: local-structure pretext pretraining
# ---------------------------------------------------------------------------


def pretrain_lsc(
    hf: SliceDataset,
    cfg: TrainConfig,
    network_config: NetworkConfig,
):
    """Train the pretext network to restore block-corrupted HF slices.

    Corruption is re-sampled every step from a per-(step, item) derived
    seed. Returns (pretext network, loss history).
    """
    cfg.validate()
    _configure_torch()
    if cfg.batch_size > len(hf):
        raise ConfigurationError(
            f"batch_size {cfg.batch_size} exceeds dataset size {len(hf)}"
        )
    tensor = _signed_tensor(hf)
    grid = corruption.grid_for(hf.height, hf.width, cfg.block_size)

    bundle = NetworkBundle(network_config)
    pretext = bundle.pretext
    optimizer = _make_optimizer(pretext.parameters(), cfg)
    rng = derive_rng(cfg.seed, "lsc-batches")

    history = []
    for step in range(cfg.iterations):
        pick = rng.choice(len(hf), size=cfg.batch_size, replace=False)
        originals = tensor[pick]
        corrupted = torch.stack([
            corruption.apply_record_torch(
                originals[i],
                corruption.sample_record(
                    grid,
                    cfg.rotate_fraction,
                    cfg.mask_fraction,
                    cfg.fill_value,
                    stable_int(cfg.seed, "lsc-corrupt", step, i),
                ),
            )
            for i in range(cfg.batch_size)
        ])
        loss = lsc_loss(originals, pretext(corrupted))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        if not np.isfinite(value):
            raise ArithmeticError(f"LSC loss non-finite at step {step}: {value}")
        history.append(value)
    return pretext, history


# ---------------------------------------------------------------------------
# Stage 3: cycle-adversarial training guided by the pretext networks
# ---------------------------------------------------------------------------


def train_pta(
    lf: SliceDataset,
    hf: SliceDataset,
    encoder_state: dict | None,
    pretext_state: dict | None,
    cfg: TrainConfig,
    network_config: NetworkConfig,
    checkpoint_dir=None,
    generator_override=None,
):
    """Cycle-consistent adversarial training of both generators.

    Per step: sample an LF batch and an independently shuffled HF batch;
    with use_sgp the HF batch is reordered (greedy argmax, duplicates
    allowed) so slice positions correspond before serving as the
    discriminator's real set; the generator update minimizes the weighted
    sum of the pretext synthesis-quality term (use_lsc), both cycle terms,
    and both adversarial generator terms; discriminators then update 1:1.
    Pretrained encoder and pretext weights stay frozen. Pixel pairing
    between the datasets is never consulted.

    generator_override is a test-only hook replacing both generators.
    Returns (bundle, reports).
    """
    cfg.validate()
    _configure_torch()
    if cfg.use_sgp and encoder_state is None:
        raise ConfigurationError("use_sgp requires a pretrained encoder checkpoint")
    if cfg.use_lsc and pretext_state is None:
        raise ConfigurationError("use_lsc requires a pretrained pretext checkpoint")
    if cfg.batch_size > len(lf) or cfg.batch_size > len(hf):
        raise ConfigurationError("batch_size exceeds dataset size")

    lf_tensor = _signed_tensor(lf)
    hf_tensor = _signed_tensor(hf)
    grid = corruption.grid_for(hf.height, hf.width, cfg.block_size)
    del grid  # dims validated; records are sampled inside the loss

    bundle = NetworkBundle(network_config)
    if encoder_state is not None:
        bundle.load_state_tensors(encoder_state)
    if pretext_state is not None:
        bundle.load_state_tensors(pretext_state)
    for module in (bundle.encoder, bundle.pretext):
        for param in module.parameters():
            param.requires_grad_(False)
    if generator_override is not None:
        bundle.generator_lf2hf = generator_override()
        bundle.generator_hf2lf = generator_override()

    g_params = list(bundle.generator_lf2hf.parameters()) + list(
        bundle.generator_hf2lf.parameters()
    )
    d_params = list(bundle.discriminator_hf.parameters()) + list(
        bundle.discriminator_lf.parameters()
    )
    g_opt = _make_optimizer(g_params, cfg)
    d_opt = _make_optimizer(d_params, cfg)
    rng = derive_rng(cfg.seed, "pta-batches")
    w = cfg.weights

    reports = []
    for step in range(cfg.iterations):
        lf_pick = rng.choice(len(lf), size=cfg.batch_size, replace=False)
        hf_pick = rng.choice(len(hf), size=cfg.batch_size, replace=False)
        lf_batch = lf_tensor[lf_pick]
        hf_batch = hf_tensor[hf_pick]

        sgp_value = 0.0
        if cfg.use_sgp:
            match = match_slices(
                bundle.encoder, lf_batch, hf_batch, assignment=cfg.match_assignment
            )
            order = [j for _, j in match.pairs]
            hf_batch = hf_batch[order]
            # diagnostic contrastive value over the matched batch, from the
            # similarity matrix match_slices already computed
            matched_scores = torch.from_numpy(match.scores[:, order]).float()
            sgp_value = float(info_nce(matched_scores, cfg.tau))

        # generator update
        fake_hf = bundle.generator_lf2hf(lf_batch)
        rec_lf = bundle.generator_hf2lf(fake_hf)
        fake_lf = bundle.generator_hf2lf(hf_batch)
        rec_hf = bundle.generator_lf2hf(fake_lf)
        cyc = cycle_loss(lf_batch, rec_lf) + cycle_loss(hf_batch, rec_hf)
        with torch.no_grad():
            d_real_hf = bundle.discriminator_hf(hf_batch)
            d_real_lf = bundle.discriminator_lf(lf_batch)
        _, adv_g_hf = adversarial_losses(d_real_hf, bundle.discriminator_hf(fake_hf))
        _, adv_g_lf = adversarial_losses(d_real_lf, bundle.discriminator_lf(fake_lf))
        adv_g = adv_g_hf + adv_g_lf
        if cfg.use_lsc:
            syn = synthesis_quality_loss(
                fake_hf,
                bundle.pretext,
                cfg.block_size,
                cfg.rotate_fraction,
                cfg.mask_fraction,
                cfg.fill_value,
                stable_int(cfg.seed, "pta-corrupt", step),
            )
        else:
            syn = torch.zeros(())
        g_total = total_loss(syn, cyc, adv_g, w)
        g_opt.zero_grad()
        g_total.backward()
        g_opt.step()

        # discriminator update
        fake_hf_d = fake_hf.detach()
        fake_lf_d = fake_lf.detach()
        d_value = 0.0
        for _ in range(cfg.d_updates):
            d_hf_loss, _ = adversarial_losses(
                bundle.discriminator_hf(hf_batch), bundle.discriminator_hf(fake_hf_d)
            )
            d_lf_loss, _ = adversarial_losses(
                bundle.discriminator_lf(lf_batch), bundle.discriminator_lf(fake_lf_d)
            )
            d_loss = d_hf_loss + d_lf_loss
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
            d_value = float(d_loss.detach())

        report = LossReport(
            iteration=step,
            sgp=sgp_value,
            lsc=0.0,
            syn=float(syn.detach()),
            cycle=float(cyc.detach()),
            adv_g=float(adv_g.detach()),
            adv_d=d_value,
            total=float(g_total.detach()),
            lambda1=w.lambda1,
            lambda2=w.lambda2,
            lambda3=w.lambda3,
        )
        try:
            report.validate_finite()
        except ArithmeticError as exc:
            raise ArithmeticError(
                f"training aborted at step {step}: {exc}; last report {report}"
            ) from exc
        reports.append(report)

        if checkpoint_dir is not None and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(
                f"{checkpoint_dir}/pta_step{step + 1:06d}.ckpt",
                bundle.state_tensors(
                    components=(
                        "generator_lf2hf",
                        "generator_hf2lf",
                        "discriminator_hf",
                        "discriminator_lf",
                    )
                ),
                stage="pta",
                config=network_config,
                seed=cfg.seed,
                extra={"step": step + 1, "image_size": hf.height},
            )
    return bundle, reports


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def synthesize(generator, lf: SliceDataset, provenance: dict | None = None,
               batch_size: int = 16) -> SliceDataset:
    """Map every LF slice through the generator; outputs are signed-range."""
    tensor = _signed_tensor(lf)
    outputs = []
    with torch.no_grad():
        for start in range(0, len(lf), batch_size):
            outputs.append(generator(tensor[start:start + batch_size]))
    arr = torch.cat(outputs).squeeze(1).numpy().astype(np.float32)
    from .data import RANGE_SIGNED, make_slice

    slices = [
        make_slice(arr[i], RANGE_SIGNED, s.contrast_tag, s.volume_id, s.slice_index)
        for i, s in enumerate(lf.slices)
    ]
    return SliceDataset(
        slices=slices,
        field_strength="HF",
        normalization=RANGE_SIGNED,
        contrast=lf.contrast,
        seed=lf.seed,
        provenance=provenance,
    )
