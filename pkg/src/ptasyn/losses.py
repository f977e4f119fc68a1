"""Training losses: temperature-scaled contrastive slice matching, pretext
reconstruction error, cycle consistency, least-squares adversarial terms,
and their weighted combination.

All reductions are means so the combination weights stay batch-size
independent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import torch

from . import corruption
from .errors import ConfigurationError
from .seeding import stable_int

EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Weights for the combined generator objective (defaults 0.5/0.2/0.3)."""

    lambda1: float = 0.5   # pretext synthesis-quality term
    lambda2: float = 0.2   # cycle consistency
    lambda3: float = 0.3   # adversarial term

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss_weights.{name} must be >= 0")


@dataclass
class LossReport:
    """Per-iteration loss values; serialized as one CSV row."""

    iteration: int
    sgp: float
    lsc: float
    syn: float
    cycle: float
    adv_g: float
    adv_d: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, name) for name in self.columns()]

    def validate_finite(self) -> None:
        for name in self.columns():
            value = getattr(self, name)
            if not torch.isfinite(torch.as_tensor(float(value))):
                raise ArithmeticError(f"loss report field {name} is non-finite: {value}")


def write_loss_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LossReport.columns())
        for report in reports:
            writer.writerow(report.row())


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """a.b / (|a||b| + 1e-8) for two vectors."""
    if a.shape != b.shape or a.dim() != 1:
        raise ValueError(f"cosine_similarity expects equal-shape vectors, got {a.shape} vs {b.shape}")
    return (a * b).sum() / (a.norm() * b.norm() + EPS)


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """[N, d] x [M, d] -> [N, M] matrix of cosine similarities."""
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"expected [N, d] and [M, d], got {tuple(a.shape)} and {tuple(b.shape)}")
    norms_a = a.norm(dim=1, keepdim=True)
    norms_b = b.norm(dim=1, keepdim=True)
    return (a @ b.T) / (norms_a * norms_b.T + EPS)


def info_nce(scores: torch.Tensor, tau: float) -> torch.Tensor:
    """-mean_i log softmax over row i, positive on the diagonal.

    Stabilized by subtracting the row max before exponentiation.
    """
    scaled = scores / tau
    row_max = scaled.max(dim=1, keepdim=True).values
    log_denom = row_max.squeeze(1) + torch.log(
        torch.exp(scaled - row_max).sum(dim=1)
    )
    positive = scaled.diagonal()
    return (log_denom - positive).mean()


def sgp_contrastive_loss(
    emb_lf: torch.Tensor,
    emb_hf: torch.Tensor,
    tau: float,
    symmetric: bool = False,
) -> torch.Tensor:
    """Contrastive slice-matching loss; row i of emb_hf is the positive for
    row i of emb_lf, the other rows are negatives.

    With ``symmetric`` the reverse direction is averaged in.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if emb_lf.shape != emb_hf.shape or emb_lf.dim() != 2:
        raise ValueError(
            f"embedding batches must share [N, d] shape, got {tuple(emb_lf.shape)} "
            f"vs {tuple(emb_hf.shape)}"
        )
    if emb_lf.shape[0] < 1:
        raise ValueError("need at least one embedding pair")
    scores = pairwise_cosine(emb_lf, emb_hf)
    loss = info_nce(scores, tau)
    if symmetric:
        loss = 0.5 * (loss + info_nce(scores.T, tau))
    return loss


def lsc_loss(target: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error."""
    if target.shape != reconstruction.shape:
        raise ValueError(
            f"shape mismatch {tuple(target.shape)} vs {tuple(reconstruction.shape)}"
        )
    return ((target - reconstruction) ** 2).mean()


def cycle_loss(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error (symmetric in its arguments)."""
    if x.shape != x_reconstructed.shape:
        raise ValueError(
            f"shape mismatch {tuple(x.shape)} vs {tuple(x_reconstructed.shape)}"
        )
    return (x - x_reconstructed).abs().mean()


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Least-squares adversarial pair (discriminator loss, generator loss).

    loss_d = 0.5 mean((d_real - 1)^2) + 0.5 mean(d_fake^2)
    loss_g = mean((d_fake - 1)^2)

    For the generator update, d_fake must be scores of fakes still attached
    to the generator graph.
    """
    loss_d = 0.5 * ((d_real - 1.0) ** 2).mean() + 0.5 * (d_fake ** 2).mean()
    loss_g = ((d_fake - 1.0) ** 2).mean()
    return loss_d, loss_g


def total_loss(l_syn, l_cycle, l_adv_g, w: LossWeights):
    """Weighted generator objective."""
    return w.lambda1 * l_syn + w.lambda2 * l_cycle + w.lambda3 * l_adv_g


def synthesis_quality_loss(
    y_syn: torch.Tensor,
    pretext_net,
    block_size: int,
    rotate_fraction: float,
    mask_fraction: float,
    fill: float,
    seed: int,
) -> torch.Tensor:
    """Pretext residual of synthesized images, used as the synthesis-quality
    term in the combined objective.

    Each batch item gets its own corruption record derived from (seed, item);
    the pretext network is expected to be frozen, so gradients reach the
    generator through both the target and the corrupted input. This
    interpretation of the synthesis term is isolated here so it can be
    swapped wholesale.
    """
    if y_syn.dim() != 4:
        raise ValueError(f"expected [N, 1, H, W], got {tuple(y_syn.shape)}")
    grid = corruption.grid_for(y_syn.shape[-2], y_syn.shape[-1], block_size)
    corrupted = []
    for i in range(y_syn.shape[0]):
        record = corruption.sample_record(
            grid, rotate_fraction, mask_fraction, fill, stable_int(seed, "syn", i)
        )
        corrupted.append(corruption.apply_record_torch(y_syn[i], record))
    reconstruction = pretext_net(torch.stack(corrupted))
    return lsc_loss(y_syn, reconstruction)
