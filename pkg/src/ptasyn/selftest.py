"""Built-in oracle suite.

Every check compares the production implementation against an independent
scalar oracle written with plain Python loops and the math module, or
against an analytic closed form. The CLI selftest command runs this suite
and exits nonzero if any check fails.
"""

from __future__ import annotations

import math
import time

import numpy as np
import torch

from . import corruption, losses, metrics
from .seeding import derive_rng

# ---------------------------------------------------------------------------
# Scalar oracles (pure Python; no torch, no vectorization)
# ---------------------------------------------------------------------------


def oracle_cosine(a, b) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb + 1e-8)


def oracle_sgp(emb_lf, emb_hf, tau: float) -> float:
    """Explicit double loop over the contrastive softmax."""
    n = len(emb_lf)
    total = 0.0
    for i in range(n):
        pos = math.exp(oracle_cosine(emb_lf[i], emb_hf[i]) / tau)
        denom = 0.0
        for j in range(n):
            denom += math.exp(oracle_cosine(emb_lf[i], emb_hf[j]) / tau)
        total += -math.log(pos / denom)
    return total / n


def oracle_mse(target, reconstruction) -> float:
    total = 0.0
    count = 0
    for t, r in zip(target, reconstruction):
        total += (t - r) ** 2
        count += 1
    return total / count


def oracle_mae(a, b) -> float:
    total = 0.0
    count = 0
    for x, y in zip(a, b):
        total += abs(x - y)
        count += 1
    return total / count


def oracle_adversarial(d_real, d_fake):
    loss_d = 0.5 * sum((x - 1.0) ** 2 for x in d_real) / len(d_real) \
        + 0.5 * sum(x * x for x in d_fake) / len(d_fake)
    loss_g = sum((x - 1.0) ** 2 for x in d_fake) / len(d_fake)
    return loss_d, loss_g


def oracle_kl_score(rows) -> float:
    """exp(mean KL(row || marginal)) for one split, scalar loops."""
    n = len(rows)
    k = len(rows[0])
    marginal = [sum(rows[i][j] for i in range(n)) / n for j in range(k)]
    total = 0.0
    for row in rows:
        kl = 0.0
        for j in range(k):
            if row[j] > 0:
                kl += row[j] * (math.log(row[j]) - math.log(marginal[j]))
        total += kl
    return math.exp(total / n)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


class CheckFailure(AssertionError):
    pass


def _expect(condition: bool, name: str, detail: str) -> None:
    if not condition:
        raise CheckFailure(f"{name}: {detail}")


def check_sgp_oracle(trials: int = 100) -> None:
    rng = derive_rng(20240501, "selftest-sgp")
    for t in range(trials):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(2, 17))
        tau = float(rng.uniform(0.05, 2.0))
        lf = rng.uniform(-1, 1, size=(n, d))
        hf = rng.uniform(-1, 1, size=(n, d))
        got = float(losses.sgp_contrastive_loss(
            torch.from_numpy(lf), torch.from_numpy(hf), tau
        ))
        want = oracle_sgp(lf.tolist(), hf.tolist(), tau)
        _expect(abs(got - want) < 1e-6, "sgp-oracle",
                f"trial {t}: impl {got} vs oracle {want}")
    for n in (2, 4, 8):
        emb = np.tile(rng.uniform(-1, 1, size=(1, 8)), (n, 1))
        got = float(losses.sgp_contrastive_loss(
            torch.from_numpy(emb), torch.from_numpy(emb.copy()), 0.3
        ))
        _expect(abs(got - math.log(n)) < 1e-6, "sgp-analytic",
                f"identical embeddings N={n}: {got} vs ln N {math.log(n)}")
    single = rng.uniform(-1, 1, size=(1, 4))
    got = float(losses.sgp_contrastive_loss(
        torch.from_numpy(single), torch.from_numpy(single.copy()), 0.5
    ))
    _expect(abs(got) < 1e-9, "sgp-analytic", f"N=1 loss should be 0, got {got}")


def check_elementwise_oracles(trials: int = 100) -> None:
    rng = derive_rng(20240501, "selftest-elementwise")
    for t in range(trials):
        n = int(rng.integers(1, 65))
        a = rng.uniform(-2, 2, size=n)
        b = rng.uniform(-2, 2, size=n)
        got = float(losses.lsc_loss(torch.from_numpy(a), torch.from_numpy(b)))
        _expect(abs(got - oracle_mse(a.tolist(), b.tolist())) < 1e-6,
                "lsc-oracle", f"trial {t}")
        got = float(losses.cycle_loss(torch.from_numpy(a), torch.from_numpy(b)))
        _expect(abs(got - oracle_mae(a.tolist(), b.tolist())) < 1e-6,
                "cycle-oracle", f"trial {t}")
        d_real = rng.uniform(-2, 2, size=n)
        d_fake = rng.uniform(-2, 2, size=n)
        got_d, got_g = losses.adversarial_losses(
            torch.from_numpy(d_real), torch.from_numpy(d_fake)
        )
        want_d, want_g = oracle_adversarial(d_real.tolist(), d_fake.tolist())
        _expect(abs(float(got_d) - want_d) < 1e-6, "adv-oracle", f"trial {t} (D)")
        _expect(abs(float(got_g) - want_g) < 1e-6, "adv-oracle", f"trial {t} (G)")
    w = losses.LossWeights()
    _expect(abs(losses.total_loss(1.0, 1.0, 1.0, w) - 1.0) < 1e-12,
            "total-weights", "unit losses with default weights should sum to 1.0")
    _expect(abs(losses.total_loss(2.0, 5.0, 10.0, w) - 5.0) < 1e-12,
            "total-weights", "0.5*2 + 0.2*5 + 0.3*10 should be 5.0")


def check_corruption(trials: int = 100, rotate_fn=None) -> None:
    rotate = rotate_fn or corruption.rotate_block
    block = np.array([[1.0, 2.0], [3.0, 4.0]])
    want = [[2.0, 4.0], [1.0, 3.0]]   # hand-enumerated 2x2 counterclockwise map
    got = rotate(block, 90).tolist()
    _expect(got == want, "rotation-convention", f"90 deg ccw of [[1,2],[3,4]]: {got}")
    _expect(np.array_equal(rotate(rotate(block, 180), 180), block),
            "rotation-convention", "180 twice is not the identity")

    rng = derive_rng(20240501, "selftest-corruption")
    for t in range(trials):
        blocks = int(rng.integers(1, 5))
        size = 8 * blocks
        pixels = rng.uniform(0, 1, size=(size, size)).astype(np.float32)
        rot = float(rng.uniform(0, 0.6))
        mask = float(rng.uniform(0, 1.0 - rot))
        if t == 0:
            rot, mask = 0.0, 0.0
        if t == 1:
            rot, mask = 0.5, 0.5
        corrupted, record = corruption.corrupt_array(
            pixels, 8, rot, mask, 0.0, seed=int(rng.integers(0, 2 ** 31))
        )
        restored = corruption.invert_corruption_array(corrupted, record, pixels)
        _expect(np.array_equal(restored, pixels), "corruption-inversion",
                f"trial {t} not bit-exact")
        touched = set((r, c) for r, c, _ in record.rotated) | set(record.masked)
        _expect(len(touched) == len(record.rotated) + len(record.masked),
                "corruption-disjoint", f"trial {t}")
        untouched = pixels.copy()
        for r, c in touched:
            untouched[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8] = \
                corrupted[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8]
        _expect(np.array_equal(untouched, corrupted), "corruption-locality",
                f"trial {t}: pixels outside recorded blocks changed")


def check_metrics() -> None:
    rng = derive_rng(20240501, "selftest-metrics")
    r = metrics.matrix_sqrt_psd(np.diag([4.0, 9.0]))
    _expect(np.allclose(np.diag(r), [2.0, 3.0], atol=1e-12), "sqrt-diagonal",
            f"sqrt(diag(4, 9)) gave diag {np.diag(r)}")
    feats = metrics.FeatureSet(rng.standard_normal((40, 6)), "selftest")
    _expect(abs(metrics.fid(feats, feats)) < 1e-6, "fid-identity",
            "fid(a, a) should be 0")
    uniform = np.full((12, 5), 0.2)
    mean, std = metrics.inception_score(uniform, 3)
    _expect(abs(mean - 1.0) < 1e-9 and std < 1e-9, "is-uniform",
            f"uniform rows should score exactly 1, got {mean}")
    onehot = np.eye(6)
    mean, _ = metrics.inception_score(onehot, 1)
    _expect(abs(mean - 6.0) < 1e-6, "is-onehot",
            f"balanced one-hots should score K=6, got {mean}")
    probs = rng.dirichlet(np.ones(5), size=24)
    mean, _ = metrics.inception_score(probs, 3)
    oracle_splits = [oracle_kl_score(chunk.tolist())
                     for chunk in np.array_split(probs, 3)]
    _expect(abs(mean - float(np.mean(oracle_splits))) < 1e-6, "is-oracle",
            f"implementation {mean} vs oracle {np.mean(oracle_splits)}")
    x = rng.uniform(0, 1, size=(64, 64))
    _expect(abs(metrics.ms_ssim_arrays(x, x, 1.0) - 1.0) < 1e-6, "msssim-self",
            "ms_ssim(x, x) should be 1")
    y = rng.uniform(0, 1, size=(64, 64))
    fwd = metrics.ms_ssim_arrays(x, y, 1.0)
    bwd = metrics.ms_ssim_arrays(y, x, 1.0)
    _expect(abs(fwd - bwd) < 1e-6, "msssim-symmetry", f"{fwd} vs {bwd}")


CHECKS = (
    ("sgp-contrastive-oracle", check_sgp_oracle),
    ("elementwise-loss-oracles", check_elementwise_oracles),
    ("corruption-inversion", check_corruption),
    ("metric-analytic-cases", check_metrics),
)


def run_selftest(inject_fault: str | None = None, stream=None) -> int:
    """Run all oracle checks; returns 0 iff everything passed.

    inject_fault="rotation-convention" routes a deliberately wrong
    (clockwise) rotation into the corruption check to prove the oracles can
    catch a convention break.
    """
    import sys

    stream = stream or sys.stdout
    failures = 0
    start = time.time()
    for name, check in CHECKS:
        kwargs = {}
        if name == "corruption-inversion" and inject_fault == "rotation-convention":
            kwargs["rotate_fn"] = lambda block, angle: np.rot90(block, k=-(angle // 90)).copy()
        try:
            check(**kwargs)
        except CheckFailure as exc:
            failures += 1
            print(f"[FAIL] {name}: {exc}", file=stream)
        else:
            print(f"[ok]   {name}", file=stream)
    elapsed = time.time() - start
    print(f"selftest: {len(CHECKS) - failures}/{len(CHECKS)} oracle groups passed "
          f"in {elapsed:.1f}s", file=stream)
    return 0 if failures == 0 else 1
