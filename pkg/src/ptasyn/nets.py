"""Learnable components and their contracts.

Four kinds of networks: a feature extractor producing unit-norm embeddings,
encoder-decoder generators with skip connections squashed to [-1, 1], patch
discriminators emitting raw score maps, and a pretext reconstruction
network sharing the generator topology. Weight init is a fixed scheme
seeded from the config seed, and no layer carries train-time stochasticity
or batch statistics, so forward passes are deterministic functions of
(weights, input).
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigurationError
from .seeding import derive_torch_generator, stable_int

CHECKPOINT_VERSION = 1
STAGE_TAGS = ("sgp", "lsc", "pta", "extractor")


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    depth: int = 3
    embed_dim: int = 64
    norm_kind: str = "instance"   # instance | none
    seed: int = 0

    def validate(self) -> None:
        if self.base_channels <= 0:
            raise ConfigurationError("network.base_channels must be > 0")
        if self.depth <= 0:
            raise ConfigurationError("network.depth must be > 0")
        if self.embed_dim <= 0:
            raise ConfigurationError("network.embed_dim must be > 0")
        if self.norm_kind not in ("instance", "none"):
            raise ConfigurationError("network.norm_kind must be 'instance' or 'none'")


def _norm(channels: int, kind: str) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True, track_running_stats=False)
    return nn.Identity()


def _level_channels(base: int, level: int) -> int:
    # cap growth at 4x base to keep desk-scale CPU runs fast
    return base * min(2 ** level, 4)


def _check_divisible(x: torch.Tensor, depth: int) -> None:
    h, w = x.shape[-2], x.shape[-1]
    factor = 2 ** depth
    if h % factor != 0 or w % factor != 0:
        raise ValueError(
            f"input dims {h}x{w} must be divisible by 2^depth = {factor}"
        )


class SliceEncoder(nn.Module):
    """Strided conv trunk + global average pool + linear head, L2-normalized."""

    def __init__(self, cfg: NetworkConfig, in_channels: int = 1):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers = []
        ch_in = in_channels
        for level in range(cfg.depth):
            ch_out = _level_channels(cfg.base_channels, level)
            layers += [
                nn.Conv2d(ch_in, ch_out, 3, stride=2, padding=1),
                _norm(ch_out, cfg.norm_kind),
                nn.ReLU(inplace=True),
            ]
            ch_in = ch_out
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(ch_in, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("encoder input contains non-finite values")
        _check_divisible(x, self.cfg.depth)
        feats = self.trunk(x).mean(dim=(2, 3))
        emb = self.head(feats)
        return emb / (emb.norm(dim=1, keepdim=True) + 1e-8)


class UnetTranslator(nn.Module):
    """Small encoder-decoder with skip connections and a tanh output."""

    def __init__(self, cfg: NetworkConfig, in_channels: int = 1, out_channels: int = 1):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        base = cfg.base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base, 3, padding=1),
            _norm(base, cfg.norm_kind),
            nn.ReLU(inplace=True),
        )
        downs = []
        encoder_channels = [base]
        ch = base
        for level in range(cfg.depth):
            ch_out = _level_channels(base, level + 1)
            downs.append(
                nn.Sequential(
                    nn.Conv2d(ch, ch_out, 3, stride=2, padding=1),
                    _norm(ch_out, cfg.norm_kind),
                    nn.ReLU(inplace=True),
                )
            )
            encoder_channels.append(ch_out)
            ch = ch_out
        self.downs = nn.ModuleList(downs)
        self.bottleneck = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            _norm(ch, cfg.norm_kind),
            nn.ReLU(inplace=True),
        )
        ups = []
        for level in reversed(range(cfg.depth)):
            skip_ch = encoder_channels[level]
            ch_out = encoder_channels[level]
            # 1x1 fuse of upsampled features with the skip, then a 3x3 refine;
            # much cheaper than a 3x3 conv over the concatenation
            ups.append(
                nn.Sequential(
                    nn.Conv2d(ch + skip_ch, ch_out, 1),
                    _norm(ch_out, cfg.norm_kind),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(ch_out, ch_out, 3, padding=1),
                    _norm(ch_out, cfg.norm_kind),
                    nn.ReLU(inplace=True),
                )
            )
            ch = ch_out
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(ch, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x, self.cfg.depth)
        feats = [self.stem(x)]
        h = feats[0]
        for down in self.downs:
            h = down(h)
            feats.append(h)
        h = self.bottleneck(h)
        for i, up in enumerate(self.ups):
            skip = feats[len(feats) - 2 - i]
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = up(torch.cat([h, skip], dim=1))
        return torch.tanh(self.head(h))


class PatchDiscriminator(nn.Module):
    """Strided conv classifier emitting raw patch scores [N, 1, H/2^d, W/2^d]."""

    def __init__(self, cfg: NetworkConfig, in_channels: int = 1):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers = []
        ch_in = in_channels
        for level in range(cfg.depth):
            ch_out = _level_channels(cfg.base_channels, level)
            layers.append(nn.Conv2d(ch_in, ch_out, 4, stride=2, padding=1))
            if level > 0:
                layers.append(_norm(ch_out, cfg.norm_kind))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            ch_in = ch_out
        layers.append(nn.Conv2d(ch_in, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x, self.cfg.depth)
        return self.body(x)


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Fixed init scheme: conv/linear weights N(0, 0.02), norm weights 1, biases 0.

    Parameters are filled in registration order from one seeded generator,
    so two builds with the same seed are bit-identical.
    """
    for name, param in module.named_parameters():
        with torch.no_grad():
            if param.dim() >= 2:
                param.normal_(0.0, 0.02, generator=generator)
            elif name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()


class NetworkBundle:
    """The full set of learnable components with named-parameter access."""

    COMPONENTS = (
        "encoder",
        "generator_lf2hf",
        "generator_hf2lf",
        "discriminator_hf",
        "discriminator_lf",
        "pretext",
    )

    def __init__(self, cfg: NetworkConfig, encoder_in_channels: int = 1):
        cfg.validate()
        self.cfg = cfg
        self.encoder = SliceEncoder(cfg, in_channels=encoder_in_channels)
        self.generator_lf2hf = UnetTranslator(cfg)
        self.generator_hf2lf = UnetTranslator(cfg)
        self.discriminator_hf = PatchDiscriminator(cfg)
        self.discriminator_lf = PatchDiscriminator(cfg)
        self.pretext = UnetTranslator(cfg)
        for name in self.COMPONENTS:
            init_parameters(
                getattr(self, name), derive_torch_generator(cfg.seed, "init", name)
            )

    def named_components(self):
        return [(name, getattr(self, name)) for name in self.COMPONENTS]

    def state_tensors(self, components=None) -> dict:
        out = {}
        for name, module in self.named_components():
            if components is not None and name not in components:
                continue
            for pname, param in module.named_parameters():
                out[f"{name}.{pname}"] = param.detach().clone()
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        for full_name, value in tensors.items():
            comp_name, _, pname = full_name.partition(".")
            if comp_name not in self.COMPONENTS:
                raise CheckpointError(f"unknown component in checkpoint: {comp_name}")
            module = getattr(self, comp_name)
            params = dict(module.named_parameters())
            if pname not in params:
                raise CheckpointError(f"unknown parameter in checkpoint: {full_name}")
            if tuple(params[pname].shape) != tuple(value.shape):
                raise CheckpointError(
                    f"shape mismatch for {full_name}: checkpoint "
                    f"{tuple(value.shape)} vs model {tuple(params[pname].shape)}"
                )
            with torch.no_grad():
                params[pname].copy_(value)

    def all_finite(self) -> bool:
        return all(
            torch.isfinite(p).all()
            for _, module in self.named_components()
            for p in module.parameters()
        )


# ---------------------------------------------------------------------------
# Checkpoint archive: zip(manifest.json, params.bin) with f32le payloads
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    tensors: dict,
    stage: str,
    config: NetworkConfig,
    seed: int,
    extra: dict | None = None,
) -> str:
    """Write a checkpoint archive; returns its sha256 hex digest.

    Archive layout: manifest.json (version, stage, seed, network config,
    ordered parameter descriptors with byte offsets) + params.bin holding
    the concatenated little-endian float32 payloads.
    """
    if stage not in STAGE_TAGS:
        raise CheckpointError(f"stage must be one of {STAGE_TAGS}, got {stage!r}")
    entries = []
    blob = io.BytesIO()
    offset = 0
    for name in sorted(tensors):
        value = tensors[name]
        if value.dtype != torch.float32:
            raise CheckpointError(
                f"checkpoint payloads are float32; {name} has dtype {value.dtype}"
            )
        data = value.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(value.shape),
                "dtype": "f32le",
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blob.write(data)
        offset += len(data)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "seed": seed,
        "network_config": asdict(config),
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True, indent=2))
        zf.writestr("params.bin", blob.getvalue())
    tmp.replace(path)
    return sha256_file(path)


def load_checkpoint(path):
    """Read a checkpoint archive; returns (manifest dict, {name: float32 tensor})."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            payload = zf.read("params.bin")
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint archive {path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('format_version')!r}"
        )
    tensors = {}
    for entry in manifest["params"]:
        start = entry["offset"]
        end = start + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"truncated payload for {entry['name']} in {path}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    return manifest, tensors


def checkpoint_stage(path) -> str:
    manifest, _ = load_checkpoint(path)
    return manifest["stage"]


def network_config_from_manifest(manifest: dict) -> NetworkConfig:
    return NetworkConfig(**manifest["network_config"])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def fingerprint_tensors(tensors: dict, config: NetworkConfig) -> str:
    """Stable identity hash over weights and the producing config."""
    h = hashlib.sha256()
    h.update(repr(asdict(config)).encode("utf-8"))
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(tensors[name].detach().cpu().contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def clone_module_as(module: nn.Module, dtype: torch.dtype) -> nn.Module:
    """Deep copy of a module converted to the given dtype (for the FD twin)."""
    import copy

    twin = copy.deepcopy(module)
    return twin.to(dtype)


def gradcheck(
    loss_fn,
    params,
    eps: float = 1e-6,
    tol: float | None = None,
    n_samples: int = 32,
    seed: int = 0,
    hp_loss_fn=None,
    hp_params=None,
    floor_factor: float = 3e-2,
) -> float:
    """Compare autodiff gradients against central finite differences.

    Samples random scalar coordinates across the given parameter tensors and
    returns the max relative error |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    At least n_samples coordinates are checked; if tol is given, a result
    above it raises.

    The finite-difference secant is the measuring instrument, so when a
    higher-precision twin of the loss is supplied (hp_loss_fn over
    hp_params, typically a float64 copy built with clone_module_as), every
    FD evaluation copies the perturbed parameter values into the twin
    exactly and evaluates there. That keeps the secant free of
    single-precision evaluation noise; what remains measured is the
    accuracy of the model-precision autodiff gradient itself.

    Coordinates whose |g_ad| falls below floor_factor times the RMS gradient
    are below finite-difference resolution at model precision (they carry a
    vanishing share of the gradient mass); they are skipped and resampled.
    """
    params = list(params)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ArithmeticError(f"loss is non-finite: {loss}")
    grads = torch.autograd.grad(loss, params, allow_unused=False)

    use_twin = hp_loss_fn is not None
    if use_twin:
        hp_params = list(hp_params)
        if len(hp_params) != len(params):
            raise ValueError("hp_params must mirror params one to one")

    def fd_eval() -> float:
        if not use_twin:
            return float(loss_fn())
        with torch.no_grad():
            for src, dst in zip(params, hp_params):
                dst.copy_(src.detach().to(dst.dtype))
        return float(hp_loss_fn())

    flat_grads = torch.cat([g.reshape(-1) for g in grads])
    rms = float(flat_grads.double().pow(2).mean().sqrt())
    floor = floor_factor * rms

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    n = min(n_samples, total)
    rng = np.random.default_rng(stable_int(seed, "gradcheck"))
    order = rng.permutation(total)
    bounds = np.cumsum([0] + sizes)

    worst = 0.0
    checked = 0
    for flat in order:
        if checked >= n:
            break
        pi = int(np.searchsorted(bounds, flat, side="right") - 1)
        local = int(flat - bounds[pi])
        g_ad = float(grads[pi].reshape(-1)[local])
        if abs(g_ad) < floor:
            continue
        view = params[pi].detach().view(-1)
        original = view[local].item()
        step = eps * max(1.0, abs(original))
        with torch.no_grad():
            view[local] = original + step
            realized_plus = view[local].item()   # the step actually representable
            loss_plus = fd_eval()
            view[local] = original - step
            realized_minus = view[local].item()
            loss_minus = fd_eval()
            view[local] = original
        span = realized_plus - realized_minus
        if span == 0.0:
            continue
        g_fd = (loss_plus - loss_minus) / span
        rel = abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)
        worst = max(worst, rel)
        checked += 1
    if checked < n:
        raise ArithmeticError(
            f"only {checked} of the requested {n} coordinates had gradients above "
            f"the finite-difference resolution floor {floor:.3g}"
        )
    if tol is not None and worst > tol:
        raise AssertionError(f"gradcheck max relative error {worst:.3g} exceeds tol {tol:.3g}")
    return worst
