"""Alternating adversarial training of the harmonization generator and the
patch discriminator, with seeded determinism, resumable checkpointing and a
line-delimited metrics log.

Checkpoints are a deterministic binary container (same state -> identical
bytes) plus a sidecar JSON metadata manifest; save -> load -> save
round-trips bit-exactly, which is what makes resumed runs reproduce the
uninterrupted loss stream.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import data
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig
from .losses import (
    LossReport,
    LossWeights,
    content_loss_from_features,
    d_loss,
    g_adv_loss,
    style_loss_from_features,
    total_g_loss,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

# ablation presets: (use_resfft, use_discriminator, use_freq_branch);
# without a discriminator the frequency-branch flag is moot and kept False
ABLATION_PRESETS = {
    "V1": (False, False, False),
    "V2": (True, False, False),
    "V3": (True, True, False),
    "V4": (False, True, True),
    "V5": (True, True, True),
}


class NonFiniteLossError(RuntimeError):
    """A loss term went NaN/inf; the offending step was rolled back."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r} ({value}); step aborted")
        self.term = term
        self.value = value


@dataclass
class TrainConfig:
    image_size: int = 256
    n: int = 4
    width_multiplier: float = 1.0
    batch_size: int = 4
    iterations: int = 1000
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_c: float = 2.0
    lambda_adv: float = 10.0
    use_resfft: bool = True
    use_discriminator: bool = True
    use_freq_branch: bool = True
    resfft_blocks: int = 1
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    manifest: str | None = None
    out_dir: str = "runs/default"
    encoder_weights: str | None = None

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.image_size % 8 != 0:
            raise ValueError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.use_discriminator and self.image_size != 64 * self.n:
            raise ValueError(
                f"with a discriminator, image_size must equal 64*n = {64 * self.n}, "
                f"got {self.image_size}"
            )

    @property
    def weights(self) -> LossWeights:
        return LossWeights(lambda_c=self.lambda_c, lambda_adv=self.lambda_adv)

    def with_preset(self, name: str) -> "TrainConfig":
        if name not in ABLATION_PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(ABLATION_PRESETS)}")
        use_resfft, use_disc, use_freq = ABLATION_PRESETS[name]
        cfg = copy.copy(self)
        cfg.use_resfft = use_resfft
        cfg.use_discriminator = use_disc
        cfg.use_freq_branch = use_freq
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, row: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(row) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**row)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        text = Path(path).read_text()
        try:
            row = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path}: line {exc.lineno}, col {exc.colno}: {exc.msg}") from None
        return cls.from_dict(row)

    def to_file(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def sha256(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def grid_targets(mask: torch.Tensor, n: int) -> torch.Tensor:
    """Patch-level targets: the mask pooled to n x n with the shared
    >= 0.5 tie-break, shaped (B, n, n)."""
    pooled = F.adaptive_avg_pool2d(mask, (n, n))
    return (pooled >= 0.5).to(mask.dtype).squeeze(1)


def batch_to_tensors(batch: list[data.CompositeSample]):
    comp = torch.from_numpy(np.stack([s.composite for s in batch])).permute(0, 3, 1, 2)
    bg = torch.from_numpy(np.stack([s.background for s in batch])).permute(0, 3, 1, 2)
    mask = torch.from_numpy(np.stack([s.mask for s in batch])).permute(0, 3, 1, 2)
    return comp.float(), bg.float(), mask.float()


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    discriminator: Discriminator | None
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam | None
    iteration: int = 0
    data_rng: dict = field(default_factory=dict)

    def snapshot(self) -> dict:
        snap = {
            "g": copy.deepcopy(self.generator.state_dict()),
            "opt_g": copy.deepcopy(self.opt_g.state_dict()),
            "iteration": self.iteration,
        }
        if self.discriminator is not None:
            snap["d"] = copy.deepcopy(self.discriminator.state_dict())
            snap["opt_d"] = copy.deepcopy(self.opt_d.state_dict())
        return snap

    def restore(self, snap: dict) -> None:
        self.generator.load_state_dict(snap["g"])
        self.opt_g.load_state_dict(snap["opt_g"])
        self.iteration = snap["iteration"]
        if self.discriminator is not None:
            self.discriminator.load_state_dict(snap["d"])
            self.opt_d.load_state_dict(snap["opt_d"])


def make_state(config: TrainConfig) -> TrainState:
    config.validate()
    gen = Generator(
        GeneratorConfig(
            width_multiplier=config.width_multiplier,
            use_resfft=config.use_resfft,
            resfft_blocks=config.resfft_blocks,
            seed=config.seed,
            encoder_weights=config.encoder_weights,
        )
    )
    opt_g = torch.optim.Adam(
        gen.trainable_parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )
    disc, opt_d = None, None
    if config.use_discriminator:
        disc = Discriminator(
            DiscriminatorConfig(
                n=config.n,
                width_multiplier=config.width_multiplier,
                use_freq_branch=config.use_freq_branch,
                seed=config.seed + 1,
            )
        )
        opt_d = torch.optim.Adam(
            disc.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
        )
    rng_state = np.random.default_rng(config.seed).bit_generator.state
    return TrainState(
        config=config,
        generator=gen,
        discriminator=disc,
        opt_g=opt_g,
        opt_d=opt_d,
        data_rng=rng_state,
    )


def _require_finite(term: str, value: torch.Tensor, state, snap):
    if not bool(torch.isfinite(value)):
        if snap is not None:
            state.restore(snap)
        raise NonFiniteLossError(term, value.detach().item())


def train_step(state: TrainState, batch: list[data.CompositeSample]) -> LossReport:
    """One alternating update: discriminator first (on the detached
    harmonized output), then the generator. A non-finite loss aborts the
    step with the state rolled back to its value on entry."""
    cfg = state.config
    comp, bg, mask = batch_to_tensors(batch)
    state.generator.train()
    snap = state.snapshot() if cfg.use_discriminator else None

    harmonized, _, (comp_feats, bg_feats, level_masks) = state.generator(
        comp, bg, mask, return_pyramids=True
    )

    d_val = None
    if cfg.use_discriminator:
        state.discriminator.train()
        targets = grid_targets(mask, cfg.n)
        pred_h = state.discriminator(harmonized.detach())
        pred_c = state.discriminator(comp)
        pred_b = state.discriminator(bg)
        dl = d_loss(pred_h, pred_c, pred_b, targets)
        _require_finite("d_adv", dl, state, snap)
        state.opt_d.zero_grad()
        dl.backward()
        state.opt_d.step()
        d_val = dl.item()

    harm_feats = state.generator.encode(harmonized)
    sl = style_loss_from_features(harm_feats, bg_feats, level_masks)
    cl = content_loss_from_features(harm_feats[-1], comp_feats[-1])
    _require_finite("style", sl, state, snap)
    _require_finite("content", cl, state, snap)
    if cfg.use_discriminator:
        gl = g_adv_loss(state.discriminator(harmonized))
        _require_finite("g_adv", gl, state, snap)
        total = total_g_loss(sl, cl, gl, cfg.weights)
        g_val = gl.item()
    else:
        total = sl + cfg.lambda_c * cl
        g_val = None
    _require_finite("total_g", total, state, snap)
    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()

    state.iteration += 1
    return LossReport(
        style=sl.item(), content=cl.item(), g_adv=g_val, d_adv=d_val, total_g=total.item()
    )


# ---------------------------------------------------------------------------
# deterministic checkpoint container
# ---------------------------------------------------------------------------


def _state_dict_arrays(prefix: str, sd: dict) -> dict:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in sd.items()}


def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer):
    arrays, groups = {}, []
    sd = opt.state_dict()
    for pid, entry in sd["state"].items():
        for key, val in entry.items():
            if isinstance(val, torch.Tensor):
                arrays[f"{prefix}.{pid}.{key}"] = val.detach().cpu().numpy()
            else:
                arrays[f"{prefix}.{pid}.{key}"] = np.asarray(val)
    for group in sd["param_groups"]:
        groups.append({k: v for k, v in group.items()})
    return arrays, groups


def _restore_optimizer(opt: torch.optim.Optimizer, prefix: str, arrays: dict, groups):
    entries: dict[int, dict] = {}
    plen = len(prefix) + 1
    for name, arr in arrays.items():
        if not name.startswith(prefix + "."):
            continue
        pid_s, key = name[plen:].split(".", 1)
        entries.setdefault(int(pid_s), {})[key] = torch.from_numpy(arr.copy())
    groups = [dict(g) for g in groups]
    for g in groups:
        if "betas" in g:  # JSON round-trips the tuple as a list
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": entries, "param_groups": groups})


def save_checkpoint(state: TrainState, path) -> Path:
    """Write the weights container at ``path`` and its sidecar metadata
    manifest at ``<path>.meta.json``. Output bytes depend only on the state."""
    path = Path(path)
    arrays = _state_dict_arrays("g", state.generator.state_dict())
    opt_g_arrays, opt_g_groups = _optimizer_arrays("optg", state.opt_g)
    arrays.update(opt_g_arrays)
    extras = {
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "opt_g_groups": opt_g_groups,
        "data_rng": state.data_rng,
        "has_discriminator": state.discriminator is not None,
    }
    if state.discriminator is not None:
        arrays.update(_state_dict_arrays("d", state.discriminator.state_dict()))
        opt_d_arrays, opt_d_groups = _optimizer_arrays("optd", state.opt_d)
        arrays.update(opt_d_arrays)
        extras["opt_d_groups"] = opt_d_groups

    names = sorted(arrays)
    index = [
        {
            "name": k,
            "dtype": str(arrays[k].dtype),
            "shape": list(arrays[k].shape),
        }
        for k in names
    ]
    header = json.dumps(
        {"format_version": CHECKPOINT_FORMAT_VERSION, "arrays": index, "extras": extras},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for k in names:
            fh.write(np.ascontiguousarray(arrays[k]).tobytes())
    payload_sha = hashlib.sha256(path.read_bytes()).hexdigest()
    cfg = state.config
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "iteration": state.iteration,
        "width_multiplier": cfg.width_multiplier,
        "n": cfg.n,
        "ablation": {
            "use_resfft": cfg.use_resfft,
            "use_discriminator": cfg.use_discriminator,
            "use_freq_branch": cfg.use_freq_branch,
        },
        "seed": cfg.seed,
        "config_sha256": cfg.sha256(),
        "payload_sha256": payload_sha,
    }
    meta_path = Path(str(path) + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, expect_config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState from a checkpoint; validates the sidecar
    metadata (format version, payload digest) before touching the payload."""
    path = Path(path)
    meta_path = Path(str(path) + ".meta.json")
    if not meta_path.exists():
        raise FileNotFoundError(f"missing metadata manifest {meta_path}")
    meta = json.loads(meta_path.read_text())
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format version {version} does not match supported "
            f"version {CHECKPOINT_FORMAT_VERSION}"
        )
    payload = path.read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != meta.get("payload_sha256"):
        raise ValueError(
            f"payload digest mismatch for {path}: metadata says "
            f"{meta.get('payload_sha256')}, file hashes to {digest}"
        )

    (header_len,) = struct.unpack_from("<Q", payload, 0)
    header = json.loads(payload[8 : 8 + header_len].decode())
    arrays = {}
    offset = 8 + header_len
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        arrays[entry["name"]] = np.frombuffer(
            payload, dtype=dtype, count=max(1, int(np.prod(shape, dtype=np.int64))), offset=offset
        ).reshape(shape)
        offset += nbytes
    extras = header["extras"]

    config = TrainConfig.from_dict(extras["config"])
    if expect_config is not None and expect_config.sha256() != meta["config_sha256"]:
        logger.warning(
            "resume config differs from checkpoint config (%s vs %s)",
            expect_config.sha256()[:12],
            meta["config_sha256"][:12],
        )
    state = make_state(config)
    g_sd = {
        k[len("g.") :]: torch.from_numpy(v.copy())
        for k, v in arrays.items()
        if k.startswith("g.")
    }
    state.generator.load_state_dict(g_sd)
    _restore_optimizer(state.opt_g, "optg", arrays, extras["opt_g_groups"])
    if extras["has_discriminator"]:
        d_sd = {
            k[len("d.") :]: torch.from_numpy(v.copy())
            for k, v in arrays.items()
            if k.startswith("d.")
        }
        state.discriminator.load_state_dict(d_sd)
        _restore_optimizer(state.opt_d, "optd", arrays, extras["opt_d_groups"])
    state.iteration = extras["iteration"]
    state.data_rng = extras["data_rng"]
    return state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class EpochSampler:
    """Indexed access to the seeded epoch schedule so a resumed run lands on
    the exact batch it would have seen; samples depend only on (record,
    seed) and are cached after the first build."""

    def __init__(self, manifest: data.DatasetManifest, config: TrainConfig):
        if not manifest.records:
            raise ValueError("manifest has no records")
        self.manifest = manifest
        self.config = config
        self.batches_per_epoch = math.ceil(len(manifest.records) / config.batch_size)
        self._cache: dict[int, data.CompositeSample | None] = {}

    def _sample(self, index: int):
        if index not in self._cache:
            try:
                self._cache[index] = data.load_record(
                    self.manifest, index, self.config.seed, self.config.image_size
                )
            except (OSError, data.CompositeRejected, ValueError) as exc:
                logger.warning("skipping record %d: %s", index, exc)
                self._cache[index] = None
        return self._cache[index]

    def batch(self, iteration: int) -> list[data.CompositeSample]:
        epoch, slot = divmod(iteration, self.batches_per_epoch)
        order = np.random.default_rng([self.config.seed, epoch]).permutation(
            len(self.manifest.records)
        )
        lo = slot * self.config.batch_size
        chosen = order[lo : lo + self.config.batch_size]
        batch = [s for s in (self._sample(int(i)) for i in chosen) if s is not None]
        if not batch:
            raise RuntimeError(f"no readable records in batch {slot} of epoch {epoch}")
        return batch


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    reports: list[LossReport]


def train(
    config: TrainConfig,
    manifest: data.DatasetManifest | None = None,
    resume: str | Path | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run ``config.iterations`` alternating steps over the manifest.

    Writes ``metrics.jsonl`` (one header line, then one record per
    iteration) and checkpoints at the configured cadence plus ``final.ckpt``
    into ``config.out_dir``. ``resume`` continues from a saved checkpoint
    and reproduces the uninterrupted run's loss stream from that point on.
    """
    config.validate()
    if manifest is None:
        if not config.manifest:
            raise ValueError("config.manifest is not set and no manifest was passed")
        manifest = data.load_manifest(config.manifest)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    if resume is not None:
        state = load_checkpoint(resume, expect_config=config)
        mode = "a"
    else:
        state = make_state(config)
        mode = "w"

    sampler = EpochSampler(manifest, config)
    reports: list[LossReport] = []
    started = time.perf_counter()
    with metrics_path.open(mode) as metrics:
        if mode == "w":
            metrics.write(
                json.dumps(
                    {
                        "event": "start",
                        "alternation": "d_then_g",
                        "config": config.to_dict(),
                        "config_sha256": config.sha256(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        while state.iteration < config.iterations:
            step_start = time.perf_counter()
            batch = sampler.batch(state.iteration)
            report = train_step(state, batch)
            reports.append(report)
            row = {
                "iteration": state.iteration,
                "style": report.style,
                "content": report.content,
                "g_adv": report.g_adv,
                "d_adv": report.d_adv,
                "total_g": report.total_g,
                "wall_time": time.perf_counter() - step_start,
            }
            metrics.write(json.dumps(row) + "\n")
            if log_every and state.iteration % log_every == 0:
                logger.info(
                    "iter %d/%d total_g=%.4f d_adv=%s (%.1fs elapsed)",
                    state.iteration,
                    config.iterations,
                    report.total_g,
                    f"{report.d_adv:.4f}" if report.d_adv is not None else "-",
                    time.perf_counter() - started,
                )
            if (
                config.checkpoint_every
                and state.iteration % config.checkpoint_every == 0
                and state.iteration < config.iterations
            ):
                save_checkpoint(state, out_dir / f"ckpt_{state.iteration:06d}.ckpt")
    final_path = save_checkpoint(state, out_dir / "final.ckpt")
    return TrainResult(checkpoint_path=final_path, metrics_path=metrics_path, reports=reports)
