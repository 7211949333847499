"""Two-stage training: the codec GAN, then the latent diffusion estimator on a frozen codec."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import losses as L
from ..codec import Codec
from ..diffusion import LatentStats, VarianceSchedule, make_schedule, restore, scaled_schedule, training_step
from ..estimator import UNet, UNetConfig
from ..nn import Module
from ..tensor import Tensor, no_grad
from . import checkpoint as ck
from .audio import AudioClip, DegradationSpec, degrade, load_wav, pad_to_multiple, random_crops, resample, toy_corpus
from .config import TrainConfig, parse_config_text
from .optim import Adam, lr_schedule

log = logging.getLogger("wavelldm.train")

CODEC_RATE = 48000
LOSS_FIELDS = {
    "codec": ("step", "lr", "total", "adv", "mel", "spectral", "fm", "disc"),
    "diffusion": ("step", "lr", "loss"),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_dataset(spec: str) -> list[AudioClip]:
    """``"toy"`` (or ``"toy:<count>:<seed>"``) for the synthetic corpus, else a directory of WAV files."""
    if spec == "toy" or spec.startswith("toy:"):
        parts = spec.split(":")
        count = int(parts[1]) if len(parts) > 1 else 10
        seed = int(parts[2]) if len(parts) > 2 else 0
        clips = toy_corpus(count, seed)
    else:
        root = Path(spec)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset directory {root} does not exist")
        clips = [load_wav(p) for p in sorted(root.glob("*.wav"))]
        clips = [c if c.sample_rate == CODEC_RATE else resample(c, CODEC_RATE) for c in clips]
    if not clips:
        raise ValueError(f"dataset {spec!r} is empty")
    return clips


def _reseed_drop_path(model: Module, seed: int, step: int) -> None:
    # drop-path draws must depend only on (seed, step) for resume to be exact
    for i, m in enumerate(model.modules()):
        if getattr(m, "drop_path", 0.0):
            m.rng = np.random.default_rng([seed, step, i])


def _check_finite(step: int, values: dict[str, float]) -> None:
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        detail = ", ".join(f"{k}={v:.6g}" for k, v in values.items())
        raise TrainingDiverged(f"non-finite loss at step {step} ({', '.join(bad)}); components: {detail}")


class _LossLog:
    def __init__(self, path: Path, fields: tuple[str, ...], append: bool):
        self.path, self.fields = path, fields
        if not append or not path.exists():
            path.write_text("\t".join(fields) + "\n", encoding="utf-8")

    def write(self, row: dict) -> None:
        with self.path.open("a", encoding="utf-8") as f:
            f.write("\t".join(f"{row[k]:.9g}" if k != "step" else str(row[k]) for k in self.fields) + "\n")


def read_loss_log(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split("\t")
    return [{k: (int(v) if k == "step" else float(v)) for k, v in zip(head, line.split("\t"))} for line in lines[1:]]


def _config_entry(cfg: TrainConfig) -> dict[str, np.ndarray]:
    return {"meta.config": ck.text_entry(cfg.to_yaml())}


def checkpoint_config(entries: dict[str, np.ndarray]) -> TrainConfig:
    return parse_config_text(ck.entry_text(entries["meta.config"]))


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def codec_step(codec: Codec, disc: L.MultiPeriodDiscriminator, opt_g: Adam, opt_d: Adam, x: np.ndarray) -> dict:
    """One discriminator update followed by one generator update on the batch ``x``."""
    x = Tensor(x)
    out = codec(x)
    opt_d.zero_grad()
    real, _ = disc(x)
    fake, _ = disc(out.x_hat.detach())
    _, d_loss = L.lsgan_losses(real, fake)
    d_loss.backward()
    opt_d.step()

    opt_g.zero_grad()
    with no_grad():
        real, real_feats = disc(x)
    fake, fake_feats = disc(out.x_hat)
    g_adv, _ = L.lsgan_losses(real, fake)
    parts = L.LossComponents(
        g_adv,
        L.mel_loss(x, out.x_hat),
        L.spectral_loss(x, out.x_hat),
        L.feature_matching_loss(real_feats, fake_feats),
    )
    total = L.total_loss(parts)
    total.backward()
    opt_g.step()
    return {"total": total.item(), **parts.values(), "disc": d_loss.item()}


def _codec_state(codec, disc, opt_g, opt_d, next_step, cfg) -> dict[str, np.ndarray]:
    return {
        **ck.with_prefix("codec", codec.state_dict()),
        **ck.with_prefix("disc", disc.state_dict()),
        **ck.with_prefix("opt.gen", opt_g.state_dict()),
        **ck.with_prefix("opt.disc", opt_d.state_dict()),
        "meta.step": np.array([next_step], np.float32),
        **_config_entry(cfg),
    }


def load_codec(entries: dict[str, np.ndarray]) -> Codec:
    state = ck.strip_prefix("codec", entries)
    if not state:
        raise ValueError("checkpoint holds no codec.* entries")
    codec = Codec()
    codec.load_state_dict(state)
    return codec.eval()


def train_codec(cfg: TrainConfig, clips: list[AudioClip], resume: str | None = None) -> TrainResult:
    if cfg.stage != "codec":
        raise ValueError("train_codec needs a codec-stage config")
    if not clips:
        raise ValueError("dataset is empty")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    codec = Codec(seed=cfg.seed)
    disc = L.MultiPeriodDiscriminator(seed=cfg.seed + 1)
    betas = (cfg.beta1, cfg.beta2)
    opt_g = Adam(codec.named_parameters(), cfg.lr, betas, weight_decay=cfg.weight_decay)
    opt_d = Adam(disc.named_parameters(), cfg.lr, betas, weight_decay=cfg.weight_decay)
    start = 0
    if resume:
        e = ck.load_checkpoint(resume)
        codec.load_state_dict(ck.strip_prefix("codec", e))
        disc.load_state_dict(ck.strip_prefix("disc", e))
        opt_g.load_state_dict(ck.strip_prefix("opt.gen", e))
        opt_d.load_state_dict(ck.strip_prefix("opt.disc", e))
        start = int(e["meta.step"][0])
    codec.check_length(cfg.segment)
    loss_log = _LossLog(out / "loss.tsv", LOSS_FIELDS["codec"], append=bool(resume))
    result = TrainResult(out / "codec.ckpt")
    for step in range(start, cfg.steps):
        lr = lr_schedule(step, cfg.lr, cfg.lr_gamma, cfg.lr_interval)
        opt_g.lr = opt_d.lr = lr
        rng = np.random.default_rng([cfg.seed, step])
        _reseed_drop_path(codec, cfg.seed, step)
        values = codec_step(codec, disc, opt_g, opt_d, random_crops(clips, cfg.batch_size, cfg.segment, rng))
        _check_finite(step, values)
        row = {"step": step, "lr": lr, **values}
        loss_log.write(row)
        result.losses.append(row)
        if step % cfg.log_every == 0:
            log.info("codec step %d total %.4f mel %.4f disc %.4f", step, values["total"], values["mel"], values["disc"])
        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.steps:
            state = _codec_state(codec, disc, opt_g, opt_d, done, cfg)
            ck.save_checkpoint(out / f"codec_step{done:07d}.ckpt", state)
            ck.save_checkpoint(result.checkpoint, state)
    return result


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def schedule_for(T: int) -> VarianceSchedule:
    """The standard 1000-step schedule, or its endpoint-rescaled version for shorter chains."""
    return make_schedule("linear", T) if T == 1000 else scaled_schedule(T)


def clip_latents(codec: Codec, clips: list[AudioClip]) -> np.ndarray:
    """Clean latents of every clip (trimmed to whole latent frames) joined along time, ``(1, C, sum L)``."""
    unit = codec.cfg.samples_per_latent
    parts = []
    with no_grad():
        for c in clips:
            n = c.samples.size - c.samples.size % unit
            if n:
                parts.append(codec.latent(Tensor(c.samples[None, None, :n])).data)
    if not parts:
        raise ValueError(f"every clip is shorter than one latent frame ({unit} samples)")
    return np.concatenate(parts, axis=2)


def masked_batch(x: np.ndarray, mask_ms: float, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(x)
    spec = DegradationSpec("mask", mask_ms)
    for b in range(x.shape[0]):
        out[b, 0] = degrade(AudioClip(x[b, 0], CODEC_RATE), spec, rng)[0].samples
    return out


def diffusion_batch(codec, stats, clips, cfg, rng) -> tuple[np.ndarray, np.ndarray]:
    """Normalized ``(clean, masked)`` latent pair for one step."""
    x = random_crops(clips, cfg.batch_size, cfg.segment, rng)
    xm = masked_batch(x, cfg.mask_ms, rng)
    with no_grad():
        z0 = codec.latent(Tensor(x)).data
        zc = codec.latent(Tensor(xm)).data
    return stats.normalize(z0), stats.normalize(zc)


def _unet_config(cfg: TrainConfig) -> UNetConfig:
    return UNetConfig(c_base=cfg.c_base, time_dim=cfg.time_dim)


def train_diffusion(cfg: TrainConfig, clips: list[AudioClip], codec_checkpoint: str | None = None,
                    resume: str | None = None) -> TrainResult:
    if cfg.stage != "diffusion":
        raise ValueError("train_diffusion needs a diffusion-stage config")
    codec_checkpoint = codec_checkpoint or cfg.codec_checkpoint
    if not codec_checkpoint or not Path(codec_checkpoint).is_file():
        raise FileNotFoundError(
            f"stage 2 needs a trained codec checkpoint; got {codec_checkpoint!r} (run train-codec first)"
        )
    if not clips:
        raise ValueError("dataset is empty")
    codec = load_codec(ck.load_checkpoint(codec_checkpoint))
    model = UNet(_unet_config(cfg), seed=cfg.seed)
    unit = codec.cfg.samples_per_latent * model.cfg.multiple
    if cfg.segment % unit:
        raise ValueError(f"segment {cfg.segment} must be a multiple of {unit} samples (latent frames x U-Net stride)")
    schedule = schedule_for(cfg.timesteps)
    opt = Adam(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay, decoupled=True)
    start = 0
    if resume:
        e = ck.load_checkpoint(resume)
        model.load_state_dict(ck.strip_prefix("unet", e))
        opt.load_state_dict(ck.strip_prefix("opt.unet", e))
        stats = LatentStats(e["stats.mean"], e["stats.std"])
        start = int(e["meta.step"][0])
    else:
        stats = LatentStats.fit(clip_latents(codec, clips))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loss_log = _LossLog(out / "loss.tsv", LOSS_FIELDS["diffusion"], append=bool(resume))
    result = TrainResult(out / "diffusion.ckpt")
    for step in range(start, cfg.steps):
        lr = lr_schedule(step, cfg.lr, cfg.lr_gamma, cfg.lr_interval)
        opt.lr = lr
        rng = np.random.default_rng([cfg.seed, step])
        _reseed_drop_path(model, cfg.seed, step)
        z0, zc = diffusion_batch(codec, stats, clips, cfg, rng)
        opt.zero_grad()
        loss = training_step(z0, zc, model, schedule, rng)
        loss.backward()
        opt.step()
        value = loss.item()
        _check_finite(step, {"loss": value})
        row = {"step": step, "lr": lr, "loss": value}
        loss_log.write(row)
        result.losses.append(row)
        if step % cfg.log_every == 0:
            log.info("diffusion step %d loss %.5f", step, value)
        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.steps:
            state = {
                **ck.with_prefix("codec", codec.state_dict()),
                **ck.with_prefix("unet", model.state_dict()),
                **ck.with_prefix("opt.unet", opt.state_dict()),
                "stats.mean": stats.mean,
                "stats.std": stats.std,
                "meta.step": np.array([done], np.float32),
                **_config_entry(cfg),
            }
            ck.save_checkpoint(out / f"diffusion_step{done:07d}.ckpt", state)
            ck.save_checkpoint(result.checkpoint, state)
    return result


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class Restorer:
    codec: Codec
    model: UNet
    schedule: VarianceSchedule
    stats: LatentStats

    @classmethod
    def from_checkpoint(cls, path) -> "Restorer":
        e = ck.load_checkpoint(path)
        if "stats.mean" not in e:
            raise ValueError(f"{path} is not a diffusion checkpoint (no stats.* entries)")
        cfg = checkpoint_config(e)
        model = UNet(_unet_config(cfg))
        model.load_state_dict(ck.strip_prefix("unet", e))
        return cls(load_codec(e), model.eval(), schedule_for(cfg.timesteps), LatentStats(e["stats.mean"], e["stats.std"]))

    @property
    def unit(self) -> int:
        return self.codec.cfg.samples_per_latent * self.model.cfg.multiple

    def __call__(self, samples: np.ndarray, seed: int = 0) -> np.ndarray:
        """Restore a mono 48 kHz waveform of any length (padded internally, trimmed back)."""
        x, n = pad_to_multiple(np.asarray(samples, np.float32)[None, None], self.unit)
        y = restore(x, self.codec, self.model, self.schedule, seed, self.stats)
        return y[0, 0, :n]
