"""Training loops, LR scheduling, k-fold splits, checkpoint/resume, ablation grid."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import AEConfig, Autoencoder3D, ae_objective, save_autoencoder
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DiffusionConfig, NoiseSchedule, make_schedule, sample_loop, train_target
from .errors import ConfigError, NonFiniteError, ValidationError
from .metrics import difference_saliency, evaluate_pairs
from .volumes import PhantomSpec, generate_dataset, random_condition, region_atlas

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# configuration and RNG discipline


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    optimizer: str = "adamw"
    adam_betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    lr_milestones: tuple = ()
    lr_decay: float = 0.1
    max_steps: int = 2000
    seed: int = 0
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ConfigError("lr_milestones must be strictly increasing")
        if self.lr_milestones and self.lr_milestones[0] <= 0:
            raise ConfigError("lr_milestones must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def ae_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"learning_rate": 2e-4, **overrides})


def ldm_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"learning_rate": 3e-5, **overrides})


def substream(root_seed: int, name: str) -> int:
    """Named child seed; ablation cells share every stream they don't vary."""
    ss = np.random.SeedSequence([int(root_seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate used for optimizer step ``step`` (0-based)."""
    n = sum(1 for m in cfg.lr_milestones if step >= m)
    return cfg.learning_rate * cfg.lr_decay ** n


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.adam_betas, weight_decay=cfg.weight_decay)


def make_scheduler(opt, cfg: TrainConfig):
    return torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.lr_milestones), gamma=cfg.lr_decay)


# --------------------------------------------------------------------------
# k-fold


@dataclass
class FoldSplit:
    k: int
    val: list

    def __post_init__(self):
        allidx = np.concatenate(self.val) if self.val else np.array([], dtype=int)
        if len(np.unique(allidx)) != len(allidx):
            raise ValidationError("folds overlap")
        sizes = [len(v) for v in self.val]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValidationError("fold sizes differ by more than one")

    @property
    def n(self) -> int:
        return int(sum(len(v) for v in self.val))

    def train(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([v for i, v in enumerate(self.val) if i != fold]))

    def __iter__(self):
        for i in range(self.k):
            yield self.train(i), self.val[i]


def kfold_split(n: int, k: int = 5, seed: int = 0) -> FoldSplit:
    if k < 2 or n < k:
        raise ValidationError(f"cannot split {n} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return FoldSplit(k, [np.sort(p) for p in np.array_split(perm, k)])


# --------------------------------------------------------------------------
# trainers


def is_converged(history: list, key: str) -> bool:
    """Mean loss over the last 10% of steps below the first 10%."""
    vals = [h[key] for h in history]
    if len(vals) < 10:
        return False
    w = max(1, len(vals) // 10)
    return float(np.mean(vals[-w:])) < float(np.mean(vals[:w]))


def smooth(values: Sequence[float], window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def smoothed_monotone(values: Sequence[float], window: int = 20, n_points: int = 10) -> bool:
    """Window-averaged curve, read at ``n_points`` evenly spaced positions, strictly decreases."""
    s = smooth(values, window)
    if len(values) < window or len(s) < n_points:
        return False
    picks = s[np.linspace(0, len(s) - 1, n_points).round().astype(int)]
    return bool(np.all(np.diff(picks) < 0))


class Trainer:
    """Single-writer optimization loop with exact checkpoint/resume.

    Subclasses implement ``_loss(idx)`` returning (loss, {component: float}).
    """

    loss_keys: tuple = ("loss",)

    def __init__(self, model: torch.nn.Module, n_items: int, cfg: TrainConfig, checkpoint_path=None):
        self.model = model
        self.cfg = cfg
        self.n_items = n_items
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.opt = make_optimizer(model.parameters(), cfg)
        self.sched = make_scheduler(self.opt, cfg)
        self.data_rng = np.random.default_rng(substream(cfg.seed, "data"))
        self.noise_gen = torch.Generator().manual_seed(substream(cfg.seed, "noise"))
        self.step_count = 0
        self.history: list = []
        self.last_grad_norm = float("nan")

    def _loss(self, idx):
        raise NotImplementedError

    def _batch_indices(self):
        replace_ = self.n_items < self.cfg.batch_size
        return np.sort(self.data_rng.choice(self.n_items, self.cfg.batch_size, replace=replace_))

    def step(self) -> dict:
        self.model.train()
        idx = self._batch_indices()
        loss, parts = self._loss(idx)
        if not torch.isfinite(loss):
            where = ""
            if self.checkpoint_path is not None:
                last_good = self.checkpoint_path.with_name(self.checkpoint_path.stem + "_last_good.pt")
                self.save(last_good)
                where = f"; last good state saved to {last_good}"
            raise NonFiniteError(f"non-finite loss at step {self.step_count}{where}")
        lr = self.opt.param_groups[0]["lr"]
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip_norm)
        grads = [p.grad.detach().flatten() for p in self.model.parameters() if p.grad is not None]
        self.last_grad_norm = float(torch.cat(grads).norm()) if grads else 0.0
        self.opt.step()
        self.sched.step()
        self.step_count += 1
        rec = {"step": self.step_count, **parts, "lr": lr}
        self.history.append(rec)
        return rec

    def run(self, n_steps: Optional[int] = None, log_every: int = 0) -> list:
        n_steps = self.cfg.max_steps - self.step_count if n_steps is None else n_steps
        for _ in range(n_steps):
            rec = self.step()
            if log_every and rec["step"] % log_every == 0:
                logger.info("step %d %s", rec["step"], {k: round(v, 6) for k, v in rec.items() if k != "step"})
        return self.history

    def state_dict(self) -> dict:
        return {
            "model": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "opt": self.opt.state_dict(),
            "sched": self.sched.state_dict(),
            "step": self.step_count,
            "data_rng": self.data_rng.bit_generator.state,
            "noise_gen": self.noise_gen.get_state(),
            "history": list(self.history),
        }

    def load_state_dict(self, state: dict):
        self.model.load_state_dict(state["model"])
        self.opt.load_state_dict(state["opt"])
        self.sched.load_state_dict(state["sched"])
        self.step_count = state["step"]
        self.data_rng.bit_generator.state = state["data_rng"]
        self.noise_gen.set_state(state["noise_gen"])
        self.history = list(state["history"])

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)

    def restore(self, path):
        self.load_state_dict(torch.load(path, map_location="cpu", weights_only=False))


class AETrainer(Trainer):
    loss_keys = ("total", "kl", "recon")

    def __init__(self, model: Autoencoder3D, volumes: np.ndarray, cfg: TrainConfig, checkpoint_path=None):
        super().__init__(model, len(volumes), cfg, checkpoint_path)
        self.volumes = torch.as_tensor(np.asarray(volumes, dtype=np.float32))

    def _loss(self, idx):
        x = self.volumes[idx][:, None]
        eps = torch.randn((len(idx),) + self.model.cfg.latent_shape, generator=self.noise_gen)
        total, kl, rec = ae_objective(self.model, x, eps)
        return total, {"total": total.item(), "kl": kl.item(), "recon": rec.item()}


def random_condition_batch(n: int, K: int, gen: torch.Generator) -> torch.Tensor:
    """Torch twin of ``volumes.random_condition`` for a batch."""
    g = torch.randn(n, K, K, generator=gen)
    upper = torch.triu(g, diagonal=1)
    out = upper + upper.transpose(1, 2)
    out.diagonal(dim1=1, dim2=2).fill_(1.0)
    return out


class LDMTrainer(Trainer):
    loss_keys = ("loss",)

    def __init__(
        self,
        model: Denoiser,
        latents: torch.Tensor,
        conds: Optional[torch.Tensor],
        schedule: NoiseSchedule,
        cfg: TrainConfig,
        condition_mode: str = "fnc",
        checkpoint_path=None,
        min_snr_gamma: Optional[float] = 5.0,
    ):
        super().__init__(model, len(latents), cfg, checkpoint_path)
        if min_snr_gamma is not None and min_snr_gamma <= 0:
            raise ConfigError("min_snr_gamma must be positive")
        self.min_snr_gamma = min_snr_gamma
        if condition_mode not in ("fnc", "random", "none"):
            raise ConfigError(f"unknown condition mode {condition_mode!r}")
        if condition_mode == "fnc" and conds is None:
            raise ConfigError("fnc conditioning needs connectivity matrices")
        self.latents = latents
        self.conds = conds
        self.schedule = schedule
        self.condition_mode = condition_mode

    def _cond(self, idx):
        if self.condition_mode == "fnc":
            return self.conds[idx]
        if self.condition_mode == "random":
            return random_condition_batch(len(idx), self.model.cfg.cond_size, self.noise_gen)
        return None

    def _loss(self, idx):
        z0 = self.latents[idx]
        t = torch.randint(1, self.schedule.T + 1, (len(idx),), generator=self.noise_gen)
        eps = torch.randn(z0.shape, generator=self.noise_gen)
        c = self._cond(idx)
        z_t, target = train_target(z0, t, eps, self.schedule)
        per_sample = (self.model(z_t, t, c) - target).pow(2).flatten(1).mean(1)
        if self.min_snr_gamma is None:
            loss = per_sample.mean()
        else:
            # In clean-latent terms the weight is clamp(SNR, 1, gamma): the cap stops
            # the t=1 terms (SNR ~ 1e4) dominating, the floor keeps the high-noise
            # steps, where only the condition is informative, from vanishing.
            ab = torch.as_tensor(self.schedule.alpha_bars, dtype=per_sample.dtype)[t - 1]
            snr = ab / (1 - ab)
            loss = (per_sample * snr.clamp(1.0, self.min_snr_gamma) / snr).mean()
        return loss, {"loss": loss.item()}


# --------------------------------------------------------------------------
# latent normalization and generation


@dataclass
class LatentNormalizer:
    """Affine map latent -> diffusion space: per-element mean, one shared scale.

    The latents are strongly correlated and occupy few directions. The scale is
    chosen from the largest principal variance so that, at the last diffusion
    step, the data still carries at most ``terminal_snr`` of the noise variance
    along any direction. Per-element standardization would pile thousands of
    units of variance onto the leading directions and the chain would never
    reach its N(0, I) prior.
    """

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def fit(cls, latents: torch.Tensor, alpha_bar_T: float = 0.1, terminal_snr: float = 0.05) -> "LatentNormalizer":
        mean = latents.mean(0)
        scale = 1.0
        if len(latents) > 1:
            centered = (latents - mean).reshape(len(latents), -1).double()
            top_var = float(torch.linalg.matrix_norm(centered, ord=2)) ** 2 / (len(latents) - 1)
            scale = max(math.sqrt(top_var * alpha_bar_T / terminal_snr), 1e-8)
        return cls(mean, torch.full_like(mean, scale))

    @classmethod
    def pixel(cls, shape) -> "LatentNormalizer":
        return cls(torch.full(tuple(shape), 0.5), torch.full(tuple(shape), 0.5))

    def normalize(self, z):
        return (z - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.clone(), "std": self.std.clone()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


def encode_volumes(ae: Autoencoder3D, volumes: np.ndarray, batch: int = 32) -> torch.Tensor:
    ae.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(volumes), batch):
            x = torch.as_tensor(np.asarray(volumes[i : i + batch], dtype=np.float32))[:, None]
            out.append(ae.encode(x).mu)
    return torch.cat(out)


@dataclass
class LatentDiffusionPipeline:
    """Trained generator: optional autoencoder + denoiser + latent normalizer.

    Without an autoencoder the diffusion runs directly on voxels (pixel mode).
    """

    denoiser: Denoiser
    normalizer: LatentNormalizer
    schedule: NoiseSchedule
    volume_shape: tuple
    ae: Optional[Autoencoder3D] = None
    condition_mode: str = "fnc"

    @property
    def pixel_space(self) -> bool:
        return self.ae is None

    def generate(self, conds: Optional[np.ndarray], n: int, seed: int, batch: int = 64) -> np.ndarray:
        """Sample ``n`` volumes; ``conds`` is (n, K, K) or None for the null path."""
        self.denoiser.eval()
        out = []
        for b0 in range(0, n, batch):
            nb = min(batch, n - b0)
            c = None if conds is None else torch.as_tensor(np.asarray(conds[b0 : b0 + nb], dtype=np.float32))

            def fn(z, t, cond):
                with torch.no_grad():
                    return self.denoiser(z, t, cond)

            shape = (nb,) + self.denoiser.cfg.latent_shape
            z = sample_loop(fn, c, shape, self.schedule, seed=substream(seed, f"batch{b0}"))
            z = self.normalizer.denormalize(z)
            if self.pixel_space:
                vols = z[:, 0]
            else:
                self.ae.eval()
                with torch.no_grad():
                    vols = self.ae.decode(z, self.volume_shape)[:, 0]
            out.append(vols.numpy().astype(np.float32))
        return np.concatenate(out)


def pretrain_autoencoder(volumes: np.ndarray, ae_config: AEConfig, train_config: TrainConfig, checkpoint_path=None, log_every=0):
    """Train the autoencoder on a volume pool. Returns (model, history)."""
    if len(volumes) == 0:
        raise ValidationError("empty dataset")
    torch.manual_seed(substream(train_config.seed, "init"))
    model = Autoencoder3D(ae_config)
    trainer = AETrainer(model, volumes, train_config, checkpoint_path)
    history = trainer.run(log_every=log_every)
    if history and not is_converged(history, "total"):
        logger.warning("autoencoder loss did not decrease over the run (non-converged)")
    model.eval()
    if checkpoint_path is not None:
        save_autoencoder(model, checkpoint_path)
    return model, history


def train_ldm(
    volumes: np.ndarray,
    fncs: Optional[np.ndarray],
    ae: Optional[Autoencoder3D],
    denoiser_config: DenoiserConfig,
    train_config: TrainConfig,
    diffusion_config: DiffusionConfig = None,
    condition_mode: str = "fnc",
    log_every: int = 0,
    min_snr_gamma: Optional[float] = 5.0,
):
    """Train the denoiser in latent space (or voxel space if ``ae`` is None).

    Returns (pipeline, history); ``pipeline.denoiser`` holds the trained params.
    """
    diffusion_config = diffusion_config or DiffusionConfig()
    schedule = make_schedule(diffusion_config)
    volume_shape = tuple(volumes.shape[1:])
    if ae is None:
        data = torch.as_tensor(np.asarray(volumes, dtype=np.float32))[:, None]
        normalizer = LatentNormalizer.pixel(data.shape[1:])
    else:
        data = encode_volumes(ae, volumes)
        normalizer = LatentNormalizer.fit(data, float(schedule.alpha_bars[-1]))
    latents = normalizer.normalize(data)
    if tuple(latents.shape[1:]) != denoiser_config.latent_shape:
        raise ConfigError(f"denoiser latent_shape {denoiser_config.latent_shape} != data {tuple(latents.shape[1:])}")
    denoiser_config = replace(denoiser_config, T=diffusion_config.T)
    torch.manual_seed(substream(train_config.seed, "init"))
    model = Denoiser(denoiser_config)
    model.set_schedule(schedule.alpha_bars)
    model.set_prior(latents)
    conds = None if fncs is None else torch.as_tensor(np.asarray(fncs, dtype=np.float32))
    trainer = LDMTrainer(model, latents, conds, schedule, train_config, condition_mode, min_snr_gamma=min_snr_gamma)
    history = trainer.run(log_every=log_every)
    model.eval()
    pipe = LatentDiffusionPipeline(model, normalizer, schedule, volume_shape, ae, condition_mode)
    return pipe, history


def write_history_csv(history: list, path):
    if not history:
        Path(path).write_text("step\n")
        return
    keys = list(history[0])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for h in history:
            w.writerow([h[k] if k == "step" else repr(float(h[k])) for k in keys])


# --------------------------------------------------------------------------
# ablation grid

PAPER_TABLE1 = {
    "Baseline-1": (0.78, 0.77),
    "Baseline-2": (0.79, 0.79),
    "Comparison-1": (0.86, 0.84),
    "Comparison-2": (0.83, 0.82),
    "GM-LDM": (0.89, 0.86),
}

# name -> (model, pretrained, condition)
TABLE1_CELLS = {
    "Baseline-1": ("diffusion_pixel", False, "random_vector"),
    "Baseline-2": ("ldm", False, "random_vector"),
    "Comparison-1": ("ldm", True, "random_vector"),
    "Comparison-2": ("ldm", False, "fnc"),
    "GM-LDM": ("ldm", True, "fnc"),
}


@dataclass
class AblationCell:
    name: str
    model: str
    pretrained: bool
    condition: str
    fold_pearson: list = field(default_factory=list)
    fold_ssim: list = field(default_factory=list)
    status: str = "ok"

    def __post_init__(self):
        if self.name not in TABLE1_CELLS:
            raise ValidationError(f"unknown ablation cell {self.name!r}")

    @property
    def pearson(self) -> float:
        return float(np.mean(self.fold_pearson)) if self.fold_pearson else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean(self.fold_ssim)) if self.fold_ssim else float("nan")

    @property
    def pearson_se(self) -> float:
        return _se(self.fold_pearson)

    @property
    def ssim_se(self) -> float:
        return _se(self.fold_ssim)


def _se(values) -> float:
    if len(values) < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


@dataclass
class AblationConfig:
    k_folds: int = 5
    seed: int = 0
    scratch_ae_train: TrainConfig = field(default_factory=lambda: ae_train_config(max_steps=250))
    ldm_train: TrainConfig = field(default_factory=lambda: ldm_train_config(max_steps=450, batch_size=8, learning_rate=1e-3))
    pixel_train: Optional[TrainConfig] = None
    latent_denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    pixel_denoiser: Optional[DenoiserConfig] = None
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    cells: tuple = tuple(TABLE1_CELLS)
    workers: int = 1


def _fold_job(args):
    fold, train_idx, val_idx, vols, fncs, pretrained_ae_state, ae_cfg_dict, cfg = args
    if cfg.workers > 1:
        torch.set_num_threads(1)
    pretrained = None
    if pretrained_ae_state is not None:
        pretrained = Autoencoder3D(AEConfig.from_dict(ae_cfg_dict))
        pretrained.load_state_dict(pretrained_ae_state)
        pretrained.eval()
    vtr, ftr = vols[train_idx], fncs[train_idx]
    vva, fva = vols[val_idx], fncs[val_idx]
    fold_seed = substream(cfg.seed, f"fold{fold}")
    random_conds = np.stack([random_condition(f, substream(fold_seed, f"rc{i}")) for i, f in enumerate(fva)])
    scratch_ae = None
    results = {}
    for name in cfg.cells:
        model, is_pre, cond = TABLE1_CELLS[name]
        try:
            if model == "diffusion_pixel":
                ae = None
                pixel_shape = (1,) + tuple(vols.shape[1:])
                dcfg = cfg.pixel_denoiser or replace(cfg.latent_denoiser, latent_shape=pixel_shape, patch_size=8)
                tcfg = cfg.pixel_train or cfg.ldm_train
            else:
                if is_pre:
                    if pretrained is None:
                        raise ConfigError("pretrained cell needs a pretrained autoencoder")
                    ae = pretrained
                else:
                    if scratch_ae is None:
                        scratch_cfg = AEConfig.from_dict(ae_cfg_dict)
                        scratch_ae, _ = pretrain_autoencoder(
                            vtr, scratch_cfg, replace(cfg.scratch_ae_train, seed=substream(fold_seed, "scratch_ae"))
                        )
                    ae = scratch_ae
                dcfg, tcfg = cfg.latent_denoiser, cfg.ldm_train
            mode = "fnc" if cond == "fnc" else "random"
            # cells share data/noise streams; only the declared factors differ
            tcfg = replace(tcfg, seed=substream(fold_seed, "ldm"))
            pipe, _ = train_ldm(vtr, ftr, ae, dcfg, tcfg, cfg.diffusion, mode)
            eval_conds = fva if cond == "fnc" else random_conds
            gen = pipe.generate(eval_conds, len(val_idx), seed=substream(fold_seed, "sample"))
            rep = evaluate_pairs(list(vva), list(gen))
            results[name] = (rep.pearson, rep.ssim, "ok")
            logger.info("fold %d %s pearson=%.4f ssim=%.4f", fold, name, rep.pearson, rep.ssim)
        except (ValidationError, NonFiniteError) as e:
            logger.error("fold %d cell %s failed: %s", fold, name, e)
            results[name] = (float("nan"), float("nan"), f"failed: {e}")
    return fold, results


def run_ablation_grid(volumes: np.ndarray, fncs: np.ndarray, pretrained_ae: Optional[Autoencoder3D], cfg: AblationConfig):
    """Train and evaluate every Table-1 cell under k-fold CV. Returns [AblationCell]."""
    split = kfold_split(len(volumes), cfg.k_folds, substream(cfg.seed, "folds"))
    state = None if pretrained_ae is None else {k: v.clone() for k, v in pretrained_ae.state_dict().items()}
    ae_cfg = (pretrained_ae.cfg if pretrained_ae is not None else AEConfig(standardized_shape=volumes.shape[1:])).to_dict()
    jobs = [(i, tr, va, volumes, fncs, state, ae_cfg, cfg) for i, (tr, va) in enumerate(split)]
    workers = max(1, int(cfg.workers))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            outputs = list(ex.map(_fold_job, jobs))
    else:
        outputs = [_fold_job(j) for j in jobs]
    cells = {n: AblationCell(n, *TABLE1_CELLS[n]) for n in cfg.cells}
    for _, results in sorted(outputs, key=lambda o: o[0]):
        for name, (p, s, status) in results.items():
            if status != "ok":
                cells[name].status = "failed"
                continue
            cells[name].fold_pearson.append(p)
            cells[name].fold_ssim.append(s)
    return [cells[n] for n in TABLE1_CELLS if n in cells]


def write_ablation_csv(cells: Sequence[AblationCell], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["Name", "Model", "Pretrained", "Condition", "PearsonCorr", "SSIM", "PearsonSE", "SSIMSE", "Status"])
        for c in cells:
            w.writerow([
                c.name, c.model, "Yes" if c.pretrained else "No",
                "FNC" if c.condition == "fnc" else "Random-vector",
                f"{c.pearson:.6f}", f"{c.ssim:.6f}", f"{c.pearson_se:.6f}", f"{c.ssim_se:.6f}", c.status,
            ])


def write_fold_csv(cells: Sequence[AblationCell], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["Name", "Fold", "PearsonCorr", "SSIM"])
        for c in cells:
            for i, (p, s) in enumerate(zip(c.fold_pearson, c.fold_ssim)):
                w.writerow([c.name, i, f"{p:.10f}", f"{s:.10f}"])


def margin_check(a: AblationCell, b: AblationCell) -> dict:
    """Is cell a's mean Pearson above b's by more than 2x the standard error of
    the difference of the two fold means?"""
    margin = a.pearson - b.pearson
    se = math.sqrt(a.pearson_se ** 2 + b.pearson_se ** 2)
    return {"better": a.name, "worse": b.name, "margin": margin, "threshold": 2 * se, "passed": bool(margin > 2 * se)}


def directional_checks(cells: Sequence[AblationCell]) -> list:
    by = {c.name: c for c in cells}
    return [margin_check(by["GM-LDM"], by["Comparison-1"]), margin_check(by["Comparison-1"], by["Baseline-2"])]


# --------------------------------------------------------------------------
# saliency experiment


def saliency_from_pipelines(fnc_pipe, spec: PhantomSpec, n_generate: int, seed: int = 0, random_pipe=None):
    """Patient-FNC-guided generations vs random-vector-guided ones, scored per region.

    ``random_pipe`` defaults to ``fnc_pipe``: the same trained cell is then fed
    random vectors as its null guidance.
    """
    random_pipe = random_pipe or fnc_pipe
    patient_spec = replace(spec, patient_fraction=1.0, seed=substream(seed, "patients"))
    _, patient_fncs, _ = generate_dataset(patient_spec, n_generate)
    rconds = np.stack([random_condition(f, substream(seed, f"rc{i}")) for i, f in enumerate(patient_fncs)])
    fnc_gen = fnc_pipe.generate(patient_fncs, n_generate, seed=substream(seed, "sample_fnc"))
    rnd_gen = random_pipe.generate(rconds, n_generate, seed=substream(seed, "sample_rnd"))
    atlas = region_atlas(spec.n_regions, spec.shape)
    return difference_saliency(list(fnc_gen), list(rnd_gen), atlas)


def saliency_experiment(
    spec: PhantomSpec,
    n_train: int,
    n_generate: int,
    ae: Autoencoder3D,
    denoiser_config: DenoiserConfig,
    train_config: TrainConfig,
    diffusion_config: DiffusionConfig = None,
    seed: int = 0,
    separate_random_cell: bool = False,
):
    """Train an FNC-conditioned cell on ``spec`` and compute its saliency map.

    With ``separate_random_cell`` the random arm comes from a second cell trained
    on random vectors (the Comparison-1 analogue) instead of the FNC cell itself.
    """
    vols, fncs, _ = generate_dataset(spec, n_train)
    tcfg = replace(train_config, seed=substream(seed, "ldm"))
    fnc_pipe, _ = train_ldm(vols, fncs, ae, denoiser_config, tcfg, diffusion_config, "fnc")
    rnd_pipe = None
    if separate_random_cell:
        rnd_pipe, _ = train_ldm(vols, fncs, ae, denoiser_config, tcfg, diffusion_config, "random")
    return saliency_from_pipelines(fnc_pipe, spec, n_generate, seed, rnd_pipe)
