"""Command-line entry point: ``gmldm <command> [--config FILE] [--seed N] [--out DIR] [--force] [overrides]``.

Parameters resolve as built-in defaults < config file (JSON or YAML) < flags.
Every run writes ``config.json`` (the resolved parameters) into its output
directory; passing that file back via ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .autoencoder import AEConfig, Autoencoder3D, load_autoencoder
from .denoiser import DenoiserConfig, load_denoiser, save_denoiser
from .diffusion import DiffusionConfig, make_schedule
from .errors import ConfigError, GMLDMError, MissingArtifactError, OutputExistsError, ValidationError
from .metrics import difference_saliency, evaluate_pairs
from .training import (
    AblationConfig,
    LatentDiffusionPipeline,
    LatentNormalizer,
    TrainConfig,
    directional_checks,
    pretrain_autoencoder,
    run_ablation_grid,
    substream,
    train_ldm,
    write_ablation_csv,
    write_fold_csv,
    write_history_csv,
)
from .volumes import (
    PhantomSpec,
    Volume3D,
    load_array,
    load_manifest,
    load_manifest_arrays,
    load_volume,
    random_condition,
    region_atlas,
    save_volume,
    write_dataset,
)

logger = logging.getLogger("gmldm")

WORKERS_ENV = "GMLDM_WORKERS"

# --------------------------------------------------------------------------
# parameter tables: name -> (type, default, help). "ints" is a comma list.

PHANTOM = {
    "n": ("int", 500, "number of subjects"),
    "shape": ("ints", (48, 56, 48), "volume shape X,Y,Z"),
    "n_regions": ("int", 8, "number of synthetic regions"),
    "coupling_strength": ("float", 1.0, "FNC-to-intensity coupling in [0, 1]"),
    "noise_sigma": ("float", 0.05, "voxel noise standard deviation"),
    "n_components": ("int", 53, "FNC matrix size K"),
    "patient_fraction": ("float", 0.5, "fraction of patient subjects"),
    "patient_shift": ("float", 0.5, "patient shift of the connectivity loading mean"),
    "coupled_regions": ("ints", None, "only these regions depend on FNC"),
}

AE = {
    "data": ("str", None, "dataset manifest.json"),
    "standardized_shape": ("ints", (32, 32, 32), "shape volumes are resampled to"),
    "base_channels": ("int", 16, "encoder width"),
    "latent_channels": ("int", 256, "latent channels"),
    "alpha": ("float", 1e-5, "KL weight"),
    "kl_reduction": ("str", "mean", "mean or sum"),
    "steps": ("int", 2000, "optimizer steps"),
    "learning_rate": ("float", 2e-4, "AdamW learning rate"),
    "batch_size": ("int", 4, "batch size"),
    "lr_milestones": ("ints", (), "MultiStepLR milestones"),
    "lr_decay": ("float", 0.1, "decay factor at each milestone"),
    "weight_decay": ("float", 0.01, "AdamW weight decay"),
    "grad_clip_norm": ("float", 1.0, "global gradient norm clip"),
}

DENOISER = {
    "patch_size": ("int", 2, "latent patch size"),
    "token_dim": ("int", 128, "transformer width"),
    "n_decoder_layers": ("int", 4, "decoder depth"),
    "n_heads": ("int", 4, "attention heads"),
    "ffn_dim": ("int", 256, "feed-forward width"),
    "cond_channels": ("ints", (16, 32), "condition CNN channels per scale"),
    "cond_dim": ("int", 32, "condition token width"),
    "T": ("int", 50, "diffusion steps"),
    "beta_start": ("float", 1e-4, "first beta"),
    "beta_end": ("float", 0.2, "last beta"),
}

LDM = {
    "data": ("str", None, "dataset manifest.json"),
    "ae": ("str", None, "autoencoder checkpoint; omit for voxel-space diffusion"),
    "condition": ("str", "fnc", "fnc, random or none"),
    **DENOISER,
    "steps": ("int", 2000, "optimizer steps"),
    "learning_rate": ("float", 3e-5, "AdamW learning rate"),
    "batch_size": ("int", 4, "batch size"),
    "lr_milestones": ("ints", (), "MultiStepLR milestones"),
    "lr_decay": ("float", 0.1, "decay factor at each milestone"),
    "weight_decay": ("float", 0.01, "AdamW weight decay"),
    "grad_clip_norm": ("float", 1.0, "global gradient norm clip"),
}

SAMPLE = {
    "model": ("str", None, "trained generator checkpoint (train-ldm output)"),
    "source": ("str", "fnc", "condition source: fnc, random or file"),
    "data": ("str", None, "manifest supplying FNC matrices (fnc/random sources)"),
    "fnc_file": ("str", None, "a K x K matrix in .vol, .npy or .csv form (file source)"),
    "n": ("int", 0, "number of samples; 0 means one per manifest entry"),
    "batch": ("int", 64, "sampling batch size"),
}

EVAL = {
    "real": ("str", None, "manifest.json, samples directory or .vol file"),
    "generated": ("str", None, "manifest.json, samples directory or .vol file"),
}

ABLATE = {
    "data": ("str", None, "dataset manifest.json"),
    "ae": ("str", None, "pretrained autoencoder checkpoint"),
    "folds": ("int", 5, "cross-validation folds"),
    "scratch_ae_steps": ("int", 250, "steps for the non-pretrained autoencoder"),
    **DENOISER,
    "pixel_patch_size": ("int", 8, "patch size of the voxel-space denoiser"),
    "steps": ("int", 450, "denoiser steps per cell"),
    "learning_rate": ("float", 1e-3, "denoiser learning rate"),
    "batch_size": ("int", 8, "denoiser batch size"),
    "workers": ("int", 1, f"parallel fold workers (env {WORKERS_ENV} overrides)"),
}

SALIENCY = {
    "data": ("str", None, "manifest whose phantom spec defines the region atlas"),
    "fnc_samples": ("str", None, "samples directory generated with FNC guidance"),
    "random_samples": ("str", None, "samples directory generated with random-vector guidance"),
}

REPORT = {
    "real": ("str", None, "manifest.json, samples directory or .vol file"),
    "generated": ("str", None, "manifest.json, samples directory or .vol file"),
    "saliency": ("str", None, "saliency.vol to render"),
    "tables": ("strs", (), "CSV files copied into the report"),
    "n_show": ("int", 4, "subjects per montage"),
}

COMMANDS = {
    "gen-data": (PHANTOM, "generate a synthetic phantom cohort"),
    "pretrain-ae": (AE, "pretrain the 3D autoencoder"),
    "train-ldm": (LDM, "train the denoiser (latent or voxel space)"),
    "sample": (SAMPLE, "generate volumes from a trained model"),
    "eval": (EVAL, "Pearson / SSIM of generated vs real volumes"),
    "ablate": (ABLATE, "run the five-cell ablation grid under k-fold CV"),
    "saliency": (SALIENCY, "FNC-guided vs random-guided difference map"),
    "report": (REPORT, "render mid-slice montages and collect tables"),
}


def _parse(kind, raw):
    if raw is None:
        return None
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "str":
        return str(raw)
    if kind in ("ints", "strs"):
        items = raw.split(",") if isinstance(raw, str) else list(raw)
        items = [s.strip() if isinstance(s, str) else s for s in items if s != ""]
        return tuple(int(x) for x in items) if kind == "ints" else tuple(str(x) for x in items)
    raise AssertionError(kind)


def _load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a mapping of parameters")
    return doc


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    table, _ = COMMANDS[command]
    params = {k: v[1] for k, v in table.items()}
    seed = 0
    if args.config:
        doc = dict(_load_config_file(args.config))
        if doc.pop("command", command) != command:
            raise ConfigError(f"config file is for a different command than {command!r}")
        doc.pop("version", None)
        seed = int(doc.pop("seed", seed))
        unknown = set(doc) - set(table)
        if unknown:
            raise ConfigError(f"unknown {command} config keys: {sorted(unknown)}")
        for k, v in doc.items():
            try:
                params[k] = _parse(table[k][0], v)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {k!r}: {v!r}") from e
    for k, (kind, _, _) in table.items():
        raw = getattr(args, k)
        if raw is not None:
            try:
                params[k] = _parse(kind, raw)
            except ValueError as e:
                raise ConfigError(f"bad value for --{k.replace('_', '-')}: {raw!r}") from e
    if args.seed is not None:
        seed = args.seed
    return {"command": command, "version": __version__, "seed": seed, **params}


def _snapshot(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


def prepare_out(out, command: str, force: bool) -> Path:
    if out is None:
        out = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OutputExistsError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{what} not found: {p}")
    return p


# --------------------------------------------------------------------------
# volume collections


def load_collection(path):
    """(ids, volumes) from a manifest.json, a samples directory or one .vol file."""
    p = _existing(path, "volume source")
    if p.is_dir():
        if (p / "manifest.json").exists():
            p = p / "manifest.json"
        elif (p / "samples.csv").exists():
            rows = list(csv.DictReader(open(p / "samples.csv")))
            return [r["sample_id"] for r in rows], [load_volume(p / r["path"]).data for r in rows]
        else:
            raise MissingArtifactError(f"{p} holds neither manifest.json nor samples.csv")
    if p.suffix == ".json":
        m = load_manifest(p)
        return [e.subject_id for e in m.entries], [load_volume(m.resolve(e.volume_path)).data for e in m.entries]
    return [p.stem], [load_volume(p).data]


def _train_cfg(cfg, max_steps, seed_name) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        lr_milestones=cfg.get("lr_milestones", ()),
        lr_decay=cfg.get("lr_decay", 0.1),
        weight_decay=cfg.get("weight_decay", 0.01),
        grad_clip_norm=cfg.get("grad_clip_norm", 1.0),
        max_steps=max_steps,
        seed=substream(cfg["seed"], seed_name),
    )


def _denoiser_cfg(cfg, latent_shape, cond_size, patch_size=None) -> DenoiserConfig:
    return DenoiserConfig(
        latent_shape=tuple(latent_shape),
        patch_size=patch_size or cfg["patch_size"],
        token_dim=cfg["token_dim"],
        n_decoder_layers=cfg["n_decoder_layers"],
        n_heads=cfg["n_heads"],
        ffn_dim=cfg["ffn_dim"],
        cond_size=cond_size,
        cond_channels=cfg["cond_channels"],
        cond_dim=cfg["cond_dim"],
        T=cfg["T"],
    )


def _diffusion_cfg(cfg) -> DiffusionConfig:
    return DiffusionConfig(T=cfg["T"], beta_start=cfg["beta_start"], beta_end=cfg["beta_end"])


# --------------------------------------------------------------------------
# generator checkpoints bundle denoiser, normalizer, schedule and autoencoder


def save_pipeline(pipe: LatentDiffusionPipeline, diffusion: DiffusionConfig, path):
    extra = {
        "normalizer": pipe.normalizer.to_dict(),
        "diffusion": diffusion.to_dict(),
        "volume_shape": list(pipe.volume_shape),
        "condition_mode": pipe.condition_mode,
        "ae": None if pipe.ae is None else {"config": pipe.ae.cfg.to_dict(), "params": pipe.ae.state_dict()},
    }
    save_denoiser(pipe.denoiser, path, extra)


def load_pipeline(path) -> LatentDiffusionPipeline:
    model, extra = load_denoiser(_existing(path, "model checkpoint"))
    ae = None
    if extra.get("ae") is not None:
        ae = Autoencoder3D(AEConfig.from_dict(extra["ae"]["config"]))
        ae.load_state_dict(extra["ae"]["params"])
        ae.eval()
    diffusion = DiffusionConfig(**extra["diffusion"])
    return LatentDiffusionPipeline(
        model, LatentNormalizer.from_dict(extra["normalizer"]), make_schedule(diffusion),
        tuple(extra["volume_shape"]), ae, extra["condition_mode"],
    )


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, out: Path):
    spec = PhantomSpec(
        n_regions=cfg["n_regions"], shape=cfg["shape"], coupling_strength=cfg["coupling_strength"],
        noise_sigma=cfg["noise_sigma"], seed=cfg["seed"], n_components=cfg["n_components"],
        patient_fraction=cfg["patient_fraction"], patient_shift=cfg["patient_shift"],
        coupled_regions=cfg["coupled_regions"],
    )
    manifest = write_dataset(spec, cfg["n"], out)
    logger.info("wrote %d subjects to %s", len(manifest.entries), out)


def cmd_pretrain_ae(cfg, out: Path):
    _require(cfg, "data")
    vols, _, _ = load_manifest_arrays(load_manifest(cfg["data"]))
    ae_cfg = AEConfig(
        standardized_shape=cfg["standardized_shape"], base_channels=cfg["base_channels"],
        latent_channels=cfg["latent_channels"], alpha=cfg["alpha"], kl_reduction=cfg["kl_reduction"],
    )
    model, hist = pretrain_autoencoder(vols, ae_cfg, _train_cfg(cfg, cfg["steps"], "ae"), out / "ae.pt", log_every=100)
    write_history_csv(hist, out / "history.csv")


def cmd_train_ldm(cfg, out: Path):
    _require(cfg, "data")
    if cfg["condition"] not in ("fnc", "random", "none"):
        raise ConfigError(f"--condition must be fnc, random or none, not {cfg['condition']!r}")
    vols, fncs, _ = load_manifest_arrays(load_manifest(cfg["data"]))
    ae = load_autoencoder(_existing(cfg["ae"], "autoencoder checkpoint")) if cfg["ae"] else None
    latent_shape = (1,) + vols.shape[1:] if ae is None else ae.cfg.latent_shape
    dcfg = _denoiser_cfg(cfg, latent_shape, fncs.shape[-1])
    diffusion = _diffusion_cfg(cfg)
    pipe, hist = train_ldm(vols, fncs, ae, dcfg, _train_cfg(cfg, cfg["steps"], "ldm"), diffusion, cfg["condition"], log_every=100)
    save_pipeline(pipe, diffusion, out / "model.pt")
    write_history_csv(hist, out / "history.csv")


def _read_matrix(path) -> np.ndarray:
    p = _existing(path, "FNC file")
    if p.suffix == ".npy":
        return np.load(p)
    if p.suffix == ".csv":
        return np.loadtxt(p, delimiter=",")
    return load_array(p)


def cmd_sample(cfg, out: Path):
    _require(cfg, "model")
    pipe = load_pipeline(cfg["model"])
    source = cfg["source"]
    K = pipe.denoiser.cfg.cond_size
    if source in ("fnc", "random"):
        _require(cfg, "data")
        m = load_manifest(cfg["data"])
        _, fncs, _ = load_manifest_arrays(m)
        ids = [e.subject_id for e in m.entries]
        n = cfg["n"] or len(ids)
        idx = [i % len(ids) for i in range(n)]
        fncs, ids = fncs[idx], [ids[i] for i in idx]
        if source == "random":
            fncs = np.stack([random_condition(f, substream(cfg["seed"], f"rc{i}")) for i, f in enumerate(fncs)])
    elif source == "file":
        _require(cfg, "fnc_file")
        mat = _read_matrix(cfg["fnc_file"])
        n = cfg["n"] or 1
        fncs, ids = np.repeat(mat[None], n, axis=0), [Path(cfg["fnc_file"]).stem] * n
    else:
        raise ConfigError(f"--source must be fnc, random or file, not {source!r}")
    if fncs.shape[1:] != (K, K):
        raise ValidationError(f"conditions are {fncs.shape[1:]}, model expects {K}x{K}")
    gen = pipe.generate(fncs, len(fncs), seed=cfg["seed"], batch=cfg["batch"])
    (out / "volumes").mkdir()
    with open(out / "samples.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "condition_id", "path"])
        for i, (v, cid) in enumerate(zip(gen, ids)):
            rel = f"volumes/gen-{i:05d}.vol"
            save_volume(Volume3D(v), out / rel)
            w.writerow([f"gen-{i:05d}", cid, rel])
    logger.info("wrote %d samples", len(gen))


def cmd_eval(cfg, out: Path):
    _require(cfg, "real", "generated")
    ids, real = load_collection(cfg["real"])
    _, gen = load_collection(cfg["generated"])
    if len(real) != len(gen):
        raise ValidationError(f"{len(real)} real vs {len(gen)} generated volumes")
    rep = evaluate_pairs(real, gen, ids)
    rep.write_csv(out / "metrics.csv")
    summary = {"pearson": rep.pearson, "ssim": rep.ssim, "n_subjects": len(ids), "n_voxels": rep.n_voxels}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    logger.info("pearson %.4f ssim %.4f", rep.pearson, rep.ssim)


def cmd_ablate(cfg, out: Path):
    _require(cfg, "data", "ae")
    vols, fncs, _ = load_manifest_arrays(load_manifest(cfg["data"]))
    ae = load_autoencoder(_existing(cfg["ae"], "autoencoder checkpoint"))
    workers = int(os.environ.get(WORKERS_ENV, cfg["workers"]))
    K = fncs.shape[-1]
    acfg = AblationConfig(
        k_folds=cfg["folds"],
        seed=cfg["seed"],
        scratch_ae_train=TrainConfig(max_steps=cfg["scratch_ae_steps"]),
        ldm_train=TrainConfig(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"], max_steps=cfg["steps"]),
        latent_denoiser=_denoiser_cfg(cfg, ae.cfg.latent_shape, K),
        pixel_denoiser=_denoiser_cfg(cfg, (1,) + vols.shape[1:], K, cfg["pixel_patch_size"]),
        diffusion=_diffusion_cfg(cfg),
        workers=workers,
    )
    cells = run_ablation_grid(vols, fncs, ae, acfg)
    write_ablation_csv(cells, out / "ablation.csv")
    write_fold_csv(cells, out / "ablation_folds.csv")
    if all(c.status == "ok" for c in cells):
        checks = directional_checks(cells)
        (out / "checks.json").write_text(json.dumps(checks, indent=2) + "\n")
    failed = [c.name for c in cells if c.status != "ok"]
    if failed:
        raise GMLDMError(f"ablation cells failed: {failed}")


def cmd_saliency(cfg, out: Path):
    _require(cfg, "data", "fnc_samples", "random_samples")
    spec = load_manifest(cfg["data"], check_files=False).spec
    _, f = load_collection(cfg["fnc_samples"])
    _, r = load_collection(cfg["random_samples"])
    sal = difference_saliency(f, r, region_atlas(spec.n_regions, spec.shape))
    sal.write(out)
    logger.info("region ranking %s", sal.ranking)


# ---- report


def write_pgm(img: np.ndarray, path):
    """8-bit binary PGM; values are clipped to [0, 1]."""
    a = np.clip(np.nan_to_num(img), 0.0, 1.0)
    data = np.round(a * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def mid_slices(vol: np.ndarray) -> list:
    """Axial, coronal and sagittal mid-slices, oriented for display."""
    x, y, z = (s // 2 for s in vol.shape)
    return [np.rot90(vol[:, :, z]), np.rot90(vol[:, y, :]), np.rot90(vol[x, :, :])]


def montage(rows: list, pad: int = 2) -> np.ndarray:
    """Grid of 2D tiles; each cell is padded to the largest tile."""
    th = max(t.shape[0] for r in rows for t in r)
    tw = max(t.shape[1] for r in rows for t in r)
    ncol = max(len(r) for r in rows)
    canvas = np.zeros((len(rows) * (th + pad) + pad, ncol * (tw + pad) + pad))
    for i, r in enumerate(rows):
        for j, t in enumerate(r):
            y0, x0 = pad + i * (th + pad), pad + j * (tw + pad)
            canvas[y0 : y0 + t.shape[0], x0 : x0 + t.shape[1]] = t
    return canvas


def cmd_report(cfg, out: Path):
    if not any(cfg[k] for k in ("real", "generated", "saliency")) and not cfg["tables"]:
        raise ConfigError("nothing to report: give --real/--generated, --saliency or --tables")
    n = cfg["n_show"]
    if cfg["real"] or cfg["generated"]:
        _require(cfg, "real", "generated")
        _, real = load_collection(cfg["real"])
        _, gen = load_collection(cfg["generated"])
        rows = [mid_slices(r) + mid_slices(g) for r, g in zip(real[:n], gen[:n])]
        write_pgm(montage(rows), out / "montage_real_vs_generated.pgm")
        for name, k in (("axial", 0), ("coronal", 1), ("sagittal", 2)):
            write_pgm(montage([[mid_slices(r)[k], mid_slices(g)[k]] for r, g in zip(real[:n], gen[:n])]), out / f"{name}.pgm")
    if cfg["saliency"]:
        sal = load_volume(_existing(cfg["saliency"], "saliency volume")).data
        peak = float(sal.max())
        write_pgm(montage([mid_slices(sal / peak if peak > 0 else sal)]), out / "saliency.pgm")
    for t in cfg["tables"]:
        src = _existing(t, "table")
        dst = out / src.name
        if dst.exists():
            dst = out / f"{src.parent.name}_{src.name}"
        shutil.copyfile(src, dst)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain-ae": cmd_pretrain_ae,
    "train-ldm": cmd_train_ldm,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "saliency": cmd_saliency,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmldm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (table, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON or YAML parameter file")
        sp.add_argument("--seed", type=int, help="root seed (default 0)")
        sp.add_argument("--out", help="output directory (default runs/<command>-<timestamp>)")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        for k, (kind, default, h) in table.items():
            sp.add_argument(f"--{k.replace('_', '-')}", dest=k, default=None, help=f"{h} (default {default})")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args.command, args)
        out = prepare_out(args.out, args.command, args.force)
        (out / "config.json").write_text(json.dumps(_snapshot(cfg), indent=2) + "\n")
        handler = logging.FileHandler(out / "log.txt", mode="w")
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        try:
            HANDLERS[args.command](cfg, out)
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
    except GMLDMError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
