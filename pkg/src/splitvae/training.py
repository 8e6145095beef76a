"""Optimisation loop, validation and checkpoints.

Every source of randomness in a run (crop positions, batch order, latent
draws) is derived from ``TrainConfig.seed`` and the epoch/step index, so a run
resumed from a checkpoint continues exactly as an uninterrupted one would.
"""

import contextlib
import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import metrics
from .data import extract_patches
from .objective import Batch, total_loss
from .vse import VseConfig, VseModel

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_COLUMNS = (
    "epoch",
    "train_loss",
    "val_loss",
    "recon1",
    "recon2",
    "kl",
    "val_ri_psnr_ch1",
    "val_ri_psnr_ch2",
)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    patience: int = 10
    patches_per_image: int = 16
    val_patches_per_image: int = 4
    precision: str = "32"
    seed: int = 0
    grad_clip: float = 0.0
    time_limit_s: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.precision not in ("32", "bf16"):
            raise ValueError(f"precision must be '32' or 'bf16', got {self.precision!r}")

    def to_dict(self):
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: VseModel
    history: list
    best_epoch: int
    best_val_loss: float
    last_checkpoint: str = None
    best_checkpoint: str = None
    extra: dict = field(default_factory=dict)


def _seed_from(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_batch(model, samples):
    """Stack ``SplitSample`` patches into a :class:`Batch` on the model's dtype."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.stack([s.input for s in samples])[:, None], dtype=dtype)
    targets = torch.as_tensor(np.stack([np.stack([s.target1, s.target2]) for s in samples]), dtype=dtype)
    return Batch(x=model.normalize_input(x), targets=targets)


def normalization_stats(samples):
    flat = np.concatenate([s.input.ravel() for s in samples])
    return float(flat.mean()), float(flat.std())


def validation_patches(samples, patch, count, seed):
    out = []
    for idx, s in enumerate(samples):
        out.extend(extract_patches(s, patch, count, seed=_seed_from(seed, 7919, idx)))
    return out


@torch.no_grad()
def validate(model, samples, noise_models=None, batch_size=16):
    """Deterministic validation on ``samples`` (patches of the model's size or larger).

    Latents are set to their posterior means. RI-PSNR compares the raw
    prediction with the clean channels when they are known and with the noisy
    targets otherwise; patches with a constant reference are left out of it.

    Returns
    -------
    dict with ``loss``, ``recon1``, ``recon2``, ``kl``, ``ri_psnr_ch1`` and ``ri_psnr_ch2``
    """
    was_training = model.training
    model.eval()
    sums = {"loss": 0.0, "recon1": 0.0, "recon2": 0.0, "kl": 0.0}
    psnr = {1: [], 2: []}
    n = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = make_batch(model, chunk)
        loss, parts = total_loss(model, batch, noise_models, mode="posterior_mean")
        w = len(chunk)
        sums["loss"] += w * loss.item()
        for key in ("recon1", "recon2", "kl"):
            sums[key] += w * parts[key].item()
        n += w
        raw = model.to_raw(parts["pred"]).double().numpy()
        for i, s in enumerate(chunk):
            refs = (s.clean1, s.clean2) if s.has_clean else (s.target1, s.target2)
            for ch in (1, 2):
                # RI-PSNR is undefined on a constant reference (empty background crop)
                if np.ptp(refs[ch - 1]) > 0:
                    psnr[ch].append(metrics.ri_psnr(raw[i, ch - 1], refs[ch - 1]))
    model.train(was_training)
    out = {k: v / n for k, v in sums.items()}
    for ch in (1, 2):
        out[f"ri_psnr_ch{ch}"] = float(np.mean(psnr[ch])) if psnr[ch] else math.nan
    return out


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _arrays_from_state(state, prefix):
    return {f"{prefix}/{k}": v.detach().cpu().numpy().astype("<f4") for k, v in state.items()}


def save_checkpoint(path, model, step=0, epoch=0, optimizer=None, extra=None, best_state=None):
    """Write a versioned ``.npz`` container: JSON metadata plus float32 tensors."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "step": int(step),
        "epoch": int(epoch),
        "extra": extra or {},
    }
    arrays = _arrays_from_state(model.state_dict(), "param")
    if best_state is not None:
        arrays.update(_arrays_from_state(best_state, "best"))
    if optimizer is not None:
        opt = optimizer.state_dict()
        meta["optimizer"] = {"param_groups": opt["param_groups"], "state_keys": {}}
        for idx, st in opt["state"].items():
            meta["optimizer"]["state_keys"][str(idx)] = sorted(st)
            for key, val in st.items():
                arrays[f"opt/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().astype("<f4")
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def _state_from_arrays(arrays, prefix, reference):
    return {
        k: torch.as_tensor(arrays[f"{prefix}/{k}"].astype(np.float32)).to(reference[k].dtype).reshape(reference[k].shape)
        for k in reference
    }


def load_checkpoint(path, optimizer_factory=None):
    """Load a checkpoint; returns ``(model, meta, optimizer_or_None, best_state_or_None)``."""
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    model = VseModel(VseConfig(**meta["config"]))
    reference = model.state_dict()
    model.load_state_dict(_state_from_arrays(arrays, "param", reference))
    best_state = None
    if any(k.startswith("best/") for k in arrays):
        best_state = _state_from_arrays(arrays, "best", reference)
    optimizer = None
    if optimizer_factory is not None and "optimizer" in meta:
        optimizer = optimizer_factory(model)
        opt_meta = meta["optimizer"]
        state = {}
        for idx, keys in opt_meta["state_keys"].items():
            state[int(idx)] = {}
            for key in keys:
                val = torch.as_tensor(arrays[f"opt/{idx}/{key}"].astype(np.float32))
                state[int(idx)][key] = val.reshape(()) if key == "step" else val
        optimizer.load_state_dict({"state": state, "param_groups": opt_meta["param_groups"]})
    return model, meta, optimizer, best_state


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRICS_COLUMNS})


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def _make_optimizer(lr):
    return lambda model: torch.optim.Adam(model.parameters(), lr=lr)


def train(
    model_config,
    train_config,
    split,
    noise_models=None,
    out_dir=None,
    resume_from=None,
    stop_after_epoch=None,
):
    """Train a :class:`VseModel` on ``split.train`` with validation on ``split.val``.

    Parameters
    ----------
    model_config : VseConfig
    train_config : TrainConfig
    split : DatasetSplit
    noise_models : (GmmNoiseModel, GmmNoiseModel), optional
        Needed for the ``noise_model`` likelihood head.
    out_dir : str, optional
        Where ``last.ckpt``, ``best.ckpt`` and ``metrics.csv`` are written.
    resume_from : str, optional
        A ``last.ckpt`` of an earlier run with the same configuration.
    stop_after_epoch : int, optional
        Stop (as if interrupted) once this epoch has finished.

    Returns
    -------
    TrainResult
        Holds the model with the best validation weights loaded.
    """
    tc = train_config
    if not split.train or not split.val:
        raise ValueError("training needs non-empty train and val splits")
    patch = model_config.patch
    make_opt = _make_optimizer(tc.lr)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    if resume_from:
        model, meta, optimizer, best_state = load_checkpoint(resume_from, make_opt)
        if optimizer is None:
            optimizer = make_opt(model)
        extra = meta["extra"]
        history = extra["history"]
        start_epoch = meta["epoch"] + 1
        step = meta["step"]
        best_val = extra["best_val_loss"]
        best_epoch = extra["best_epoch"]
        stale = extra["stale_epochs"]
    else:
        torch.manual_seed(tc.seed)
        model = VseModel(model_config)
        model.set_normalization(*normalization_stats(split.train))
        optimizer = make_opt(model)
        history, start_epoch, step = [], 1, 0
        best_val, best_epoch, stale, best_state = math.inf, 0, 0, None

    val_patches = validation_patches(split.val, patch, tc.val_patches_per_image, tc.seed)
    last_path = os.path.join(out_dir, "last.ckpt") if out_dir else None
    best_path = os.path.join(out_dir, "best.ckpt") if out_dir else None
    autocast = (
        torch.autocast("cpu", dtype=torch.bfloat16) if tc.precision == "bf16" else contextlib.nullcontext()
    )
    t0 = time.monotonic()

    for epoch in range(start_epoch, tc.epochs + 1):
        model.train()
        patches = []
        for idx, s in enumerate(split.train):
            patches.extend(extract_patches(s, patch, tc.patches_per_image, seed=_seed_from(tc.seed, epoch, idx)))
        order = np.random.default_rng(_seed_from(tc.seed, epoch, 104729)).permutation(len(patches))
        sums = {"train_loss": 0.0, "recon1": 0.0, "recon2": 0.0, "kl": 0.0}
        n_batches = 0
        for start in range(0, len(order), tc.batch_size):
            batch = make_batch(model, [patches[i] for i in order[start : start + tc.batch_size]])
            gen = torch.Generator().manual_seed(_seed_from(tc.seed, epoch, step))
            with autocast:
                loss, parts = total_loss(model, batch, noise_models, generator=gen)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}, step {step}; "
                    f"last good checkpoint: {last_path}",
                    checkpoint=last_path,
                )
            optimizer.zero_grad()
            loss.backward()
            if tc.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            optimizer.step()
            step += 1
            n_batches += 1
            sums["train_loss"] += loss.item()
            for key in ("recon1", "recon2", "kl"):
                sums[key] += parts[key].item()

        val = validate(model, val_patches, noise_models, tc.batch_size)
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        row.update(
            val_loss=val["loss"],
            val_ri_psnr_ch1=val["ri_psnr_ch1"],
            val_ri_psnr_ch2=val["ri_psnr_ch2"],
        )
        history.append(row)
        logger.info(
            "epoch %d train %.4g val %.4g psnr %.2f/%.2f",
            epoch,
            row["train_loss"],
            row["val_loss"],
            row["val_ri_psnr_ch1"],
            row["val_ri_psnr_ch2"],
        )
        if not math.isfinite(val["loss"]):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", checkpoint=last_path)

        if val["loss"] < best_val:
            best_val, best_epoch, stale = val["loss"], epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if best_path:
                save_checkpoint(best_path, model, step, epoch, extra={"best_val_loss": best_val})
        else:
            stale += 1

        extra = {
            "history": history,
            "best_val_loss": best_val,
            "best_epoch": best_epoch,
            "stale_epochs": stale,
            "train_config": tc.to_dict(),
        }
        if last_path:
            save_checkpoint(last_path, model, step, epoch, optimizer, extra=extra, best_state=best_state)
            write_metrics_csv(history, os.path.join(out_dir, "metrics.csv"))

        if stale >= tc.patience:
            logger.info("early stopping after epoch %d", epoch)
            break
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
        if tc.time_limit_s and time.monotonic() - t0 > tc.time_limit_s:
            logger.info("time limit reached after epoch %d", epoch)
            break

    final = VseModel(model.config)
    final.load_state_dict(best_state if best_state is not None else model.state_dict())
    final.eval()
    return TrainResult(
        model=final,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        last_checkpoint=last_path,
        best_checkpoint=best_path,
        extra={"trained_model": model, "optimizer": optimizer, "step": step},
    )
