import csv
import math

import numpy as np
import pytest
import torch

from splitvae import training
from splitvae.data import SplitSample
from splitvae.training import TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train, validate
from splitvae.vse import VseModel


def fast_config(**kw):
    base = dict(epochs=2, batch_size=4, patches_per_image=2, val_patches_per_image=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(precision="16")
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_one_epoch_log(tmp_path, tiny_split, tiny_config):
    train(tiny_config, fast_config(epochs=1), tiny_split, out_dir=tmp_path)
    rows = read_rows(tmp_path / "metrics.csv")
    assert len(rows) == 1
    assert list(rows[0]) == list(training.METRICS_COLUMNS)
    assert math.isfinite(float(rows[0]["train_loss"])) and math.isfinite(float(rows[0]["val_loss"]))
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()


def test_seeded_runs_identical(tiny_split, tiny_config):
    a = train(tiny_config, fast_config(), tiny_split)
    b = train(tiny_config, fast_config(), tiny_split)
    assert a.history == b.history
    for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_resume_matches_uninterrupted(tmp_path, tiny_split, tiny_config):
    cfg = fast_config(epochs=3)
    full = train(tiny_config, cfg, tiny_split, out_dir=tmp_path / "full")
    train(tiny_config, cfg, tiny_split, out_dir=tmp_path / "part", stop_after_epoch=1)
    resumed = train(tiny_config, cfg, tiny_split, out_dir=tmp_path / "part", resume_from=str(tmp_path / "part" / "last.ckpt"))
    assert [r["epoch"] for r in resumed.history] == [1, 2, 3]
    for a, b in zip(full.history, resumed.history):
        for key in ("train_loss", "val_loss", "kl"):
            assert a[key] == pytest.approx(b[key], rel=1e-6, abs=1e-6)


def test_checkpoint_roundtrip(tmp_path, tiny_split, tiny_config):
    result = train(tiny_config, fast_config(epochs=1), tiny_split)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, result.model, step=7, epoch=1)
    loaded, meta, _, _ = load_checkpoint(path)
    assert meta["step"] == 7 and meta["config"] == tiny_config.to_dict()
    patches = training.validation_patches(tiny_split.val, 16, 3, seed=0)
    a = validate(result.model, patches)
    b = validate(loaded, patches)
    for key in a:
        assert a[key] == pytest.approx(b[key], rel=1e-6, abs=1e-6)


def test_checkpoint_format(tmp_path, tiny_config):
    model = VseModel(tiny_config)
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(path, model)
    with np.load(path) as npz:
        params = [k for k in npz.files if k.startswith("param/")]
        assert params and all(npz[k].dtype == np.dtype("<f4") for k in params)
    bad = dict(np.load(path))
    bad["__meta__"] = np.frombuffer(b'{"version": 99}', dtype=np.uint8)
    np.savez(tmp_path / "bad.npz", **bad)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(str(tmp_path / "bad.npz"))


def test_validate_deterministic_and_capped(tiny_split, tiny_config):
    model = VseModel(tiny_config)
    patches = training.validation_patches(tiny_split.val, 16, 2, seed=1)
    assert validate(model, patches) == validate(model, patches)

    class Oracle(VseModel):
        """Predicts the clean channels exactly (in standardised units)."""

        def __init__(self, cfg, target):
            super().__init__(cfg)
            self.target = target

        def forward(self, x, mode="stochastic", generator=None):
            pred, h = super().forward(x, mode, generator)
            return self.normalize_targets(self.target), h

    p = patches[0]
    clean = torch.as_tensor(np.stack([p.clean1, p.clean2])[None], dtype=torch.float32)
    out = validate(Oracle(tiny_config, clean), [p])
    assert out["ri_psnr_ch1"] >= 90 and out["ri_psnr_ch2"] >= 90


def test_divergence_reports_checkpoint(tmp_path, tiny_split, tiny_config):
    bad = SplitSample(
        input=np.full((32, 32), 1e30), target1=np.full((32, 32), 1e30), target2=np.full((32, 32), 1e30)
    )
    split = type(tiny_split)(train=[bad] * 4, val=tiny_split.val, test=[], seed=0)
    with pytest.raises(TrainingDiverged) as info:
        train(tiny_config, fast_config(lr=10.0), split, out_dir=tmp_path)
    assert "checkpoint" in str(info.value)


def test_early_stopping(tiny_split, tiny_config):
    result = train(tiny_config, fast_config(epochs=20, patience=1, lr=0.05), tiny_split)
    assert len(result.history) < 20
    assert result.best_epoch == min(range(len(result.history)), key=lambda i: result.history[i]["val_loss"]) + 1


def test_rejects_empty_split(tiny_split, tiny_config):
    empty = type(tiny_split)(train=tiny_split.train, val=[], test=[])
    with pytest.raises(ValueError):
        train(tiny_config, fast_config(), empty)


def test_bf16_precision_runs(tiny_split, tiny_config):
    result = train(tiny_config, fast_config(epochs=1, precision="bf16"), tiny_split)
    assert math.isfinite(result.history[0]["train_loss"])
