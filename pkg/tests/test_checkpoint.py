import struct

import numpy as np
import pytest

from glab.checkpoint import MAGIC, describe, load_checkpoint, save_checkpoint
from glab.denoiser import Denoiser, TrainConfig, param_count, train
from glab.diffusion import DiffusionConfig, make_linear_schedule
from glab.errors import IoError


@pytest.fixture()
def trained_pair(tiny_vector_cfg, sched50, rng):
    model = Denoiser.init(tiny_vector_cfg, seed=6)
    train(model, sched50, rng.standard_normal((16, 2)), rng.integers(0, 3, size=16),
          TrainConfig(epochs=1, batch_size=8, cond_dropout=0.1, seed=2))
    dcfg = DiffusionConfig(timesteps=50)
    return model, dcfg


def test_round_trip_preserves_everything(tmp_path, trained_pair, rng):
    model, dcfg = trained_pair
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, dcfg, {"seed": 2, "cond_dropout": 0.1, "epochs": 1})
    loaded, dcfg2, meta = load_checkpoint(path)
    assert dcfg2 == dcfg
    assert loaded.cfg == model.cfg
    assert meta["seed"] == 2
    assert loaded.cond_dropout_p == 0.1
    for name in model.params:
        # weights were snapped to f4 at the end of training, so nothing is lost
        assert np.array_equal(loaded.params[name], model.params[name]), name
    x = rng.standard_normal((3, 2))
    assert np.array_equal(loaded.forward(x, 9, c=1), model.forward(x, 9, c=1))


def test_two_saves_are_byte_identical(tmp_path, trained_pair):
    model, dcfg = trained_pair
    save_checkpoint(tmp_path / "a.ckpt", model, dcfg, {"seed": 2})
    save_checkpoint(tmp_path / "b.ckpt", model, dcfg, {"seed": 2})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_dropout_free_training_disables_null_guidance(tmp_path, tiny_vector_cfg, sched50, rng):
    model = Denoiser.init(tiny_vector_cfg, seed=0)
    train(model, sched50, rng.standard_normal((16, 2)), rng.integers(0, 3, size=16),
          TrainConfig(epochs=1, batch_size=8, cond_dropout=0.0, seed=0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, DiffusionConfig(timesteps=50), {"cond_dropout": 0.0})
    loaded, _, _ = load_checkpoint(path)
    assert not loaded.cond_dropout_p


def test_describe_summary(tmp_path, trained_pair):
    model, dcfg = trained_pair
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, dcfg, {"epochs": 1})
    info = describe(path)
    assert info["param_count"] == param_count(model.cfg)
    assert info["payload_bytes"] == 4 * info["param_count"]
    names = [n for n, _ in info["tensors"]]
    assert names == sorted(names)
    assert info["diffusion"]["timesteps"] == 50


def test_bad_magic_rejected(tmp_path, trained_pair):
    model, dcfg = trained_pair
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, dcfg, {})
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(IoError):
        load_checkpoint(path)


def test_future_version_rejected(tmp_path, trained_pair):
    model, dcfg = trained_pair
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, dcfg, {})
    blob = bytearray(path.read_bytes())
    struct.pack_into("<I", blob, len(MAGIC), 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(IoError):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path, trained_pair):
    model, dcfg = trained_pair
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, dcfg, {})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(IoError):
        load_checkpoint(path)


def test_corrupt_header_rejected(tmp_path, trained_pair):
    model, dcfg = trained_pair
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, dcfg, {})
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC) + 12] = 0xFF  # stomp the first JSON byte
    path.write_bytes(bytes(blob))
    with pytest.raises(IoError):
        load_checkpoint(path)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(IoError):
        load_checkpoint(tmp_path / "absent.ckpt")
