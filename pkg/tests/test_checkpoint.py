import numpy as np
import pytest

from fspnet.checkpoint import Checkpoint, CheckpointError
from fspnet.config import toy_config
from fspnet.data import from_samples, gen_synthetic
from fspnet.train import model_from_checkpoint, train

TINY = dict(image_h=32, image_w=32, embed_dim=8, num_heads=2, n_vertices=2, decoder_width=4)


@pytest.fixture(scope="module")
def trained():
    ds = from_samples(gen_synthetic(2, 32, 32, seed=1))
    return train(toy_config(max_steps=2, batch_size=2, **TINY), ds)


def test_save_load_save_is_byte_identical(tmp_path, trained):
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    trained.checkpoint.save(str(a))
    Checkpoint.load(str(a)).save(str(b))
    assert a.read_bytes() == b.read_bytes()


def test_round_trip_restores_state(tmp_path, trained):
    path = tmp_path / "c.ckpt"
    trained.checkpoint.save(str(path))
    ck = Checkpoint.load(str(path))
    assert ck.step == 2 and ck.adam_step == 2
    assert ck.rng_state == trained.checkpoint.rng_state
    model = model_from_checkpoint(ck)
    for k, v in trained.model.state_dict().items():
        assert np.array_equal(model.state_dict()[k], v)


def test_refuses_config_mismatch(tmp_path, trained):
    path = tmp_path / "d.ckpt"
    trained.checkpoint.save(str(path))
    other = toy_config(max_steps=2, batch_size=2, **{**TINY, "decoder_width": 8})
    with pytest.raises(CheckpointError):
        Checkpoint.load(str(path), expected_config=other)


def test_refuses_shape_mismatch(trained):
    ck = trained.checkpoint
    bad = Checkpoint(ck.config, dict(ck.state))
    name = next(iter(bad.state))
    bad.state[name] = np.zeros(bad.state[name].shape + (1,))
    with pytest.raises(CheckpointError):
        model_from_checkpoint(bad)
    missing = Checkpoint(ck.config, {k: v for k, v in list(ck.state.items())[1:]})
    with pytest.raises(CheckpointError):
        model_from_checkpoint(missing)


def test_rejects_garbage_and_truncation(tmp_path, trained):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        Checkpoint.load(str(junk))
    raw = trained.checkpoint.to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(raw[:-16])
    with pytest.raises(CheckpointError):
        Checkpoint.load(str(tmp_path / "absent.ckpt"))
