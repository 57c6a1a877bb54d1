import numpy as np
import pytest

from dfam_detr import tensor as T
from dfam_detr.checkpoint import CheckpointError, load_tensors, save_tensors
from dfam_detr.config import RunConfig
from dfam_detr.transformer import build_model


def test_tensor_file_round_trips_bit_identically(tmp_path):
    r = np.random.default_rng(0)
    tensors = {"a": r.standard_normal((3, 4)), "b": r.standard_normal(5).astype(np.float32),
               "c": np.arange(6, dtype=np.int64).reshape(2, 3), "empty": np.zeros((0, 4))}
    save_tensors(tmp_path / "x.ckpt", tensors, {"epoch": 3})
    got, meta = load_tensors(tmp_path / "x.ckpt")
    assert meta == {"epoch": 3}
    for k, v in tensors.items():
        assert got[k].dtype == v.dtype and got[k].tobytes() == v.tobytes() and got[k].shape == v.shape


def test_rejects_foreign_files_and_dtypes(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "bad")
    with pytest.raises(CheckpointError, match="dtype"):
        save_tensors(tmp_path / "y", {"u": np.zeros(2, dtype=np.uint8)})


def small_config(**model):
    cfg = RunConfig()
    cfg.model.d_model = 32
    cfg.model.heads = 2
    cfg.model.enc_layers = cfg.model.dec_layers = 1
    cfg.model.dim_feedforward = 32
    cfg.model.queries = 5
    for k, v in model.items():
        setattr(cfg.model, k, v)
    cfg.data.image_size = 64
    return cfg


def test_model_reload_gives_identical_outputs(tmp_path, f64):
    cfg = small_config()
    a = build_model(cfg)
    save_tensors(tmp_path / "m.ckpt", {n: p.data for n, p in a.named_parameters()})
    b = build_model(small_config())
    for p in b.parameters():
        p.data = p.data * 0
    b.load_state_dict(load_tensors(tmp_path / "m.ckpt")[0])
    x = T.Tensor(np.random.default_rng(1).standard_normal((1, 3, 64, 64)))
    with T.no_grad():
        oa, ob = a(x)[-1], b(x)[-1]
    assert oa.logits.data.tobytes() == ob.logits.data.tobytes()
    assert oa.boxes.data.tobytes() == ob.boxes.data.tobytes()


def test_mismatched_architecture_lists_every_difference(f64):
    a = build_model(small_config())
    state = {n: p.data for n, p in a.named_parameters()}
    b = build_model(small_config(queries=7))
    with pytest.raises(T.ShapeError) as info:
        b.load_state_dict(state)
    assert "shape:" in str(info.value) and "expected" in str(info.value)
    del state[next(iter(state))]
    state["bogus"] = np.zeros(1)
    with pytest.raises(T.ShapeError) as info:
        a.load_state_dict(state)
    assert "missing:" in str(info.value) and "unexpected: bogus" in str(info.value)
