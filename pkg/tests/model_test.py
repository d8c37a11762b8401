import math

import numpy as np
import pytest

from modules.data_types import ModelConfig
from modules.errors import DimensionError, FormatError
from modules.losses import classification_loss
from modules.model import (
    CHECKPOINT_MAGIC,
    classify,
    encode,
    init_params,
    load_checkpoint,
    parameter_shapes,
    predict,
    save_checkpoint,
)
from modules.tensor_core import Tensor
from modules.utils import read_header

SMALL = ModelConfig(input_height=8, input_width=8, embed_dim=6, hidden_dim=10, n_classes=4)


def _batch(rng, k=4, cfg=SMALL, dtype=np.float32):
    images = rng.uniform(0.0, 1.0, size=(k, 1, cfg.input_height, cfg.input_width))
    return Tensor(images, dtype=dtype)


def test_init_params_is_deterministic_in_seed():
    a = init_params(SMALL, 7)
    b = init_params(SMALL, 7)
    c = init_params(SMALL, 8)
    assert a.bitwise_equal(b)
    assert not a.bitwise_equal(c)


def test_init_params_biases_zero_and_log_temp_set():
    params = init_params(SMALL, 1, temp_init_log=1.5)
    for name in ("enc_b1", "enc_b2", "enc_b3", "head_b"):
        assert not np.any(params[name].data)
    assert params.log_temp.item() == pytest.approx(1.5)
    assert params.log_temp.shape == ()


def test_init_params_glorot_uniform_statistics():
    cfg = ModelConfig(input_height=32, input_width=32, hidden_dim=256)
    weights = init_params(cfg, 3)["enc_w1"].data
    limit = math.sqrt(6.0 / (cfg.input_dim + cfg.hidden_dim))
    assert weights.size >= 10_000
    assert abs(float(weights.mean())) < 0.01
    assert weights.min() > -limit and weights.max() < limit


def test_parameter_count_depends_only_on_config():
    expected = sum(int(np.prod(shape)) for shape in parameter_shapes(SMALL).values())
    assert init_params(SMALL, 0).parameter_count() == expected
    assert init_params(SMALL, 99).parameter_count() == expected
    assert expected == 64 * 10 + 10 + 10 * 10 + 10 + 10 * 6 + 6 + 6 * 4 + 4 + 1


def test_encode_zero_image_with_zero_biases_is_zero():
    params = init_params(SMALL, 0)
    zeros = Tensor(np.zeros((3, 1, 8, 8)))
    np.testing.assert_array_equal(encode(zeros, params).data, np.zeros((3, 6)))


def test_encode_identical_rows_and_repeat_calls_match():
    rng = np.random.default_rng(0)
    params = init_params(SMALL, 2)
    image = rng.uniform(size=(1, 1, 8, 8))
    batch = Tensor(np.concatenate([image, image]))
    out = encode(batch, params).data
    assert out.shape == (2, SMALL.embed_dim)
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out, encode(batch, params).data)


def test_encode_matches_layer_by_layer_oracle():
    rng = np.random.default_rng(1)
    params = init_params(SMALL, 4)
    for name in ("enc_b1", "enc_b2", "enc_b3"):
        params[name].data = rng.normal(scale=0.1, size=params[name].shape).astype(np.float32)
    batch = _batch(rng)

    x = batch.data.astype(np.float64).reshape(4, -1)
    w = {name: t.data.astype(np.float64) for name, t in params.items()}
    h1 = np.maximum(x @ w["enc_w1"] + w["enc_b1"], 0)
    h2 = np.maximum(h1 @ w["enc_w2"] + w["enc_b2"], 0)
    expected = h2 @ w["enc_w3"] + w["enc_b3"]

    np.testing.assert_allclose(encode(batch, params).data, expected, atol=1e-5)


def test_encode_output_takes_both_signs():
    rng = np.random.default_rng(5)
    out = encode(_batch(rng, k=16), init_params(SMALL, 5)).data
    assert out.min() < 0 < out.max()


def test_encode_returns_unnormalized_rows():
    rng = np.random.default_rng(6)
    params = init_params(SMALL, 6)
    batch = _batch(rng, k=8)
    norms = np.linalg.norm(encode(batch, params).data, axis=1)
    assert not np.allclose(norms, 1.0, atol=1e-3)
    # zero biases at init: the encoder is positively homogeneous, so norms follow the input scale
    halved = encode(Tensor(batch.data * 0.5), params).data
    np.testing.assert_allclose(np.linalg.norm(halved, axis=1), 0.5 * norms, rtol=1e-5)


def test_encode_rejects_wrong_shapes():
    params = init_params(SMALL, 0)
    with pytest.raises(DimensionError):
        encode(Tensor(np.zeros((2, 1, 8, 7))), params)
    with pytest.raises(DimensionError):
        encode(Tensor(np.zeros((2, 8, 8))), params)


def test_classify_head_weights_zero_gives_bias_rows():
    params = init_params(SMALL, 0)
    params["head_w"].data[:] = 0
    params["head_b"].data[:] = [0.5, -1.0, 2.0, 0.0]
    logits = classify(Tensor(np.ones((3, 6))), params).data
    np.testing.assert_array_equal(logits, np.tile([0.5, -1.0, 2.0, 0.0], (3, 1)))


def test_classify_zero_embedding_is_uniform():
    logits = classify(Tensor(np.zeros((2, 6))), init_params(SMALL, 0)).data
    np.testing.assert_array_equal(logits, np.zeros((2, 4)))


def test_classify_matches_affine_oracle():
    rng = np.random.default_rng(3)
    params = init_params(SMALL, 3)
    e = rng.normal(size=(5, 6))
    expected = e @ params["head_w"].data.astype(np.float64) + params["head_b"].data
    np.testing.assert_allclose(classify(Tensor(e), params).data, expected, atol=1e-6)


def test_classify_rejects_wrong_width():
    with pytest.raises(DimensionError):
        classify(Tensor(np.zeros((2, 5))), init_params(SMALL, 0))


def test_fresh_model_logits_are_finite():
    rng = np.random.default_rng(4)
    params = init_params(ModelConfig(), 0)
    images = rng.uniform(size=(16, 1, 32, 32))
    embeddings, logits = predict(images, params, chunk_size=5)
    assert embeddings.shape == (16, 64) and logits.shape == (16, 8)
    assert np.all(np.isfinite(logits))


def test_predict_chunking_does_not_change_results():
    rng = np.random.default_rng(6)
    params = init_params(SMALL, 6)
    images = rng.uniform(size=(11, 1, 8, 8)).astype(np.float32)
    _, whole = predict(images, params, chunk_size=64)
    _, chunked = predict(images, params, chunk_size=3)
    np.testing.assert_allclose(whole, chunked, rtol=1e-6, atol=1e-6)


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    path = str(tmp_path / "model.ckpt")
    params = init_params(SMALL, 11, temp_init_log=2.25)
    save_checkpoint(params, SMALL, path)

    loaded, cfg = load_checkpoint(path)
    assert cfg == SMALL
    assert loaded.bitwise_equal(params)
    assert loaded.log_temp.item() == params.log_temp.item()


def test_checkpoint_round_trip_preserves_loss(tmp_path):
    rng = np.random.default_rng(12)
    path = str(tmp_path / "model.ckpt")
    params = init_params(SMALL, 12)
    b1, b2 = _batch(rng), _batch(rng)
    y = [0, 1, 2, 3]

    def loss(p):
        return classification_loss(
            classify(encode(b1, p), p), classify(encode(b2, p), p), y, 2.0
        ).data

    before = loss(params)
    save_checkpoint(params, SMALL, path)
    loaded, _ = load_checkpoint(path)
    assert loss(loaded).tobytes() == before.tobytes()


def test_checkpoint_is_byte_identical_across_saves(tmp_path):
    params = init_params(SMALL, 13)
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(params, SMALL, str(first))
    save_checkpoint(params, SMALL, str(second))
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes().startswith(CHECKPOINT_MAGIC)


def test_checkpoint_missing_file():
    with pytest.raises(FileNotFoundError, match="nowhere.ckpt"):
        load_checkpoint("nowhere.ckpt")


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(init_params(SMALL, 0), SMALL, str(path))
    blob = bytearray(path.read_bytes())
    blob[0:8] = b"NOTCKPT!"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as info:
        load_checkpoint(str(path))
    assert info.value.offset == 0


def test_checkpoint_truncated_payload(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(init_params(SMALL, 0), SMALL, str(path))
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="payload"):
        load_checkpoint(str(path))


def test_checkpoint_truncated_header(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(init_params(SMALL, 0), SMALL, str(path))
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(FormatError):
        load_checkpoint(str(path))


def test_checkpoint_with_mismatched_config_is_rejected(tmp_path):
    # tensors saved for one config, header claims another
    path = tmp_path / "model.ckpt"
    bigger = SMALL.model_copy(update={"hidden_dim": 12})
    save_checkpoint(init_params(SMALL, 0), bigger, str(path))
    with pytest.raises(FormatError):
        load_checkpoint(str(path))


def test_checkpoint_tensors_follow_parameter_order(tmp_path):
    path = tmp_path / "model.ckpt"
    params = init_params(SMALL, 4)
    save_checkpoint(params, SMALL, str(path))
    blob = path.read_bytes()
    header, offset = read_header(blob, CHECKPOINT_MAGIC, "checkpoint")
    names = [t["name"] for t in header["tensors"]]
    assert names == list(parameter_shapes(SMALL))
    assert names[-1] == "log_temp"
    assert names != sorted(names)
    first = np.frombuffer(blob, dtype="<f4", count=params["enc_w1"].data.size, offset=offset)
    np.testing.assert_array_equal(first.reshape(params["enc_w1"].shape), params["enc_w1"].data)
