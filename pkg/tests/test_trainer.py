"""Optimizer and training-loop behavior, checkpoint wire format."""

import math

import numpy as np
import pytest

from mmtkit import autodiff as ad
from mmtkit.autodiff import Tensor
from mmtkit.features import FeatureStore, synthetic_features
from mmtkit.model import ModelConfig, init_params, param_shapes
from mmtkit.trainer import (
    AdamState,
    BadMagicError,
    BadVersionError,
    Checkpoint,
    CheckpointError,
    EncodedExample,
    EpochStats,
    ShapeMismatchError,
    TrainConfig,
    TruncatedError,
    _batches,
    _length_drop,
    adam_step,
    clip_gradients,
    evaluate_ppl,
    format_epoch,
    load_checkpoint,
    params_from_checkpoint,
    save_checkpoint,
    snapshot_params,
    train,
)

CFG = ModelConfig(src_vocab=8, tgt_vocab=8, emb_size=4, hidden_size=5,
                  n_layers=2, n_regions=3, visual_dim=2, dropout=0.2)


def tiny_data(n=8):
    rng = ad.make_rng(0)
    out = []
    for i in range(n):
        length = int(rng.integers(1, 5))
        ids = [int(t) for t in rng.integers(4, 8, size=length)]
        out.append(EncodedExample(src=ids, tgt=ids, feature_key=f"{i}_img{i}"))
    return out


def tiny_store(data):
    store = FeatureStore(CFG.n_regions, CFG.visual_dim)
    for key, arr in synthetic_features([ex.feature_key for ex in data],
                                       CFG.n_regions, CFG.visual_dim, seed=5):
        store.add(key, arr)
    return store


# --- Adam -----------------------------------------------------------------


def hand_adam(w, grads, lr, b1, b2, eps):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
    return w


def test_adam_single_step_matches_hand_computation():
    cfg = TrainConfig(lr=0.01)
    params = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    params["w"].grad = np.array([0.1, -0.2])
    state = AdamState.fresh(params)
    adam_step(params, state, cfg)
    expected = [hand_adam(w, [g], 0.01, 0.9, 0.999, 1e-8)
                for w, g in [(1.0, 0.1), (2.0, -0.2)]]
    assert np.allclose(params["w"].data, expected, atol=1e-9)
    assert state.t == 1


def test_adam_three_steps_match_hand_computation():
    cfg = TrainConfig(lr=0.05, beta1=0.8, beta2=0.95, eps=1e-6)
    params = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    state = AdamState.fresh(params)
    grads = [0.3, -0.1, 0.25]
    for g in grads:
        params["w"].grad = np.array([g])
        adam_step(params, state, cfg)
        params["w"].grad = None
    expected = hand_adam(0.5, grads, 0.05, 0.8, 0.95, 1e-6)
    assert abs(float(params["w"].data[0]) - expected) < 1e-9
    assert state.t == 3


def test_zero_gradient_leaves_parameters_in_place():
    cfg = TrainConfig(lr=0.1)
    params = {"w": Tensor(np.array([1.5, -2.5]), requires_grad=True)}
    params["w"].grad = np.zeros(2)
    before = params["w"].data.copy()
    adam_step(params, AdamState.fresh(params), cfg)
    assert np.array_equal(params["w"].data, before)


def test_missing_gradient_counts_as_zero():
    cfg = TrainConfig(lr=0.1)
    params = {"a": Tensor(np.array([1.0]), requires_grad=True),
              "b": Tensor(np.array([2.0]), requires_grad=True)}
    params["a"].grad = np.array([0.5])
    before_b = params["b"].data.copy()
    adam_step(params, AdamState.fresh(params), cfg)
    assert np.array_equal(params["b"].data, before_b)
    assert float(params["a"].data[0]) != 1.0


def test_zero_learning_rate_is_bitwise_identity():
    cfg = TrainConfig(lr=0.0)
    data = np.array([1.25, -0.0, 3.5e-7], dtype=np.float32)
    params = {"w": Tensor(data.copy(), requires_grad=True)}
    params["w"].grad = np.array([9.0, -3.0, 0.1], dtype=np.float32)
    adam_step(params, AdamState.fresh(params), cfg)
    assert params["w"].data.tobytes() == data.tobytes()


def test_non_finite_gradient_is_fatal_and_names_parameter():
    cfg = TrainConfig()
    params = {"fine": Tensor(np.array([1.0]), requires_grad=True),
              "bad_layer": Tensor(np.array([1.0]), requires_grad=True)}
    params["bad_layer"].grad = np.array([np.inf])
    with pytest.raises(FloatingPointError, match="bad_layer"):
        adam_step(params, AdamState.fresh(params), cfg)


def test_clip_rescales_to_unit_norm():
    params = {"w": Tensor(np.zeros(2), requires_grad=True)}
    params["w"].grad = np.array([3.0, 4.0])
    norm = clip_gradients(params, 1.0)
    assert norm == 5.0
    assert np.allclose(params["w"].grad, [0.6, 0.8])


def test_clip_below_threshold_is_untouched():
    params = {"w": Tensor(np.zeros(2), requires_grad=True)}
    g = np.array([0.3, 0.4])
    params["w"].grad = g
    norm = clip_gradients(params, 1.0)
    assert norm == 0.5
    assert params["w"].grad is g


# --- checkpoint format ----------------------------------------------------


def make_ckpt(seed=0, epoch=3, ppl=17.25):
    params = init_params(CFG, seed)
    return Checkpoint(snapshot_params(params), CFG, TrainConfig(seed=seed),
                      epoch, ppl)


def test_checkpoint_round_trip_is_exact(tmp_path):
    ckpt = make_ckpt()
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, ckpt)
    loaded = load_checkpoint(p)
    assert loaded.model_cfg == ckpt.model_cfg
    assert loaded.train_cfg == ckpt.train_cfg
    assert loaded.epoch == 3
    assert loaded.valid_ppl == 17.25
    assert set(loaded.params) == set(ckpt.params)
    for name, arr in ckpt.params.items():
        assert loaded.params[name].tobytes() == arr.tobytes()


def test_checkpoint_save_is_byte_deterministic(tmp_path):
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(pa, make_ckpt())
    save_checkpoint(pb, make_ckpt())
    assert pa.read_bytes() == pb.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, make_ckpt())
    blob = bytearray(p.read_bytes())
    blob[:4] = b"XXXX"
    p.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        load_checkpoint(p)


def test_checkpoint_bad_version(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, make_ckpt())
    blob = bytearray(p.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    p.write_bytes(bytes(blob))
    with pytest.raises(BadVersionError):
        load_checkpoint(p)


def test_checkpoint_truncation(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, make_ckpt())
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(TruncatedError):
        load_checkpoint(p)


def test_checkpoint_shape_mismatch(tmp_path):
    ckpt = make_ckpt()
    ckpt.params["out_b"] = ckpt.params["out_b"][:-1]
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, ckpt)
    with pytest.raises(ShapeMismatchError, match="out_b"):
        load_checkpoint(p)


def test_checkpoint_missing_and_unexpected_parameters(tmp_path):
    ckpt = make_ckpt()
    del ckpt.params["att_img_v"]
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, ckpt)
    with pytest.raises(ShapeMismatchError, match="att_img_v"):
        load_checkpoint(p)

    ckpt = make_ckpt()
    ckpt.params["stray"] = np.zeros(3, dtype=np.float32)
    save_checkpoint(p, ckpt)
    with pytest.raises(ShapeMismatchError, match="stray"):
        load_checkpoint(p)


def test_checkpoint_errors_are_value_errors():
    for exc in (BadMagicError, BadVersionError, TruncatedError, ShapeMismatchError):
        assert issubclass(exc, CheckpointError)
        assert issubclass(exc, ValueError)


def test_params_from_checkpoint_are_trainable_float32():
    restored = params_from_checkpoint(make_ckpt())
    assert set(restored) == set(param_shapes(CFG))
    for p in restored.values():
        assert p.dtype == np.float32
        assert p.requires_grad


# --- batching helpers -----------------------------------------------------


def test_length_drop_boundary():
    ex = [EncodedExample([1] * 3, [1] * 5), EncodedExample([1] * 5, [1] * 5),
          EncodedExample([1] * 6, [1] * 2), EncodedExample([1] * 2, [1] * 6)]
    kept, dropped = _length_drop(ex, 5)
    assert kept == ex[:2]
    assert dropped == 2


def test_batches_cover_data_exactly_once_sorted_by_length():
    data = tiny_data(10)
    groups = _batches(data, 3, rng=None)
    flat = [ex for g in groups for ex in g]
    assert sorted(map(id, flat)) == sorted(map(id, data))
    lengths = [len(ex.src) for ex in flat]
    assert lengths == sorted(lengths)
    assert all(len(g) <= 3 for g in groups)


def test_shuffled_batches_preserve_the_multiset():
    data = tiny_data(11)
    groups = _batches(data, 4, rng=ad.make_rng(3, stream=1))
    flat = [ex for g in groups for ex in g]
    assert sorted(map(id, flat)) == sorted(map(id, data))
    for g in groups:
        lens = [len(ex.src) for ex in g]
        assert lens == sorted(lens)


def test_format_epoch_layout():
    line = format_epoch(EpochStats(3, 1.5, 20.25, 1.234))
    assert line == "epoch=3 train_loss=1.500000 valid_ppl=20.250000 time_s=1.23"


# --- evaluation -----------------------------------------------------------


def test_uniform_model_perplexity_is_vocabulary_size():
    params = {name: Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
              for name, shape in param_shapes(CFG).items()}
    ppl = evaluate_ppl(params, CFG, tiny_data(4), store=None)
    assert math.isclose(ppl, CFG.tgt_vocab, rel_tol=1e-5)


def test_evaluate_ppl_is_batch_size_independent():
    params = init_params(CFG, 3)
    data = tiny_data(7)
    store = tiny_store(data)
    a = evaluate_ppl(params, CFG, data, store, batch_size=2)
    b = evaluate_ppl(params, CFG, data, store, batch_size=7)
    assert math.isclose(a, b, rel_tol=1e-5)


# --- training loop --------------------------------------------------------


def test_train_runs_and_selects_lowest_validation_ppl():
    data = tiny_data()
    store = tiny_store(data)
    cfg = TrainConfig(batch_size=4, max_epochs=3, lr=0.01, dropout=0.1, seed=2)
    params = init_params(CFG, 0)
    best, history = train(cfg, CFG, params, data, data[:4], store=store)
    assert len(history) == 3
    ppls = [h.valid_ppl for h in history]
    assert best.valid_ppl == min(ppls)
    assert best.epoch == ppls.index(min(ppls)) + 1
    assert all(math.isfinite(h.train_loss) for h in history)


def test_same_seed_reproduces_training_bit_for_bit():
    data = tiny_data()
    store = tiny_store(data)
    cfg = TrainConfig(batch_size=4, max_epochs=2, lr=0.01, dropout=0.3, seed=5)

    def run():
        params = init_params(CFG, 1)
        _, history = train(cfg, CFG, params, data, data[:3], store=store)
        return [(h.train_loss, h.valid_ppl) for h in history], snapshot_params(params)

    (ha, pa), (hb, pb) = run(), run()
    assert ha == hb
    for name in pa:
        assert pa[name].tobytes() == pb[name].tobytes()


def test_different_seed_changes_training():
    data = tiny_data()
    store = tiny_store(data)
    params = init_params(CFG, 1)
    cfg_a = TrainConfig(batch_size=4, max_epochs=1, lr=0.01, dropout=0.3, seed=5)
    _, ha = train(cfg_a, CFG, params, data, data[:3], store=store)
    params = init_params(CFG, 1)
    cfg_b = TrainConfig(batch_size=4, max_epochs=1, lr=0.01, dropout=0.3, seed=6)
    _, hb = train(cfg_b, CFG, params, data, data[:3], store=store)
    assert ha[0].train_loss != hb[0].train_loss


def test_zero_learning_rate_training_leaves_params_bitwise_unchanged():
    data = tiny_data()
    store = tiny_store(data)
    cfg = TrainConfig(batch_size=4, max_epochs=2, lr=0.0, dropout=0.2, seed=3)
    params = init_params(CFG, 4)
    before = snapshot_params(params)
    train(cfg, CFG, params, data, data[:3], store=store)
    for name, arr in before.items():
        assert params[name].data.tobytes() == arr.tobytes()


def test_pretrain_mode_refuses_feature_store():
    data = tiny_data()
    cfg = TrainConfig(max_epochs=1, mode="pretrain")
    with pytest.raises(ValueError, match="text-only"):
        train(cfg, CFG, init_params(CFG, 0), data, data[:2], store=tiny_store(data))


def test_multimodal_mode_requires_feature_store():
    cfg = TrainConfig(max_epochs=1, mode="scratch")
    with pytest.raises(ValueError, match="feature store"):
        train(cfg, CFG, init_params(CFG, 0), tiny_data(), tiny_data()[:2])


def test_missing_feature_key_is_fatal():
    data = tiny_data()
    store = tiny_store(data[:-1])  # drop the last example's features
    cfg = TrainConfig(batch_size=8, max_epochs=1, mode="scratch")
    with pytest.raises(ValueError, match="no features stored"):
        train(cfg, CFG, init_params(CFG, 0), data, data[:2], store=store)


def test_example_without_feature_key_is_fatal_in_multimodal_mode():
    data = tiny_data()
    data[2] = EncodedExample(src=data[2].src, tgt=data[2].tgt)
    cfg = TrainConfig(batch_size=8, max_epochs=1, mode="scratch")
    with pytest.raises(ValueError, match="no feature key"):
        train(cfg, CFG, init_params(CFG, 0), data, data[:2], store=tiny_store(data))


def test_empty_data_after_length_filter_is_fatal():
    long_data = [EncodedExample([4] * 80, [5] * 80, feature_key="0_x")]
    cfg = TrainConfig(max_epochs=1, mode="pretrain")
    with pytest.raises(ValueError, match="empty data"):
        train(cfg, CFG, init_params(CFG, 0), long_data, long_data)


def test_text_only_checkpoint_loads_into_multimodal_training():
    data = [EncodedExample(ex.src, ex.tgt) for ex in tiny_data()]
    pre_cfg = TrainConfig(batch_size=4, max_epochs=1, lr=0.01, mode="pretrain", seed=7)
    params = init_params(CFG, 2)
    best, _ = train(pre_cfg, CFG, params, data, data[:3])

    # same parameter inventory, so the checkpoint restores directly
    restored = params_from_checkpoint(best)
    mm_data = tiny_data()
    fine_cfg = TrainConfig(batch_size=4, max_epochs=1, lr=0.01, mode="finetune", seed=8)
    best2, history = train(fine_cfg, CFG, restored, mm_data, mm_data[:3],
                           store=tiny_store(mm_data))
    assert len(history) == 1
    assert set(best2.params) == set(best.params)
    for name in best.params:
        assert best2.params[name].shape == best.params[name].shape


def test_checkpoint_of_trained_model_round_trips_through_disk(tmp_path):
    data = tiny_data()
    store = tiny_store(data)
    cfg = TrainConfig(batch_size=4, max_epochs=1, lr=0.01, seed=9)
    best, _ = train(cfg, CFG, init_params(CFG, 5), data, data[:3], store=store)
    p = tmp_path / "best.ckpt"
    save_checkpoint(p, best)
    loaded = load_checkpoint(p)
    assert loaded.valid_ppl == best.valid_ppl
    for name, arr in best.params.items():
        assert loaded.params[name].tobytes() == arr.astype(np.float32).tobytes()
