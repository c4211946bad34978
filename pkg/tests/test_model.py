import numpy as np
import pytest

from aulacaps import autodiff as ad
from aulacaps import gradcheck as G
from aulacaps import model as M
from aulacaps.autodiff import Tensor


@pytest.fixture(scope="module")
def full_model():
    return M.build(M.full_config(), seed=0)


@pytest.fixture(scope="module")
def desk_model():
    return M.build(M.desk_config(), seed=0)


def window(cfg, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (batch, cfg.window_length, cfg.input_size, cfg.input_size, cfg.channels)).astype(np.float32)


def test_full_capsule_counts(full_model):
    cfg = full_model.config
    assert (cfg.spatial_capsules, cfg.temporal_capsules, cfg.total_capsules) == (576, 864, 1440)
    assert full_model.votes.W.shape == (1440, 12, 16, 16)


def test_full_parameter_budget(full_model):
    total = full_model.param_count()
    decoder = total - full_model.param_count(include_decoder=False)
    assert abs(total - 11.51e6) <= 0.2 * 11.51e6
    assert abs(decoder - 2.8e6) <= 0.2 * 2.8e6


def test_full_primary_capsule_shapes():
    # shape bookkeeping only, on the 2D stream (cheap at 96x96)
    cfg = M.full_config()
    model = M.build(cfg, seed=0)
    model.eval()
    x = M.to_channel_first(window(cfg, batch=1), cfg)
    with ad.no_grad():
        u2 = model.spatial(x[:, :, cfg.window_N])
    assert u2.shape == (1, 576, 16)


def test_same_seed_bit_identical():
    a, b = M.build(M.desk_config(), seed=3), M.build(M.desk_config(), seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = M.build(M.desk_config(), seed=4)
    assert not np.array_equal(a.votes.W.data, c.votes.W.data)


def test_forward_outputs(desk_model):
    cfg = desk_model.config
    with ad.no_grad():
        res = M.forward(desk_model, window(cfg), training=False)
    assert res.au_probs.shape == (2, 12)
    assert np.all((res.au_probs.data >= 0) & (res.au_probs.data < 1))
    assert res.reconstruction.shape == (2, cfg.channels, cfg.input_size, cfg.input_size)
    assert np.all(np.abs(res.reconstruction.data) <= 1)


def test_static_window_finite_and_deterministic(desk_model):
    cfg = desk_model.config
    frame = window(cfg, batch=1)[:, :1]
    static = np.repeat(frame, cfg.window_length, axis=1)
    with ad.no_grad():
        a = M.forward(desk_model, static).au_probs.data
        b = M.forward(desk_model, static).au_probs.data
    assert np.all(np.isfinite(a)) and np.array_equal(a, b)


def test_forward_rejects_bad_windows(desk_model):
    cfg = desk_model.config
    with pytest.raises(ValueError, match="window length"):
        M.forward(desk_model, np.zeros((1, 4, cfg.input_size, cfg.input_size, 1)))
    with pytest.raises(ValueError, match="frame size"):
        M.forward(desk_model, np.zeros((1, 5, cfg.input_size + 8, cfg.input_size + 8, 1)))


def test_decoder_zero_input_gives_zero_image(desk_model):
    dec = M.build(M.desk_config(), seed=1).decoder
    for name, p in dec.named_parameters():
        if name.endswith("bias"):
            p.data = np.zeros_like(p.data)
    out = M.decode(Tensor(np.zeros((1, 192))), dec)
    assert out.shape == (1, 1, 32, 32) and np.all(out.data == 0)


def test_full_decoder_output_size():
    cfg = M.full_config()
    dec = M.Decoder(cfg, np.random.default_rng(0))
    with ad.no_grad():
        assert dec(Tensor(np.zeros((1, 192)))).shape == (1, 1, 96, 96)


def test_training_decoder_uses_true_label(desk_model):
    cfg = desk_model.config
    x = window(cfg, batch=1)
    with ad.no_grad():
        a = M.forward(desk_model, x, label_for_decoder=np.zeros((1, 12))).reconstruction.data
        b = M.decode(Tensor(np.zeros((1, 192))), desk_model).data
    np.testing.assert_array_equal(a, b)


def test_config_validation_and_roundtrip():
    with pytest.raises(M.ConfigError):
        M.desk_config(input_size=36).validate()
    with pytest.raises(M.ConfigError):
        M.desk_config(caps2d_filters=20).validate()
    cfg = M.desk_config()
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(M.ConfigError):
        M.ModelConfig.from_dict({"bogus": 1})


def test_checkpoint_roundtrip(tmp_path, desk_model):
    desk_model.trained_steps = 5
    M.save_checkpoint(desk_model, tmp_path / "ck", meta={"fold": 0})
    loaded = M.load_checkpoint(tmp_path / "ck")
    assert loaded.trained_steps == 5 and loaded.checkpoint_meta == {"fold": 0}
    for (n, p), (_, q) in zip(desk_model.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    M.save_checkpoint(loaded, tmp_path / "ck2")
    assert (tmp_path / "ck" / "model.bin").read_bytes() == (tmp_path / "ck2" / "model.bin").read_bytes()
    desk_model.trained_steps = 0


def test_checkpoint_truncated(tmp_path, desk_model):
    M.save_checkpoint(desk_model, tmp_path / "ck")
    blob = tmp_path / "ck" / "model.bin"
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(ValueError, match="bytes"):
        M.load_checkpoint(tmp_path / "ck")


def test_copy_and_restore_state(desk_model):
    snap = M.copy_state(desk_model)
    before = desk_model.votes.W.data.copy()
    desk_model.votes.W.data = desk_model.votes.W.data + 1
    M.restore_state(desk_model, snap)
    assert np.array_equal(desk_model.votes.W.data, before)


def test_ablation_head_contract():
    model = M.build(M.full_config(), seed=0)
    with pytest.raises(M.UntrainedModelError):
        M.stream_head_for_ablation(model, "2d")
    model.trained_steps = 1
    assert M.stream_head_for_ablation(model, "2d").in_count == 576
    assert M.stream_head_for_ablation(model, "3D").in_count == 864
    with pytest.raises(ValueError):
        M.stream_head_for_ablation(model, "4d")


def test_ablation_head_freezes_stream():
    from aulacaps import losses as L
    from aulacaps import train as T

    model = M.build(M.desk_config(), seed=0)
    model.trained_steps = 1
    before = M.copy_state(model)
    head = M.stream_head_for_ablation(model, "2d", seed=1)
    x = window(model.config, batch=4)
    u = head.frozen_capsules(x)
    params = list(head.named_parameters())
    state = T.AdamState()
    for _ in range(2):
        loss = L.margin_loss(head.route_probs(u), np.ones((4, 12)))
        ad.zero_grad(p for _, p in params)
        ad.backward(loss)
        T.adam_step(params, state, 1e-3)
    after = M.copy_state(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(p.grad is None for p in model.parameters())


def test_end_to_end_gradient():
    assert G.end_to_end_check(0) < 1e-3
