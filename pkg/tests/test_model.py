"""Network assembly: encoders, fusion, masks, decoder, checkpoints."""

from dataclasses import replace

import numpy as np
import pytest

from basen import diff_ops as ops
from basen.model import (
    BasenConfig,
    BasenModel,
    ModelError,
    _CrossAttention,
    _Registry,
    desk_config,
    load_checkpoint,
    save_checkpoint,
    tiny_config,
)
from basen.signal_core import MultiChannelSeries, SampleBuffer


def tiny_model(seed=0, **overrides):
    cfg = replace(tiny_config(), **overrides) if overrides else tiny_config()
    return BasenModel(cfg, seed=seed, dtype=np.float64)


def tiny_inputs(seed=1, seconds=0.25):
    rng = np.random.default_rng(seed)
    n = int(2000 * seconds)
    x = SampleBuffer(rng.normal(size=n) * 0.1, 2000.0)
    eeg = MultiChannelSeries(rng.normal(size=(4, int(128 * seconds))), 128.0)
    return x, eeg


# --- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ModelError, match="divisible"):
        BasenConfig(feature_channels=10, cmca_groups=4)
    with pytest.raises(ModelError, match="fusion"):
        BasenConfig(fusion="mystery")
    with pytest.raises(ModelError, match="n_sources"):
        BasenConfig(n_sources=1)
    with pytest.raises(ModelError, match="cmca_layers"):
        BasenConfig(cmca_layers=0)
    with pytest.raises(ModelError, match="even"):
        BasenConfig(encoder_kernel=15)
    assert BasenConfig().downsample_factor == 64


# --- audio encoder / decoder ---------------------------------------------------

def test_audio_encoder_geometry_two_seconds_full_rate():
    model = BasenModel(BasenConfig(), seed=0)
    padded = model.padded_length(29400)
    assert padded == 29440
    x = ops.constant(np.zeros((1, 1, padded), dtype=np.float32))
    w_x = model.encode_audio(x)
    assert w_x.value.shape == (1, 64, padded // 64)


def test_audio_encoder_zero_input_is_constant_in_the_interior():
    model = tiny_model()
    # put a visible bias pattern in place of the zero init
    model.param("audio_enc.conv0.b").node.value[:] = 0.3
    model.param("audio_enc.conv1.b").node.value[:] = -0.1
    w_x = model.encode_audio(ops.constant(np.zeros((1, 1, 512)))).value
    interior = w_x[0, :, 1:-1]
    assert np.all(interior == interior[:, :1])


def test_audio_encoder_channel_count_for_any_length():
    model = tiny_model()
    for n in (64, 512, 1024):
        w_x = model.encode_audio(ops.constant(np.zeros((1, 1, n))))
        assert w_x.value.shape[1] == 8


def test_decoder_round_trip_lengths():
    model = BasenModel(BasenConfig(), seed=0)
    for n in (14700, 29400):
        padded = model.padded_length(n)
        latent = model.encode_audio(ops.constant(np.zeros((1, 1, padded), np.float32)))
        out = model.decode_audio(latent)
        assert out.value.shape == (1, 1, padded)


def test_decoder_zero_embedding_gives_zero_at_default_init():
    model = tiny_model()
    out = model.decode_audio(ops.constant(np.zeros((1, 8, 8))))
    assert np.array_equal(out.value, np.zeros((1, 1, 512)))


def test_input_shorter_than_minimum_is_rejected():
    model = tiny_model()
    with pytest.raises(ModelError, match="shorter than the minimum"):
        model.padded_length(63)


# --- eeg encoder -----------------------------------------------------------------

def test_eeg_encoder_downsamples_by_eight():
    model = BasenModel(BasenConfig(), seed=0)
    e = model.encode_eeg(ops.constant(np.zeros((1, 128, 256), np.float32)))
    assert e.value.shape == (1, 64, 32)


def test_eeg_encoder_has_eight_residual_layers():
    assert len(tiny_model().eeg_blocks) == 8
    assert len(BasenModel(BasenConfig(), seed=0).eeg_blocks) == 8


def test_eeg_encoder_zero_input_bias_driven_and_deterministic():
    model = tiny_model()
    zero = ops.constant(np.zeros((1, 4, 32)))
    assert np.array_equal(model.encode_eeg(zero).value, np.zeros((1, 8, 4)))
    model.param("eeg_enc.in.b").node.value[:] = 1.0
    a = model.encode_eeg(zero).value
    b = model.encode_eeg(zero).value
    assert np.array_equal(a, b)
    assert np.any(a != 0.0)


def test_eeg_channel_mismatch_rejected():
    model = tiny_model()
    x, _ = tiny_inputs()
    bad = MultiChannelSeries(np.zeros((5, 32)), 128.0)
    with pytest.raises(ModelError, match="eeg channels"):
        model.separate(x, bad)


# --- cross attention ----------------------------------------------------------------

def make_identity_attention(channels=2):
    reg = _Registry(0, np.float64)
    att = _CrossAttention(reg, "t", channels)
    for proj in (att.q, att.k, att.v):
        proj.w.node.value[:] = 0.0
        proj.w.node.value[:, 1] = 1.0  # center tap passes the input through
        proj.b.node.value[:] = 0.0
    return att


def test_cross_attention_identity_hand_case():
    att = make_identity_attention()
    eye = ops.constant(np.eye(2)[None])
    collect = {}
    out = att(eye, eye, collect, "t")
    e = np.e
    softmaxed = np.array([[e / (1 + e), 1 / (1 + e)],
                          [1 / (1 + e), e / (1 + e)]])
    assert np.max(np.abs(collect["attention_weights"]["t"][0] - softmaxed)) < 1e-12
    assert np.max(np.abs(out.value[0] - softmaxed)) < 1e-12


def test_cross_attention_zero_value_annihilates():
    att = make_identity_attention(channels=4)
    att.v.w.node.value[:] = 0.0
    rng = np.random.default_rng(2)
    out = att(ops.constant(rng.normal(size=(1, 4, 6))),
              ops.constant(rng.normal(size=(1, 4, 6))))
    assert np.array_equal(out.value, np.zeros((1, 4, 6)))


def test_cross_attention_weight_shape_independent_of_length():
    att = make_identity_attention(channels=4)
    rng = np.random.default_rng(3)
    for length in (2, 7, 31):
        collect = {}
        att(ops.constant(rng.normal(size=(1, 4, length))),
            ops.constant(rng.normal(size=(1, 4, length))), collect, "t")
        w = collect["attention_weights"]["t"]
        assert w.shape == (1, 4, 4)
        assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-6


def test_cross_attention_shape_mismatch_rejected():
    att = make_identity_attention()
    with pytest.raises(ModelError, match="mismatch"):
        att(ops.constant(np.zeros((1, 2, 5))), ops.constant(np.zeros((1, 2, 6))))


# --- fusion ---------------------------------------------------------------------

def forward_collect(model, x, eeg):
    padded = model.padded_length(len(x))
    audio = np.zeros((1, 1, padded))
    audio[0, 0, :len(x)] = x.samples
    collect = {}
    outs = model.forward_nodes(ops.constant(audio),
                               ops.constant(eeg.data[None]), collect)
    return outs, collect


def test_cmca_zero_eeg_keeps_fused_shape():
    model = tiny_model()
    x, eeg = tiny_inputs()
    zero_eeg = MultiChannelSeries(np.zeros_like(eeg.data), 128.0)
    _, collect = forward_collect(model, x, zero_eeg)
    assert collect["c_x"].shape == collect["a_x"].shape


def test_cmca_layer_outputs_keep_branch_shapes():
    model = tiny_model()
    x, eeg = tiny_inputs()
    _, collect = forward_collect(model, x, eeg)
    assert len(collect["cmca_audio"]) == 2
    for a_i, e_i in zip(collect["cmca_audio"], collect["cmca_eeg"]):
        assert a_i.shape == collect["a_x"].shape
        assert e_i.shape == collect["e_x"].shape


def test_cmca_v_path_zeroed_reduces_to_normed_residual():
    model = tiny_model()
    for side in ("left", "right"):
        att = getattr(model.fusion.layers[0], f"{side}_att")
        att.v.w.node.value[:] = 0.0
        att.v.b.node.value[:] = 0.0
    x, eeg = tiny_inputs()
    _, collect = forward_collect(model, x, eeg)
    layer = model.fusion.layers[0]
    want_a = layer.left_norm(ops.constant(collect["a_x"])).value
    want_e = layer.right_norm(ops.constant(collect["e_x"])).value
    assert np.array_equal(collect["cmca_audio"][0], want_a)
    assert np.array_equal(collect["cmca_eeg"][0], want_e)


def test_concat_fusion_variant_shares_audio_branch_shapes():
    cmca = tiny_model()
    concat = tiny_model(fusion="concat")
    names_cmca = {p.name: p.value.shape for p in cmca.parameters
                  if not p.name.startswith("fusion")}
    names_concat = {p.name: p.value.shape for p in concat.parameters
                    if not p.name.startswith("fusion")}
    assert names_cmca == names_concat
    x, eeg = tiny_inputs()
    outs, collect = forward_collect(concat, x, eeg)
    assert collect["c_x"].shape == collect["a_x"].shape
    assert len(outs) == 2


# --- separator / masks ----------------------------------------------------------

def test_separator_dilation_schedule():
    model = BasenModel(BasenConfig(), seed=0)
    for stack in model.stacks:
        assert [b.dw.dilation for b in stack.blocks] == [2 ** d for d in range(8)]


def test_masks_are_bounded_and_counted():
    model = tiny_model()
    x, eeg = tiny_inputs()
    _, collect = forward_collect(model, x, eeg)
    assert len(collect["masks"]) == 2
    for m in collect["masks"]:
        assert m.shape == collect["w_x"].shape
        assert np.all(m > 0.0) and np.all(m < 1.0)


def test_outputs_are_decoded_masked_embeddings():
    model = tiny_model()
    x, eeg = tiny_inputs()
    outs, collect = forward_collect(model, x, eeg)
    for t, out in enumerate(outs):
        masked = collect["w_x"] * collect["masks"][t]
        want = model.decode_audio(ops.constant(masked)).value
        assert np.array_equal(out.value, want)


# --- end-to-end -------------------------------------------------------------------

@pytest.mark.parametrize("rate,seconds", [(8000.0, 1.0), (8000.0, 2.0),
                                          (14700.0, 1.0), (14700.0, 2.0)])
def test_separate_returns_input_length(rate, seconds):
    cfg = replace(tiny_config(), audio_rate=rate, eeg_channels=4)
    model = BasenModel(cfg, seed=0)
    rng = np.random.default_rng(4)
    n = int(rate * seconds)
    x = SampleBuffer(rng.normal(size=n) * 0.1, rate)
    eeg = MultiChannelSeries(rng.normal(size=(4, int(128 * seconds))), 128.0)
    outs = model.separate(x, eeg)
    assert len(outs) == 2
    assert all(len(o) == n and o.rate == rate for o in outs)


def test_separate_is_deterministic():
    model = tiny_model()
    x, eeg = tiny_inputs()
    a = model.separate(x, eeg)
    b = model.separate(x, eeg)
    for s1, s2 in zip(a, b):
        assert np.array_equal(s1.samples, s2.samples)


def test_separate_validates_rates_and_span():
    model = tiny_model()
    x, eeg = tiny_inputs()
    with pytest.raises(ModelError, match="Hz audio"):
        model.separate(SampleBuffer(x.samples, 8000.0), eeg)
    with pytest.raises(ModelError, match="Hz eeg"):
        model.separate(x, MultiChannelSeries(eeg.data, 64.0))
    long_eeg = MultiChannelSeries(np.zeros((4, 64)), 128.0)
    with pytest.raises(ModelError, match="span"):
        model.separate(x, long_eeg)


def test_forward_nodes_validates_batch_shapes():
    model = tiny_model()
    with pytest.raises(ModelError, match="multiple"):
        model.forward_nodes(ops.constant(np.zeros((1, 1, 500))),
                            ops.constant(np.zeros((1, 4, 32))))
    with pytest.raises(ModelError, match="eeg batch"):
        model.forward_nodes(ops.constant(np.zeros((1, 1, 512))),
                            ops.constant(np.zeros((1, 5, 32))))
    with pytest.raises(ModelError, match="audio batch"):
        model.forward_nodes(ops.constant(np.zeros((1, 2, 512))),
                            ops.constant(np.zeros((1, 4, 32))))


# --- parameter budget ----------------------------------------------------------------

def test_parameter_budget_default_config():
    n3 = BasenModel(BasenConfig(), seed=0).parameter_count()
    assert abs(n3 / 640000.0 - 1.0) <= 0.15
    n1 = BasenModel(BasenConfig(cmca_layers=1), seed=0).parameter_count()
    assert n1 < n3


def test_parameter_count_grows_with_cmca_layers():
    counts = [BasenModel(BasenConfig(cmca_layers=n), seed=0).parameter_count()
              for n in range(1, 6)]
    assert counts == sorted(counts)
    assert len(set(counts)) == 5


# --- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = BasenModel(tiny_config(), seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for p, q in zip(model.parameters, loaded.parameters):
        assert p.name == q.name
        assert np.array_equal(p.value.astype(np.float32), q.value)
    x, eeg = tiny_inputs()
    a = model.separate(x, eeg)
    b = loaded.separate(SampleBuffer(x.samples, 2000.0),
                        MultiChannelSeries(eeg.data, 128.0))
    for s1, s2 in zip(a, b):
        assert np.max(np.abs(s1.samples - s2.samples)) < 1e-6


def test_checkpoint_missing_tensor_rejected(tmp_path):
    model = BasenModel(tiny_config(), seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    last = model.parameters[-1]
    marker = f"{last.name} shape=".encode()
    path.write_bytes(raw[:raw.index(marker)])
    with pytest.raises(ModelError, match=f"missing=\\['{last.name}'\\]"):
        load_checkpoint(path)


def test_checkpoint_extra_tensor_rejected(tmp_path):
    model = BasenModel(tiny_config(), seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    extra = b"mystery.w shape=2\n" + np.zeros(2, dtype="<f4").tobytes()
    path.write_bytes(path.read_bytes() + extra)
    with pytest.raises(ModelError, match="extra=\\['mystery.w'\\]"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    model = BasenModel(tiny_config(), seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    assert b"mask.out.b shape=16\n" in raw
    path.write_bytes(raw.replace(b"mask.out.b shape=16\n",
                                 b"mask.out.b shape=4x4\n"))
    with pytest.raises(ModelError, match="shape_mismatch=\\['mask.out.b'\\]"):
        load_checkpoint(path)


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOT-A-CKPT\n\n")
    with pytest.raises(ModelError, match="magic"):
        load_checkpoint(path)
