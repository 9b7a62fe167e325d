import json
import struct

import numpy as np
import pytest

from mcseg import tensor as T
from mcseg.errors import ConfigError, FormatError, ShapeError
from mcseg.model import (NetConfig, SegNet, build_encoder, encoder_output_size, forward, load_weights,
                         parameter_count, read_weights_header, save_weights, ModelWeights)


def stride_oracle(size):
    """Stage sizes composed from floor((s + 2p - k) / stride) + 1, written out longhand."""
    s = (size + 6 - 7) // 2 + 1  # 7x7/2 stem conv
    s = (s + 2 - 3) // 2 + 1  # 3x3/2 max-pool
    sizes = [s, s]  # stage 1 keeps resolution
    for _ in range(3):
        s = (s + 2 - 3) // 2 + 1
        sizes.append(s)
    return sizes


@pytest.fixture(scope="module")
def toy_inputs():
    rng = np.random.default_rng(0)
    return rng.random((2, 3, 64, 96)).astype(np.float32), rng.random((2, 3, 64, 96)).astype(np.float32)


def test_full_encoder_stage_shapes():
    enc = build_encoder(NetConfig())
    x = np.zeros((1, 3, 224, 224), np.float32)
    feats = enc(x, training=False)
    assert [f.shape[2] for f in feats] == [56, 56, 28, 14, 7] == stride_oracle(224)
    assert [f.shape[1] for f in feats] == [64, 256, 512, 1024, 2048]


def test_quarter_width_deepest_channels():
    enc = build_encoder(NetConfig(width_mult=0.25, blocks_per_stage=(1, 1, 1, 1)))
    assert enc.channels[-1] == 512


@pytest.mark.parametrize("size", [50, 77, 96, 101])
def test_encoder_odd_sizes_follow_stride_arithmetic(size):
    enc = build_encoder(NetConfig.toy())
    feats = enc(np.zeros((1, 3, size, size), np.float32), training=False)
    assert [f.shape[2] for f in feats] == stride_oracle(size) == encoder_output_size(size)


def test_config_validation_names_field():
    with pytest.raises(ConfigError) as err:
        NetConfig(width_mult=0.001)
    assert err.value.field == "width_mult"
    with pytest.raises(ConfigError) as err:
        NetConfig(variant="triple")
    assert err.value.field == "variant"
    with pytest.raises(ConfigError):
        NetConfig(blocks_per_stage=(1, 1, 1))


@pytest.mark.parametrize("variant", ["dual_diff", "dual_flow", "single"])
def test_output_shape(variant, toy_inputs):
    frame, cue = toy_inputs
    net = SegNet(NetConfig.toy(variant), seed=0)
    out = net(frame, cue if variant != "single" else None)
    assert out.shape == (2, 2, 64, 96)


def test_rejects_non_multiple_of_32(toy_inputs):
    net = SegNet(NetConfig.toy("single"))
    with pytest.raises(ShapeError):
        net(np.zeros((1, 3, 50, 64), np.float32))


def test_cue_contract(toy_inputs):
    frame, cue = toy_inputs
    with pytest.raises(ShapeError, match="dual_diff"):
        SegNet(NetConfig.toy("dual_diff"))(frame)
    with pytest.raises(ShapeError, match="dual_flow"):
        SegNet(NetConfig.toy("dual_flow"))(frame, cue[:, :, :32])
    with pytest.raises(ShapeError):
        SegNet(NetConfig.toy("single"))(frame, cue)


def _enumerate_params(config):
    """Count weights from the architecture description alone."""
    def ch(c):
        return max(1, round(c * config.width_mult))

    def conv_bn(cin, cout, k):
        return cin * cout * k * k + 2 * cout

    def encoder():
        total = conv_bn(3, ch(64), 7)
        cin = ch(64)
        for n, width in zip(config.blocks_per_stage, (256, 512, 1024, 2048)):
            cout, mid = ch(width), ch(width // 4)
            for b in range(n):
                total += conv_bn(cin, mid, 1) + conv_bn(mid, mid, 3) + conv_bn(mid, cout, 1)
                if b == 0:
                    total += conv_bn(cin, cout, 1)
                cin = cout
        return total, [ch(64), ch(256), ch(512), ch(1024), ch(2048)]

    enc_total, enc_ch = encoder()
    mult = 1 if config.variant == "single" else 2
    total = mult * enc_total
    total += conv_bn(mult * enc_ch[-1], ch(config.bottleneck_channels), 1)
    skips = [[enc_ch[3]], [enc_ch[2]], [enc_ch[0], enc_ch[1]], [], []]
    cin = ch(config.bottleneck_channels)
    for dch, sk in zip(config.decoder_channels, skips):
        total += conv_bn(cin + mult * sum(sk), ch(dch), 3)
        cin = ch(dch)
    return total + cin * 2 + 2


@pytest.mark.parametrize("variant", ["dual_diff", "single"])
def test_parameter_count_matches_enumeration(variant):
    cfg = NetConfig.toy(variant)
    assert parameter_count(cfg) == _enumerate_params(cfg)


def test_dual_has_more_parameters_than_single():
    assert parameter_count(NetConfig.toy("dual_diff")) > parameter_count(NetConfig.toy("single"))


def test_full_fusion_widths():
    net = SegNet(NetConfig(), seed=None)
    assert net.fusion_in == 4096
    assert net.fusion.conv.weight.shape == (1024, 4096, 1, 1)


def test_eval_forward_deterministic(toy_inputs):
    frame, cue = toy_inputs
    net = SegNet(NetConfig.toy(), seed=3)
    a = net(frame, cue).data
    b = net(frame, cue).data
    assert a.tobytes() == b.tobytes()
    weights = net.state()
    c = forward(frame, cue, NetConfig.toy(), weights).data
    assert c.tobytes() == a.tobytes()


def test_batch_permutation_equivariance(toy_inputs):
    rng = np.random.default_rng(1)
    frame = rng.random((4, 3, 64, 64)).astype(np.float32)
    cue = rng.random((4, 3, 64, 64)).astype(np.float32)
    net = SegNet(NetConfig.toy(), seed=0)
    perm = np.array([2, 0, 3, 1])
    out = net(frame, cue).data
    out_p = net(frame[perm], cue[perm]).data
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_one_step_decreases_loss(seed):
    rng = np.random.default_rng(100 + seed)
    frame = rng.random((1, 3, 64, 64)).astype(np.float32)
    cue = rng.random((1, 3, 64, 64)).astype(np.float32)
    target = np.zeros((1, 64, 64), np.int64)
    target[:, 16:40, 20:44] = 1
    net = SegNet(NetConfig.toy(), seed=seed)
    params = net.parameters()
    # training-mode statistics of a single example are fixed, so the loss is a
    # deterministic function of the weights
    before = T.softmax_cross_entropy(net(frame, cue, training=True), target)
    before.backward()
    T.adam_step({n: p.data for n, p in params.items()}, {n: p.grad for n, p in params.items()},
                T.AdamState(lr=1e-3))
    after = T.softmax_cross_entropy(net(frame, cue, training=True), target)
    assert after.item() < before.item()


# ------------------------------------------------------------ checkpoints


def test_weights_roundtrip(tmp_path):
    net = SegNet(NetConfig.toy(), seed=7)
    w = net.state()
    path = tmp_path / "w.mcw"
    save_weights(w, path)
    back = load_weights(path, NetConfig.toy())
    assert list(back.tensors) == list(w.tensors)
    for name in w.tensors:
        assert back.tensors[name].tobytes() == w.tensors[name].tobytes()
    assert back.config == NetConfig.toy()
    assert back.roles["frame_encoder.stem.bn.running_mean"] == "buffer"


def test_weights_roundtrip_random_instances(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "r.mcw"
    for i in range(1000):
        tensors = {f"t{j}": rng.normal(size=tuple(rng.integers(1, 4, size=rng.integers(1, 5)))).astype(np.float32)
                   for j in range(rng.integers(1, 4))}
        w = ModelWeights(tensors)
        save_weights(w, path)
        back = load_weights(path)
        assert all(back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].shape == v.shape
                   for k, v in tensors.items())


def test_header_layout_for_one_tensor(tmp_path):
    path = tmp_path / "one.mcw"
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    save_weights(ModelWeights({"w": arr}), path)
    raw = path.read_bytes()
    assert raw[:8] == b"MCSEGW01"
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen])
    assert header["tensors"] == [{"name": "w", "role": "param", "dtype": "float32", "shape": [2, 3],
                                  "offset": 0, "nbytes": 24}]
    assert len(raw) == 16 + hlen + 24
    assert raw[16 + hlen:] == arr.astype("<f4").tobytes()
    assert read_weights_header(path)["config"] is None


def test_dual_weights_into_single_config(tmp_path):
    path = tmp_path / "dual.mcw"
    save_weights(SegNet(NetConfig.toy("dual_diff"), seed=0).state(), path)
    with pytest.raises(FormatError, match="parameter"):
        load_weights(path, NetConfig.toy("single"))


def test_single_weights_into_dual_config_names_missing(tmp_path):
    path = tmp_path / "single.mcw"
    save_weights(SegNet(NetConfig.toy("single"), seed=0).state(), path)
    with pytest.raises(FormatError, match="cue_encoder.stem.conv.weight"):
        load_weights(path, NetConfig.toy("dual_diff"))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.mcw"
    path.write_bytes(b"NOTMAGIC" + bytes(16))
    with pytest.raises(FormatError):
        load_weights(path)


def test_refuses_non_finite(tmp_path):
    with pytest.raises(ShapeError):
        save_weights(ModelWeights({"w": np.array([np.nan], np.float32)}), tmp_path / "x.mcw")
