import json

import numpy as np
import pytest

from speckle_lab.fields import DisplacementField, GrayImage, StrainField
from speckle_lab.models import (INCEPTION_1, INCEPTION_2, CnnPredictor, InceptionSpec,
                                ModelCheckpoint, ModelConfig, build_encoder, build_model,
                                encoder_layer_table, forward_pair)
from speckle_lab.nn import AdamState, Tensor

TOY = ModelConfig(width_scale=0.125)


@pytest.fixture(scope="module")
def toy():
    return build_model(TOY)


def test_inception_branch_sums():
    assert InceptionSpec(*INCEPTION_1).out_channels == 480
    assert InceptionSpec(*INCEPTION_2).out_channels == 832


def test_layer_table_full_width():
    rows = encoder_layer_table(build_encoder(ModelConfig()))
    assert rows[0]["kernels"] == 64 and rows[0]["kernel_size"] == (7, 7)
    assert rows[3]["kernels"] == 192 and rows[3]["kernel_size"] == (3, 3)
    assert rows[6]["filters"] == INCEPTION_1 and rows[6]["out_channels"] == 480
    assert rows[8]["filters"] == INCEPTION_2 and rows[8]["out_channels"] == 832
    assert all(rows[i]["pool_size"] == (3, 3) and rows[i]["stride"] == (2, 2) for i in (2, 5, 7, 9))


def test_spatial_trace_256():
    enc = build_encoder(ModelConfig(width_scale=0.125))
    enc.eval()
    x = Tensor(np.zeros((1, 2, 256, 256), np.float32))
    sizes = []
    for layer in (enc.conv1, enc.pool1, enc.conv2, enc.pool2, enc.inception1, enc.pool3,
                  enc.inception2, enc.pool4, enc.bottleneck, enc.avgpool):
        x = layer(x)
        sizes.append(x.shape[2])
    assert sizes == [128, 64, 64, 32, 32, 16, 16, 8, 8, 8]


@pytest.mark.parametrize("side", [32, 64, 96, 160, 256])
@pytest.mark.parametrize("head, channels", [("displacement", 2), ("strain", 3)])
def test_output_shape(side, head, channels):
    model = build_model(ModelConfig(head=head, width_scale=0.125))
    model.eval()
    out = model(np.zeros((1, 2, side, side), np.float32))
    assert out.shape == (1, channels, side, side)


def test_rejects_bad_sides(toy):
    with pytest.raises(ValueError, match="multiples of 32"):
        toy(np.zeros((1, 2, 48, 64), np.float32))


def test_toy_parameter_budget():
    full = build_model(ModelConfig()).parameter_count()
    assert build_model(TOY).parameter_count() < full / 32


def test_width_scale_rounds_up():
    cfg = ModelConfig(width_scale=0.1)
    assert cfg.ch(64) == 7 and cfg.ch(192) == 20


def test_forward_pair_deterministic(toy, speckle64):
    a = forward_pair(toy, speckle64, speckle64)
    b = forward_pair(build_model(TOY), speckle64, speckle64)
    assert isinstance(a, DisplacementField) and np.all(np.isfinite(a.as_array()))
    assert a == b


def test_forward_pair_shape_mismatch(toy, speckle64):
    with pytest.raises(ValueError):
        forward_pair(toy, speckle64, GrayImage(np.zeros((32, 64))))


def test_strain_predictor(speckle64):
    out = CnnPredictor(build_model(ModelConfig(head="strain", width_scale=0.125)))(speckle64, speckle64)
    assert isinstance(out, StrainField)


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path, toy):
        state = AdamState()
        params = dict(toy.named_parameters())
        state.m = {k: np.full_like(p.data, 0.5) for k, p in params.items()}
        state.v = {k: np.full_like(p.data, 0.25) for k, p in params.items()}
        state.t = 7
        ck = ModelCheckpoint.from_model(toy, state, epoch=3, extra={"val_mae": 0.1})
        ck.save(tmp_path / "a.ckpt")
        again = ModelCheckpoint.load(tmp_path / "a.ckpt")
        again.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert again.epoch == 3 and again.optimizer.t == 7 and again.extra == {"val_mae": 0.1}
        for k, v in ck.params.items():
            assert np.array_equal(v, again.params[k])

    def test_forward_bit_identical(self, tmp_path, speckle64):
        model = build_model(TOY)
        model.train()
        model(np.random.default_rng(0).random((4, 2, 64, 64), dtype=np.float32),
              rng=np.random.default_rng(1))  # move BN statistics off their defaults
        before = forward_pair(model, speckle64, speckle64)
        ModelCheckpoint.from_model(model).save(tmp_path / "m.ckpt")
        after = forward_pair(ModelCheckpoint.load(tmp_path / "m.ckpt").to_model(), speckle64, speckle64)
        assert np.array_equal(before.as_array(), after.as_array())

    def test_header_layout(self, toy):
        raw = ModelCheckpoint.from_model(toy).to_bytes()
        assert raw[:8] == b"SPKLCKPT"
        hlen = int.from_bytes(raw[8:16], "little")
        header = json.loads(raw[16:16 + hlen])
        total = sum(t["nbytes"] for t in header["tensors"])
        assert len(raw) == 16 + hlen + total
        offsets = [t["offset"] for t in header["tensors"]]
        assert offsets == sorted(offsets) and offsets[0] == 0

    def test_architecture_mismatch(self, toy):
        other = build_model(ModelConfig(width_scale=0.25))
        with pytest.raises(ValueError, match="conv1"):
            ModelCheckpoint.from_model(toy).load_into(other)

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            ModelCheckpoint.from_bytes(b"NOTACKPT" + bytes(8))
