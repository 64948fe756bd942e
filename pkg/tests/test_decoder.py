import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from inpaintloc.data import DimensionMismatchError, ValidationError
from inpaintloc.decoder import (
    DecoderSpec,
    build_decoder,
    channel_schedule,
    count_parameters,
    forward,
    load_decoder_checkpoint,
    save_decoder_checkpoint,
)


def conv_oracle(d: int, m: int) -> int:
    """25 * sum(in*out) over 5x5 convs, plus BN affine terms and the final bias."""
    total, c = 0, d
    for _ in range(4):
        total += 25 * c * (c // 2) + 2 * (c // 2)
        c //= 2
        total += (m - 1) * (25 * c * c + 2 * c)
    return total + 25 * c + 1


def test_conv_counts_match_closed_form():
    for name, m, reference in [("conv-4", 1, 17.4e6), ("conv-12", 3, 34.8e6), ("conv-20", 5, 52.2e6)]:
        n = count_parameters(DecoderSpec.named(name, 1024))
        assert n == conv_oracle(1024, m)
        assert abs(n - reference) / reference < 0.01


def test_linear_and_attention_counts():
    assert count_parameters(DecoderSpec.named("linear", 1024)) == 1025
    n = count_parameters(DecoderSpec.named("attention", 1024))
    assert abs(n - 25.1e6) / 25.1e6 < 0.02
    # the bare-weight estimate ignores biases, norms and positions
    assert n >= 2 * (4 * 1024**2 + 2 * 1024 * 4096)


def test_count_matches_built_model():
    spec = DecoderSpec.named("conv-4", 64)
    model = build_decoder(spec)
    assert count_parameters(spec) == sum(p.numel() for p in model.parameters())


def test_channel_schedule():
    assert channel_schedule(DecoderSpec.named("conv-4", 1024)) == [
        (1024, 512), (512, 256), (256, 128), (128, 64), (64, 1)]
    sched = channel_schedule(DecoderSpec.named("conv-12", 1024))
    assert sched[:3] == [(1024, 512), (512, 512), (512, 512)]
    assert len(sched) == 13 and sched[-1] == (64, 1)
    model = build_decoder(DecoderSpec.named("conv-12", 64))
    assert model.channel_schedule == channel_schedule(model.spec)


@pytest.mark.parametrize("name", ["linear", "attention", "conv-4", "conv-12"])
def test_output_shape(name):
    dim = 64
    kw = dict(attn_hidden=32, attn_heads=4, attn_mlp=64) if name == "attention" else {}
    model = build_decoder(DecoderSpec.named(name, dim, **kw)).eval()
    with torch.no_grad():
        out = forward(model, torch.randn(2, dim, 16, 16))
    assert out.shape == (2, 1, 256, 256)
    assert torch.isfinite(out).all()


def test_resnet_grid_output_is_sixteen_times_larger():
    model = build_decoder(DecoderSpec.named("conv-4", 32, input_grid=(14, 14))).eval()
    with torch.no_grad():
        assert forward(model, torch.randn(1, 32, 14, 14)).shape == (1, 1, 224, 224)


def test_concat_width_conv20_shape():
    model = build_decoder(DecoderSpec.named("conv-20", 2048)).eval()
    with torch.no_grad():
        out = forward(model, torch.randn(1, 2048, 16, 16))
    assert out.shape == (1, 1, 256, 256)


def test_zero_init_final_gives_half():
    for name in ["conv-4", "linear", "attention"]:
        kw = dict(attn_hidden=32, attn_heads=4, attn_mlp=64) if name == "attention" else {}
        model = build_decoder(DecoderSpec.named(name, 32, zero_init_final=True, **kw)).eval()
        with torch.no_grad():
            p = torch.sigmoid(forward(model, torch.randn(2, 32, 16, 16)))
        assert torch.equal(p, torch.full_like(p, 0.5))


def test_seeded_init_is_deterministic():
    a = build_decoder(DecoderSpec.named("conv-4", 32, init_seed=3))
    b = build_decoder(DecoderSpec.named("conv-4", 32, init_seed=3))
    c = build_decoder(DecoderSpec.named("conv-4", 32, init_seed=4))
    for (ka, va), (_, vb), (_, vc) in zip(a.state_dict().items(), b.state_dict().items(), c.state_dict().items()):
        assert torch.equal(va, vb)
    assert not torch.equal(a.final.weight, c.final.weight)


@settings(max_examples=10, deadline=None)
@given(dy=st.integers(-3, 3), dx=st.integers(-3, 3))
def test_conv_body_translation_equivariant(dy, dx):
    torch.manual_seed(0)
    model = build_decoder(DecoderSpec.named("conv-4", 16)).eval()
    body = model.blocks[0].body
    x = torch.randn(1, 16, 24, 24)
    shifted = torch.roll(x, shifts=(dy, dx), dims=(2, 3))
    with torch.no_grad():
        a = torch.roll(body(x), shifts=(dy, dx), dims=(2, 3))
        b = body(shifted)
    # away from the borders (and the wrap seam) the responses agree
    r = 2 + 3
    assert torch.allclose(a[..., r:-r, r:-r], b[..., r:-r, r:-r], atol=1e-5)


def test_dim_mismatch():
    model = build_decoder(DecoderSpec.named("conv-4", 32))
    with pytest.raises(DimensionMismatchError):
        forward(model, torch.randn(1, 64, 16, 16))
    with pytest.raises(DimensionMismatchError):
        forward(model, torch.randn(64, 16, 16))


def test_invalid_specs():
    with pytest.raises(ValidationError):
        DecoderSpec.named("conv-8", 1024)
    with pytest.raises(ValidationError):
        DecoderSpec("conv", 1024, sub_blocks=0)
    with pytest.raises(ValidationError):
        DecoderSpec("conv", 1000)


def test_checkpoint_round_trip(tmp_path):
    model = build_decoder(DecoderSpec.named("conv-4", 32, init_seed=5)).eval()
    x = torch.randn(1, 32, 16, 16)
    path = save_decoder_checkpoint(tmp_path / "m.zip", model, backbone_digest="abc")
    back, meta = load_decoder_checkpoint(path)
    assert meta["backbone_digest"] == "abc"
    assert meta["channel_schedule"][0] == [32, 16]
    with torch.no_grad():
        assert torch.equal(model(x), back(x))


def test_bad_checkpoint(tmp_path):
    p = tmp_path / "junk.zip"
    p.write_bytes(b"not a zip")
    with pytest.raises(ValidationError):
        load_decoder_checkpoint(p)
