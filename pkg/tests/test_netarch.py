import numpy as np
import pytest
import torch

from mcseg.netarch import (
    Decoder, NetworkConfig, NetworkConfigError, build_decoder, build_network, forward,
    forward_with_dropout, load_checkpoint, parameter_checksum, parameter_groups, save_checkpoint,
)

TINY = NetworkConfig(levels=2, base_channels=4, norm_groups=2)


def x_of(shape, seed=0, dtype=torch.float32):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


@pytest.mark.parametrize("cfg,shape", [
    (NetworkConfig(levels=2, base_channels=4), (2, 1, 6, 4, 8)),
    (NetworkConfig(levels=3, base_channels=8, norm="batch"), (1, 1, 8, 12, 4)),
    (NetworkConfig(levels=4, base_channels=4, norm="none"), (2, 1, 32, 32, 32)),
])
def test_shape_preserved_and_open_unit_range(cfg, shape):
    net = build_network(cfg, seed=1).eval()
    with torch.no_grad():
        pa, pb = forward(net, x_of(shape))
    assert pa.shape == pb.shape == shape
    for p in (pa, pb):
        assert (p > 0).all() and (p < 1).all()
    assert (pa - pb).abs().max() > 0


def test_config_errors():
    with pytest.raises(NetworkConfigError):
        NetworkConfig(levels=1)
    with pytest.raises(NetworkConfigError):
        NetworkConfig(levels=3, channels=(8, 8, 16))
    with pytest.raises(NetworkConfigError):
        NetworkConfig(dropout_rate=1.0)
    with pytest.raises(NetworkConfigError):
        NetworkConfig(decoder_b="nearest")
    net = build_network(NetworkConfig(levels=3, base_channels=4), seed=0)
    with pytest.raises(NetworkConfigError, match="divisible"):
        forward(net, torch.zeros(1, 1, 8, 8, 6))


def test_default_channel_schedule():
    assert NetworkConfig().channels == (16, 32, 64, 128, 256)


@pytest.mark.parametrize("kind", ["transposed_conv", "trilinear"])
def test_decoder_upsamples_by_two(kind):
    cfg = NetworkConfig(levels=2, base_channels=4, norm="none")
    dec = build_decoder(cfg, kind)
    skip = torch.zeros(1, 4, 16, 16, 16)
    out = dec([skip, torch.randn(1, 8, 8, 8, 8)])
    assert out.shape == (1, 1, 16, 16, 16)
    assert dec.level0.up(torch.randn(1, 8, 8, 8, 8)).shape == (1, 4, 16, 16, 16)


def test_trilinear_of_constant_is_constant():
    cfg = NetworkConfig(levels=2, base_channels=4, norm="none")
    up = build_decoder(cfg, "trilinear").level0.up
    const = torch.full((1, 8, 4, 4, 4), 0.7)
    interp = torch.nn.functional.interpolate(const, scale_factor=2, mode="trilinear",
                                             align_corners=False)
    assert torch.allclose(interp, const[..., :1, :1, :1].expand_as(interp), atol=1e-7)
    # zero-padding of the learned convolution only affects the outermost shell
    out = up(const)
    inner = out[..., 1:-1, 1:-1, 1:-1]
    assert torch.allclose(inner, inner[..., :1, :1, :1].expand_as(inner), atol=1e-6)


def test_only_decoder_b_has_no_transposed_conv():
    net = build_network(TINY)
    kinds_a = {type(m).__name__ for m in net.decoderA.modules()}
    kinds_b = {type(m).__name__ for m in net.decoderB.modules()}
    assert "ConvTranspose3d" in kinds_a and "ConvTranspose3d" not in kinds_b
    with pytest.raises(NetworkConfigError):
        Decoder(TINY, "pixelshuffle")


def test_dropout_seeded_and_inactive_by_default():
    net = build_network(NetworkConfig(levels=2, base_channels=4, dropout_rate=0.5), seed=0)
    x = x_of((1, 1, 8, 8, 8))
    with torch.no_grad():
        a1 = forward_with_dropout(net, x, 3)
        a2 = forward_with_dropout(net, x, 3)
        b = forward_with_dropout(net, x, 4)
        plain1, plain2 = forward(net, x), forward(net, x)
    assert all(torch.equal(u, v) for u, v in zip(a1, a2))
    assert (a1[0] - b[0]).abs().max() > 0
    assert all(torch.equal(u, v) for u, v in zip(plain1, plain2))
    assert (a1[0] - plain1[0]).abs().max() > 0


def test_zero_dropout_equals_forward():
    net = build_network(NetworkConfig(levels=2, base_channels=4, dropout_rate=0.0), seed=0)
    x = x_of((1, 1, 8, 8, 8))
    with torch.no_grad():
        ref = forward(net, x)
        for s in (0, 1, 99):
            out = forward_with_dropout(net, x, s)
            assert all(torch.equal(u, v) for u, v in zip(ref, out))


@pytest.mark.parametrize("which,other", [("decoderA", 1), ("decoderB", 0)])
def test_perturbing_one_decoder_leaves_other_bit_identical(which, other):
    net = build_network(TINY, seed=2)
    x = x_of((1, 1, 4, 4, 4))
    with torch.no_grad():
        before = forward(net, x)
        for _, p in parameter_groups(net)[which]:
            p.add_(0.1)
        after = forward(net, x)
    assert torch.equal(before[other], after[other])
    assert not torch.equal(before[1 - other], after[1 - other])


def test_decoders_have_independent_parameters():
    net = build_network(TINY)
    groups = parameter_groups(net)
    ids = {g: {id(p) for _, p in groups[g]} for g in groups}
    assert not ids["decoderA"] & ids["decoderB"]
    assert not ids["encoder"] & (ids["decoderA"] | ids["decoderB"])
    assert sum(len(v) for v in groups.values()) == len(list(net.parameters()))


def test_finite_difference_gradients():
    net = build_network(TINY, seed=3, dtype=torch.float64)
    x = x_of((1, 1, 4, 4, 4), dtype=torch.float64)
    w = x_of((1, 1, 4, 4, 4), seed=1, dtype=torch.float64)

    def scalar():
        pa, pb = net(x)
        return (w * pa).sum() + (pb ** 2).sum()

    net.zero_grad()
    scalar().backward()
    rng = np.random.default_rng(0)
    checked = 0
    for group, params in parameter_groups(net).items():
        for name, p in params:
            if not name.endswith("weight") or p.dim() < 2:
                continue
            for idx in rng.choice(p.numel(), size=2, replace=False):
                h = 1e-6
                flat = p.data.view(-1)
                orig = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = orig + h
                    up = scalar().item()
                    flat[idx] = orig - h
                    down = scalar().item()
                    flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = p.grad.view(-1)[idx].item()
                assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6), (name, fd, an)
                checked += 1
    assert checked >= 6


def test_checkpoint_roundtrip(tmp_path):
    net = build_network(NetworkConfig(levels=3, base_channels=4), seed=5)
    save_checkpoint(net, tmp_path / "m.pt", note="x")
    back, payload = load_checkpoint(tmp_path / "m.pt")
    assert payload["note"] == "x"
    assert parameter_checksum(back) == parameter_checksum(net)
    assert back.config == net.config
    names = set(payload["params"])
    assert "encoder.level0.block0.conv.weight" in names
    assert "encoder.level1.block1.conv.weight" in names
    assert all(n.split(".")[0] in ("encoder", "decoderA", "decoderB") for n in names)
    x = x_of((1, 1, 8, 8, 8))
    with torch.no_grad():
        assert all(torch.equal(u, v) for u, v in zip(forward(net.eval(), x), forward(back, x)))


def test_build_is_seeded_and_preserves_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(1)
    torch.manual_seed(123)
    a = build_network(TINY, seed=7)
    got = torch.rand(1)
    assert torch.equal(got, expected)
    assert parameter_checksum(a) == parameter_checksum(build_network(TINY, seed=7))
    assert parameter_checksum(a) != parameter_checksum(build_network(TINY, seed=8))
