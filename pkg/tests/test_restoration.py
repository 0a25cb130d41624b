import numpy as np
import pytest
import torch

from kcd.fourier import ValidationError
from kcd.restoration import (CheckpointError, ConstantRestorer, OracleRestorer, ReferenceUNet,
                             UNetConfig, UNetRestorer, complex_to_channels, load_checkpoint,
                             save_checkpoint, time_embed)
from kcd.training import l1_loss

from conftest import random_complex


def test_oracle_and_constant(rng):
    x0 = random_complex(rng, (8, 8))
    xt = random_complex(rng, (8, 8))
    assert np.array_equal(OracleRestorer(x0).apply(xt, 3, 5), x0)
    assert np.all(ConstantRestorer(np.zeros((8, 8))).apply(xt, 1, 5) == 0)
    c = random_complex(rng, (8, 8))
    assert np.array_equal(ConstantRestorer(c).apply(xt, 0, 1), c)
    with pytest.raises(ValidationError):
        OracleRestorer(x0).apply(xt, 6, 5)


def test_untrained_unet_is_zero_map(rng):
    torch.manual_seed(0)
    model = UNetRestorer(ReferenceUNet(UNetConfig(depth=2, base_channels=8)))
    for shape in [(16, 16), (12, 20), (10, 10)]:
        out = model.apply(random_complex(rng, shape), 3, 8)
        assert out.shape == shape
        assert np.all(out == 0)


def test_unet_shape_and_finiteness_after_perturbation(rng):
    torch.manual_seed(1)
    net = ReferenceUNet(UNetConfig(depth=3, base_channels=8))
    torch.nn.init.normal_(net.out.weight, std=0.1)
    model = UNetRestorer(net)
    for shape in [(64, 64), (30, 44), (9, 9)]:
        x = random_complex(rng, shape)
        out = model.apply(x, 5, 16)
        assert out.shape == shape and np.all(np.isfinite(out))
        assert np.array_equal(out, model.apply(x, 5, 16))
    assert np.all(np.isfinite(model.apply(np.zeros((16, 16)), 1, 4)))


def test_unet_is_scale_equivariant(rng):
    torch.manual_seed(2)
    net = ReferenceUNet(UNetConfig(depth=2, base_channels=8)).double()
    torch.nn.init.normal_(net.out.weight, std=0.1)
    model = UNetRestorer(net)
    x = random_complex(rng, (16, 16))
    assert np.allclose(model.apply(3.0 * x, 2, 4), 3.0 * model.apply(x, 2, 4), atol=1e-12)


def test_time_embedding():
    e = time_embed(0, 125, 16)
    assert np.all(e[:8] == 0) and np.all(e[8:] == 1)
    table = time_embed(np.arange(126), 125, 16)
    assert len({tuple(row) for row in table}) == 126
    for dim in (2, 4):
        rows = time_embed(np.arange(126), 125, dim)
        dists = np.linalg.norm(rows[:, None] - rows[None], axis=-1) + np.eye(126)
        assert dists.min() > 0
    assert np.array_equal(time_embed(7, 125, 16), time_embed(7, 125, 16))
    with pytest.raises(ValidationError):
        time_embed(0, 10, 3)


def test_network_embedding_matches_numpy():
    net = ReferenceUNet(UNetConfig(depth=1, base_channels=2, time_embedding_dim=8)).double()
    emb = net.embed(torch.tensor([0, 3, 10]), 10).numpy()
    assert np.allclose(emb, time_embed(np.array([0, 3, 10]), 10, 8), atol=1e-15)


def test_checkpoint_round_trip(tmp_path, rng):
    torch.manual_seed(3)
    net = ReferenceUNet(UNetConfig(depth=2, base_channels=4, time_embedding_dim=8))
    torch.nn.init.normal_(net.out.weight, std=0.2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path, {"mask_family": "cartesian-random"})
    loaded = load_checkpoint(path)
    x = random_complex(rng, (16, 16))
    assert np.array_equal(UNetRestorer(net).apply(x, 2, 5), loaded.apply(x, 2, 5))
    assert loaded.meta["mask_family"] == "cartesian-random"
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_config=UNetConfig(depth=3, base_channels=4, time_embedding_dim=8))


def test_checkpoint_wrong_architecture_in_file(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(ReferenceUNet(UNetConfig(depth=2, base_channels=4)), path)
    from kcd.restoration import load_state_arrays
    from kcd.container import read_container

    _, tensors = read_container(path, b"KCDMODL\x00", 1)
    with pytest.raises(CheckpointError):
        load_state_arrays(ReferenceUNet(UNetConfig(depth=3, base_channels=4)), tensors)


def test_checkpoint_detects_single_byte_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(ReferenceUNet(UNetConfig(depth=1, base_channels=2)), path)
    raw = bytearray(path.read_bytes())
    for pos in (3, 40, len(raw) // 2, len(raw) - 40, len(raw) - 1):
        bad = raw.copy()
        bad[pos] ^= 0x01
        (tmp_path / "bad.ckpt").write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(raw[:30]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


def gradient_check(config, shape, seed):
    """Max relative error between autograd and central differences of the L1 loss."""
    torch.manual_seed(seed)
    net = ReferenceUNet(config).double()
    torch.nn.init.normal_(net.out.weight, std=0.5)
    torch.nn.init.normal_(net.out.bias, std=0.1)
    rng = np.random.default_rng(seed)
    x = complex_to_channels(random_complex(rng, (2, *shape)), torch.float64)
    target = complex_to_channels(random_complex(rng, (2, *shape)), torch.float64)
    t = torch.tensor([1, 3])

    def loss_fn():
        return l1_loss(net(x, t, 4), target)

    with torch.no_grad():
        residual = (net(x, t, 4) - target).abs().min().item()
    params = list(net.parameters())
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    h = 1e-6
    num, ana = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num.append((up - down) / (2 * h))
                ana.append(gflat[i].item())
    num, ana = np.array(num), np.array(ana)
    rel = np.linalg.norm(num - ana) / np.linalg.norm(num)
    return residual, rel, num.size


def test_gradient_check_4x4():
    residual, rel, n = gradient_check(UNetConfig(depth=1, base_channels=2, time_embedding_dim=4), (4, 4), 0)
    assert residual > 1e-4, "base point must be away from L1 kinks"
    assert n > 100
    assert rel < 1e-3


def test_gradient_check_depth2():
    residual, rel, _ = gradient_check(UNetConfig(depth=2, base_channels=2, time_embedding_dim=4), (8, 8), 1)
    assert residual > 1e-4
    assert rel < 1e-3
