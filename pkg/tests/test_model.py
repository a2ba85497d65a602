import numpy as np
import pytest
import torch

from eegd3.model import Checkpoint, ConfigError, Decomposer, ModelConfig, ShapeMismatch, forward_latent, \
    from_dict, spatial_relevance
from eegd3.sequencing import SequenceMappings, UnknownDataset, bin_loss, forward_bins


def _small(C=3, E=4, T=64, **kw):
    return ModelConfig(n_electrodes=E, n_times=T, fs=64.0, n_components=C, kernel1=9, kernel2=5, **kw)


def test_default_shapes():
    torch.manual_seed(0)
    model = Decomposer(ModelConfig()).eval()
    z, shapes = model(torch.randn(2, 28, 240), return_shapes=True)
    assert shapes == [(16, 28, 240), (32, 240), (64, 240), (64, 60), (128, 60), (128,), (16,)]
    assert z.shape == (2, 16)


def test_pool_truncates_remainder():
    model = Decomposer(_small(T=66)).eval()
    _, shapes = model(torch.randn(1, 4, 66), return_shapes=True)
    assert shapes[3] == (3 * 2 * 2, 16)


def test_latent_in_open_unit_interval():
    torch.manual_seed(1)
    z = Decomposer(_small()).eval()(torch.randn(8, 4, 64) * 10)
    assert torch.all((z > 0) & (z < 1))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Decomposer(_small())(torch.randn(1, 5, 64))


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(kernel1=80)
    with pytest.raises(ConfigError):
        from_dict(ModelConfig, {"n_components": 3, "bogus": 1})


def test_eval_mode_deterministic():
    torch.manual_seed(2)
    model = Decomposer(_small())
    x = np.random.default_rng(0).standard_normal((4, 64))
    a = forward_latent(model, x)
    b = forward_latent(model, x)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        forward_latent(model, x, mode="fast")


def _randomize(model, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, t in list(model.named_parameters()) + list(model.named_buffers()):
            if not t.is_floating_point():
                continue
            if name.endswith("running_var"):
                t.copy_(torch.rand(t.shape, generator=g, dtype=t.dtype) + 0.5)
            elif name.startswith("filter."):
                continue
            else:
                t.copy_(torch.randn(t.shape, generator=g, dtype=t.dtype) * 0.3)


@pytest.mark.parametrize("seed", range(10))
def test_perturbing_one_group_leaves_others_bitwise(seed):
    torch.manual_seed(seed)
    model = Decomposer(_small(C=4)).double().eval()
    _randomize(model, seed)
    x = torch.randn(3, 4, 64, dtype=torch.float64)
    before = model(x)
    target = seed % 4
    g = torch.Generator().manual_seed(100 + seed)
    with torch.no_grad():
        for name, view in model.group_parameters(target).items():
            if view.is_floating_point():
                view.add_(torch.rand(view.shape, generator=g, dtype=view.dtype) * 0.5 + 0.1)
    after = model(x)
    for c in range(4):
        if c == target:
            assert not torch.equal(before[:, c], after[:, c])
        else:
            assert torch.equal(before[:, c], after[:, c])


def test_zeroing_other_groups_keeps_component():
    torch.manual_seed(3)
    model = Decomposer(_small(C=3)).double().eval()
    _randomize(model, 3)
    x = torch.randn(2, 4, 64, dtype=torch.float64)
    before = model(x)[:, 1]
    with torch.no_grad():
        for c in (0, 2):
            for name, view in model.group_parameters(c).items():
                if view.is_floating_point() and not name.startswith("filter.") and "running_var" not in name:
                    view.zero_()
    assert torch.equal(model(x)[:, 1], before)


def test_gradients_stay_inside_group():
    torch.manual_seed(4)
    model = Decomposer(_small(C=3)).double().train()
    x = torch.randn(5, 4, 64, dtype=torch.float64)
    model(x)[:, 2].sum().backward()
    for c in (0, 1):
        for name, view in model.group_parameters(c).items():
            param = dict(model.named_parameters()).get(name)
            if param is None:
                continue
            size = param.shape[0] // 3
            grad = param.grad[c * size:(c + 1) * size]
            assert torch.count_nonzero(grad) == 0, name


def test_end_to_end_gradients_match_finite_differences():
    torch.manual_seed(5)
    model = Decomposer(_small(C=3)).double().eval()
    maps = SequenceMappings(["a", "b"], 3, 4).double()
    x = torch.randn(6, 4, 64, dtype=torch.float64)
    ds = torch.tensor([0, 1, 0, 1, 0, 1])
    y = torch.nn.functional.one_hot(torch.tensor([0, 1, 2, 3, 0, 1]), 4)

    def loss():
        return bin_loss(maps(model(x), ds), y, 0.1)

    params = [p for p in list(model.parameters()) + list(maps.parameters())]
    loss().backward()
    rng = np.random.default_rng(0)
    n_total = sum(p.numel() for p in params)
    picks = rng.choice(n_total, size=max(1, n_total // 100), replace=False)
    offsets = np.cumsum([0] + [p.numel() for p in params])
    step = 1e-6
    checked = 0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, i = params[k], int(flat - offsets[k])
        analytic = p.grad.reshape(-1)[i].item()
        with torch.no_grad():
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + step
            up = loss().item()
            view[i] = orig - step
            down = loss().item()
            view[i] = orig
        fd = (up - down) / (2 * step)
        assert abs(analytic - fd) <= 1e-3 * max(abs(fd), 1e-6), (k, i, analytic, fd)
        checked += 1
    assert checked >= 1


def test_relevance_examples():
    w = np.array([[1.0, -1.0, 0.0], [1.0, 1.0, 0.0]]).reshape(2, 1, 3, 1)
    np.testing.assert_array_equal(spatial_relevance(w, 1), [[1.0, 1.0, 0.0]])
    w1 = np.array([[0.5, -2.0], [-3.0, 0.25]]).reshape(2, 1, 2, 1)
    np.testing.assert_array_equal(spatial_relevance(w1, 2), np.abs(w1.reshape(2, 2)))
    same = np.full((6, 1, 5, 1), -0.7)
    np.testing.assert_allclose(spatial_relevance(same, 3), 0.7)
    model = Decomposer(_small())
    assert model.spatial_relevance().shape == (3, 4)
    assert np.all(model.spatial_relevance() >= 0)


def test_forward_bins_examples():
    maps = SequenceMappings(["d"], 3, 2).double()
    with torch.no_grad():
        maps.weight.zero_()
        maps.weight[0, 0, 2] = 40.0
    z = torch.tensor([0.2, 0.6, 0.3], dtype=torch.float64)
    p = forward_bins(z, "d", maps)
    assert p[0].item() == pytest.approx(0.3, abs=1e-12)
    assert p[1].item() == 0.0
    with pytest.raises(UnknownDataset):
        forward_bins(z, "e", maps)


def test_permuting_groups_with_mapping_columns_keeps_prediction():
    torch.manual_seed(6)
    cfg = _small(C=3)
    model = Decomposer(cfg).double().eval()
    _randomize(model, 6)
    maps = SequenceMappings(["d"], 3, 4).double()
    perm = [2, 0, 1]
    permuted = Decomposer(cfg).double().eval()
    state = model.state_dict()
    new_state = {}
    for name, t in state.items():
        if t.ndim == 0:
            new_state[name] = t
            continue
        size = t.shape[0] // 3
        new_state[name] = torch.cat([t[c * size:(c + 1) * size] for c in perm])
    permuted.load_state_dict(new_state)
    maps_p = SequenceMappings(["d"], 3, 4).double()
    with torch.no_grad():
        maps_p.weight.copy_(maps.weight[:, :, perm])
    x = torch.randn(4, 4, 64, dtype=torch.float64)
    idx = torch.zeros(4, dtype=torch.long)
    torch.testing.assert_close(maps(model(x), idx), maps_p(permuted(x), idx), rtol=0, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(7)
    model = Decomposer(_small()).eval()
    maps = SequenceMappings(["a", "b"], 3, 5)
    Checkpoint(model, maps, {"note": 1}).save(tmp_path / "ck")
    loaded = Checkpoint.load(tmp_path / "ck")
    x = torch.randn(2, 4, 64)
    assert torch.equal(model(x), loaded.model(x))
    assert torch.equal(maps.weight, loaded.mappings.weight)
    assert loaded.metadata == {"note": 1}
    assert loaded.mappings.dataset_ids == ["a", "b"]


def test_checkpoint_shape_table_validated(tmp_path):
    import json

    Checkpoint(Decomposer(_small())).save(tmp_path)
    doc = json.loads((tmp_path / "params.json").read_text())
    doc["tensors"][0]["shape"] = [999]
    (tmp_path / "params.json").write_text(json.dumps(doc))
    with pytest.raises(ShapeMismatch):
        Checkpoint.load(tmp_path)
