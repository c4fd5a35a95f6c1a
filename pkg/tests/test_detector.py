import numpy as np
import pytest
import torch

from noisetrace.detector import (MAGIC, ComponentKind, DetectorConfig, SincLayerConfig, forward, init_model,
                                 load_model, predict_proba, reduced_config, save_model, sinc_kernel, tiny_config,
                                 write_container)
from noisetrace.errors import ConfigError, IncompatibleVersionError, InvalidBandError, ModelFormatError
from noisetrace.training import label_smoothed_ce

# (f1, f2) grid for the kernel property checks
GRID = [(f1, f2) for f1 in np.linspace(500, 4000, 10) for f2 in np.linspace(4500, 7500, 10)]


def test_kernel_zero_width_band_is_zero():
    assert np.max(np.abs(sinc_kernel(1000.0, 1000.0 + 1e-9, 129))) < 1e-10


def test_kernel_is_symmetric():
    g = sinc_kernel(300.0, 3400.0, 129)
    np.testing.assert_allclose(g, g[::-1], atol=1e-15)


def test_kernel_dc_gain_on_grid():
    # float64 brute force over GRID gives max |sum g| = 3.03e-3, worst at the lowest f1;
    # Hamming-window truncation leaks the lower band edge into DC
    sums = np.array([abs(sinc_kernel(f1, f2, 129).sum()) for f1, f2 in GRID])
    assert sums.max() <= 3.1e-3
    # once the lower edge is far enough from DC the leakage drops below 1e-3
    assert all(abs(sinc_kernel(f1, f2, 129).sum()) <= 1e-3 for f1 in (4000.0, 5000.0) for f2 in (6500.0, 7500.0))


def test_kernel_passband_over_stopband():
    freqs = np.fft.rfftfreq(8192, 1 / 16000)
    for f1, f2 in GRID:
        h = np.abs(np.fft.rfft(sinc_kernel(f1, f2, 129), 8192))
        mid = h[np.argmin(np.abs(freqs - (f1 + f2) / 2))]
        stop = h[(freqs <= f1 - 500) | (freqs >= f2 + 500)].max()
        assert mid >= 10 * stop


def test_kernel_rejects_bad_bands():
    with pytest.raises(InvalidBandError):
        sinc_kernel(3000.0, 2000.0, 129)
    with pytest.raises(InvalidBandError):
        sinc_kernel(100.0, 9000.0, 129)
    with pytest.raises(InvalidBandError):
        sinc_kernel(100.0, 200.0, 128)


def test_layer_matches_numpy_kernel():
    model = init_model(tiny_config(), 0, dtype=torch.float64)
    f1, f2 = (t.detach().numpy().ravel() for t in model.sinc.cutoffs())
    k = model.sinc.kernels().detach().numpy()
    for i in range(len(f1)):
        ref = sinc_kernel(f1[i], f2[i], model.config.sinc.kernel_len)
        np.testing.assert_allclose(k[i], ref, atol=1e-12)


def test_cutoffs_stay_valid_for_any_parameters():
    model = init_model(reduced_config(), 0)
    with torch.no_grad():
        model.sinc.low_hz_.copy_(torch.linspace(-20000, 20000, 16).view(-1, 1))
        model.sinc.band_hz_.copy_(torch.linspace(30000, -30000, 16).view(-1, 1))
    f1, f2 = model.sinc.cutoffs()
    assert torch.all(f1 >= 0) and torch.all(f1 < f2) and torch.all(f2 <= 8000)


def test_init_mel_spacing_and_endpoints():
    model = init_model(DetectorConfig(input_len=32000), 0)
    f1, f2 = (t.detach().numpy().ravel() for t in model.sinc.cutoffs())
    assert f1.size == 20 and np.all(np.diff(f1) > 0)
    assert f1[0] == pytest.approx(0.0, abs=1e-3)
    assert f2[-1] == pytest.approx(8000.0, rel=1e-6)


def test_init_deterministic_and_shared_across_kinds():
    cfg = tiny_config()
    models = [init_model(cfg, 7, kind) for kind in ("full", "speech", "noise")]
    ref = models[0].state_dict()
    for m in models[1:]:
        for k, v in m.state_dict().items():
            assert torch.equal(v, ref[k]), k
    assert [m.component_kind for m in models] == [ComponentKind.FULL, ComponentKind.SPEECH, ComponentKind.NOISE]
    other = init_model(cfg, 8)
    assert not torch.equal(other.fc2.weight, models[0].fc2.weight)


def test_component_kind_is_fixed():
    model = init_model(tiny_config(), 0, "n")
    assert model.component_kind is ComponentKind.NOISE
    with pytest.raises(AttributeError):
        model.component_kind = ComponentKind.FULL


def test_forward_shape_and_duplicate_rows(rng):
    model = init_model(tiny_config(), 0)
    model.eval()
    x = rng.standard_normal((3, 512)) * 0.1
    x[2] = x[0]
    logits = forward(model, x)
    assert logits.shape == (3, 2) and torch.isfinite(logits).all()
    assert torch.equal(logits[0], logits[2])
    with pytest.raises(ValueError):
        forward(model, np.zeros((2, 100)))


def test_predict_proba_rows_sum_to_one(rng):
    model = init_model(tiny_config(), 0)
    model.train()
    p = predict_proba(model, rng.standard_normal((5, 512)))
    assert p.dtype == np.float64 and p.shape == (5, 2)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert model.training


def test_config_validation():
    with pytest.raises(ConfigError):
        DetectorConfig(num_classes=3).validate()
    with pytest.raises(ConfigError):
        DetectorConfig(sinc=SincLayerConfig(kernel_len=129), input_len=100).validate()
    with pytest.raises(ConfigError):
        DetectorConfig.from_dict({"gru_units": 3})
    cfg = reduced_config()
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg


def _flat_params(model, names):
    params = dict(model.named_parameters())
    return [params[n] for n in names]


def test_gradients_match_finite_differences(rng):
    # central differences with step 1e-5 in float64; error is normwise per group:
    # max|analytic - numeric| / max(max|analytic|, max|numeric|)
    torch.manual_seed(0)
    model = init_model(tiny_config(), 3, dtype=torch.float64)
    model.eval()
    # mel init puts f1 = 0 and f2 = fs/2 on the abs/clamp kinks; move the bands inside
    with torch.no_grad():
        model.sinc.low_hz_.copy_(torch.tensor([[200.0], [2000.0]]))
        model.sinc.band_hz_.copy_(torch.tensor([[1500.0], [3000.0]]))
    x = torch.from_numpy(rng.standard_normal((3, 512)) * 0.3)
    y = torch.tensor([0, 1, 1])

    def loss_fn():
        return label_smoothed_ce(model(x), y, 0.2)

    model.zero_grad()
    loss_fn().backward()
    h = 1e-5
    for group, names in model.parameter_groups().items():
        assert names, group
        analytic, numeric = [], []
        for p in _flat_params(model, names):
            flat = p.data.view(-1)
            analytic.append(p.grad.detach().clone().view(-1))
            num = torch.empty_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                with torch.no_grad():
                    flat[i] = old + h
                    up = loss_fn().item()
                    flat[i] = old - h
                    down = loss_fn().item()
                    flat[i] = old
                num[i] = (up - down) / (2 * h)
            numeric.append(num)
        a, n = torch.cat(analytic), torch.cat(numeric)
        scale = max(a.abs().max().item(), n.abs().max().item())
        assert scale > 0, group
        assert (a - n).abs().max().item() / scale <= 1e-4, group


def test_save_load_roundtrip(tmp_path, rng):
    model = init_model(tiny_config(), 5, "speech")
    x = rng.standard_normal((4, 512))
    before = predict_proba(model, x)
    path = save_model(model, tmp_path / "m.ntd")
    assert path.read_bytes()[:8] == MAGIC
    loaded = load_model(path)
    assert loaded.component_kind is ComponentKind.SPEECH and loaded.config == model.config
    np.testing.assert_array_equal(predict_proba(loaded, x), before)


def test_load_rejects_bad_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "missing.ntd")
    (tmp_path / "bad.ntd").write_bytes(b"NOTADET!" + bytes(64))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "bad.ntd")
    path = save_model(init_model(tiny_config(), 0), tmp_path / "v.ntd")
    data = bytearray(path.read_bytes())
    data[8:12] = (99).to_bytes(4, "little")
    (tmp_path / "v99.ntd").write_bytes(bytes(data))
    with pytest.raises(IncompatibleVersionError):
        load_model(tmp_path / "v99.ntd")
    write_container(tmp_path / "partial.ntd", {"config": tiny_config().to_dict(), "component_kind": "full"},
                    {"model/fc2.bias": np.zeros(2, np.float32)})
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "partial.ntd")
