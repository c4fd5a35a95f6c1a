import math
from collections import Counter

import numpy as np
import pytest
import torch

from noisetrace.audio import make_rng
from noisetrace.components import ComponentStore
from noisetrace.detector import ComponentKind, init_model, load_model, tiny_config
from noisetrace.errors import ConfigError, DataError, ModelFormatError
from noisetrace.training import (TrainConfig, balanced_batches, checkpoint, label_smoothed_ce, resume,
                                 set_deterministic, train, validation_loss)


def _store(n_per_class=6, kind="noise", length=700, seed=0):
    rng = np.random.default_rng(seed)
    signals, labels = [], []
    for i in range(2 * n_per_class):
        label = i % 2
        x = rng.standard_normal(length) * 0.1
        if label:
            x = np.convolve(x, np.ones(4) / 4, mode="same")
        signals.append(x)
        labels.append(label)
    return ComponentStore(signals, np.array(labels), [f"u{i:03d}" for i in range(len(signals))],
                          ComponentKind.parse(kind))


def _cfg(**kw):
    base = dict(epochs=6, early_stop_patience=3, batch_size=4, learning_rate=1e-3, component_kind="noise", seed=11)
    base.update(kw)
    return TrainConfig(**base)


# -- loss ----------------------------------------------------------------

@pytest.mark.parametrize("label", [0, 1])
@pytest.mark.parametrize("eps", [0.0, 0.2, 0.7])
def test_uniform_prediction_costs_ln2(label, eps):
    assert label_smoothed_ce(np.zeros((1, 2)), [label], eps) == pytest.approx(math.log(2), abs=1e-12)


def test_smoothed_loss_examples():
    logits = np.log([[0.9, 0.1]])
    assert label_smoothed_ce(logits, [0], 0.2) == pytest.approx(0.325083, abs=1e-6)
    assert label_smoothed_ce(logits, [0], 0.0) == pytest.approx(0.105361, abs=1e-6)


def test_loss_errors_and_tensor_path():
    with pytest.raises(ValueError):
        label_smoothed_ce(np.array([[np.inf, 0.0]]), [0], 0.2)
    with pytest.raises(ValueError):
        label_smoothed_ce(np.zeros((1, 2)), [2], 0.2)
    with pytest.raises(ValueError):
        label_smoothed_ce(np.zeros((1, 2)), [0], 1.0)
    z = torch.zeros((2, 2), requires_grad=True)
    loss = label_smoothed_ce(z, torch.tensor([0, 1]), 0.2)
    loss.backward()
    assert z.grad is not None


# -- batching --------------------------------------------------------------

def test_balanced_single_batch():
    labels = np.array([0] * 64 + [1] * 64)
    batches = list(balanced_batches(labels, 128, make_rng(0)))
    assert len(batches) == 1
    assert sorted(batches[0].tolist()) == list(range(128))


def test_majority_once_minority_repeats():
    labels = np.array([0] * 100 + [1] * 50)
    batches = list(balanced_batches(labels, 20, make_rng(0)))
    assert len(batches) == 10
    for b in batches:
        assert (labels[b] == 0).sum() == 10 and (labels[b] == 1).sum() == 10
    seen = Counter(np.concatenate(batches).tolist())
    assert all(seen[i] == 1 for i in range(100))
    assert sum(seen[i] for i in range(100, 150)) == 100
    assert all(seen[i] == 2 for i in range(100, 150))


def test_balanced_batches_seeded_and_errors():
    labels = np.array([0] * 9 + [1] * 5)
    a = [b.tolist() for b in balanced_batches(labels, 4, make_rng(3))]
    b = [b.tolist() for b in balanced_batches(labels, 4, make_rng(3))]
    assert a == b
    with pytest.raises(DataError):
        list(balanced_batches(np.zeros(8, int), 4, make_rng(0)))
    with pytest.raises(ConfigError):
        list(balanced_batches(labels, 5, make_rng(0)))


def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=7)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, early_stop_patience=6)
    assert TrainConfig.from_dict(TrainConfig(seed=4).to_dict()) == TrainConfig(seed=4)


# -- stopping rule ---------------------------------------------------------

def test_strictly_decreasing_val_runs_to_cap():
    cfg = _cfg(epochs=150, early_stop_patience=15, learning_rate=1e-5)
    model, state = train(init_model(tiny_config(), 0, "noise"), _store(2), _store(2, seed=1), cfg,
                         validate=lambda m, e: 10.0 - e)
    assert state.epoch == 150 and state.best_epoch == 150 and not state.stopped_early


def test_stops_patience_epochs_after_last_improvement():
    scripted = {1: 0.9, 2: 0.8, 3: 0.5}
    snapshots = {}

    def validate(m, epoch):
        snapshots[epoch] = {k: v.clone() for k, v in m.state_dict().items()}
        return scripted.get(epoch, 0.6)

    cfg = _cfg(epochs=150, early_stop_patience=15)
    model, state = train(init_model(tiny_config(), 0, "noise"), _store(2), _store(2, seed=1), cfg,
                         validate=validate)
    assert state.epoch == 18 and state.best_epoch == 3 and state.stopped_early
    assert state.best_epoch + cfg.early_stop_patience >= state.epoch
    for k, v in model.state_dict().items():
        assert torch.equal(v, snapshots[3][k]), k


def test_rejects_component_mismatch():
    with pytest.raises(ConfigError):
        train(init_model(tiny_config(), 0, "speech"), _store(2), _store(2), _cfg())
    with pytest.raises(DataError):
        train(init_model(tiny_config(), 0, "noise"), _store(2, kind="full"), _store(2), _cfg())


# -- determinism, resume, descent -------------------------------------------

def test_same_seed_same_history():
    set_deterministic(True)
    try:
        runs = [train(init_model(tiny_config(), 0, "noise"), _store(), _store(seed=1), _cfg())[1].history
                for _ in range(2)]
    finally:
        set_deterministic(False)
    assert runs[0] == runs[1]


def test_resume_matches_uninterrupted(tmp_path):
    cfg = _cfg(epochs=10, early_stop_patience=10)
    tr, va = _store(), _store(seed=1)
    full_model, full = train(init_model(tiny_config(), 0, "noise"), tr, va, cfg)
    _, part = train(init_model(tiny_config(), 0, "noise"), tr, va, cfg, run_dir=tmp_path / "run", stop_after=5)
    assert part.epoch == 5
    ck = tmp_path / "run" / "checkpoint.ntd"
    model, state = resume(ck)
    assert state.epoch == 5 and state.history == part.history
    resumed_model, resumed = train(model, tr, va, cfg, run_dir=tmp_path / "run", resume_from=ck)
    assert resumed.history == full.history
    for k, v in resumed_model.state_dict().items():
        assert torch.equal(v, full_model.state_dict()[k]), k
    rows = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss,seconds" and len(rows) == 11
    assert load_model(ck).component_kind is ComponentKind.NOISE
    assert (tmp_path / "run" / "best.ntd").exists()


def test_resume_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        resume(tmp_path / "nothing.ntd")
    from noisetrace.detector import save_model
    path = save_model(init_model(tiny_config(), 0), tmp_path / "plain.ntd")
    with pytest.raises(ModelFormatError):
        resume(path)


def test_checkpoint_roundtrip_state(tmp_path):
    from noisetrace.training import TrainState
    st = TrainState(epoch=4, best_val_loss=0.5, best_epoch=2, epochs_since_improvement=2,
                    history=[(0.7, 0.6), (0.6, 0.5), (0.55, 0.52), (0.5, 0.51)])
    model = init_model(tiny_config(), 1, "speech")
    _, back = resume(checkpoint(st, model, tmp_path / "c.ntd"))
    assert back == st


def test_one_small_step_descends(rng):
    torch.manual_seed(0)
    model = init_model(tiny_config(), 2, "noise", dtype=torch.float64)
    model.train()
    x = torch.from_numpy(rng.standard_normal((4, 512)) * 0.3)
    y = torch.tensor([0, 1, 0, 1])
    opt = torch.optim.Adam(model.parameters(), lr=1e-5)
    before = label_smoothed_ce(model(x), y, 0.2)
    before.backward()
    opt.step()
    with torch.no_grad():
        after = label_smoothed_ce(model(x), y, 0.2)
    assert after.item() < before.item()


def test_validation_loss_is_finite_and_restores_mode():
    model = init_model(tiny_config(), 0, "noise")
    model.train()
    v = validation_loss(model, _store(), 0.2)
    assert np.isfinite(v) and model.training
