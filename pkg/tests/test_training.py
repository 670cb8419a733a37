import math

import numpy as np
import pytest
import torch

from thermognn.autodiff import DTYPE
from thermognn.gnn import GnnConfig
from thermognn.graph import SplitSpec
from thermognn.presets import experiment_preset
from thermognn.training import (SnapshotBank, TrainConfig, TrainingDivergence, best_model, data_loss,
                                degeneracy_loss, load_model, load_state, prepare, save_checkpoint,
                                snapshot_losses, total_loss, train, train_epochs)

T = lambda x: torch.tensor(x, dtype=DTYPE)
SMALL = GnnConfig(hidden=6, blocks=2)


def test_data_loss_examples():
    a = torch.randn(4, 3, dtype=DTYPE)
    assert float(data_loss(a, a)) == 0.0
    assert float(data_loss(a + 1, a)) == pytest.approx(1.0, abs=1e-15)


def test_data_loss_matches_loop():
    rng = np.random.default_rng(0)
    p, g = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    loop = sum((p[i, j] - g[i, j]) ** 2 for i in range(6) for j in range(5)) / 30
    assert float(data_loss(T(p), T(g))) == pytest.approx(loop, abs=1e-12)


def test_degeneracy_loss_examples():
    z = torch.zeros(1, 5, dtype=DTYPE)
    e1 = z.clone()
    e1[0, 0] = 1.0
    assert float(degeneracy_loss(z, z)) == 0.0
    assert float(degeneracy_loss(e1, z)) == pytest.approx(0.2, abs=1e-15)
    r_s, r_e = torch.randn(3, 4, dtype=DTYPE), torch.randn(3, 4, dtype=DTYPE)
    assert float(degeneracy_loss(3 * r_s, 3 * r_e)) == pytest.approx(9 * float(degeneracy_loss(r_s, r_e)), rel=1e-13)


def test_total_loss_examples():
    assert float(total_loss(T([0.0]), T([0.0]), 1.0)) == 0.0
    assert float(total_loss(T([2.0]), T([3.0]), 10.0)) == 23.0
    assert float(total_loss(T([2.0, 0.5]), T([3.0, 1.0]), 10.0)) == pytest.approx((23.0 + 6.0) / 2, abs=1e-14)
    with pytest.raises(ValueError):
        total_loss(T([]), T([]), 10.0)


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(KeyError, match="lamda"):
        TrainConfig.from_dict({"lamda": 1.0})
    with pytest.raises(ValueError):
        TrainConfig(lam=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


@pytest.mark.parametrize("name,h,lr,ms,ep,noise", [
    ("couette", 10, 1e-3, [2000, 4000], 6000, 1e-2),
    ("beam", 50, 1e-4, [600, 1200], 1800, 1e-5),
    ("cylinder", 128, 1e-4, [600, 1200], 2000, 4e-4),
])
def test_published_presets(name, h, lr, ms, ep, noise):
    p = experiment_preset(name)
    assert p["model"]["hidden"] == h
    t = TrainConfig.from_dict(p["train"])
    assert (t.base_lr, t.milestones, t.epochs, t.noise_var) == (lr, ms, ep, noise)


def _batch(chain_ds, variant="tignn"):
    state, tr, _ = prepare(TrainConfig(variant=variant, epochs=1), chain_ds, SMALL)
    z, target, temp = SnapshotBank(tr).batch(range(6))
    return state.model, z.requires_grad_(True), target, temp


def test_lambda_scales_data_gradient(chain_ds):
    model, z, target, temp = _batch(chain_ds)
    params = list(model.parameters())

    def grads(lam, part=None):
        data, deg = snapshot_losses(model, z, target, temp)
        loss = {"data": data.mean(), "deg": deg.mean()}.get(part) if part else total_loss(data, deg, lam)
        return torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss, params)])

    g_data, g_deg = grads(None, "data"), grads(None, "deg")
    for lam in (1.0, 10.0, 250.0):
        assert torch.allclose(grads(lam), lam * g_data + g_deg, atol=1e-10, rtol=1e-9)


def test_blackbox_has_zero_degeneracy(chain_ds):
    model, z, target, temp = _batch(chain_ds, "gnn")
    data, deg = snapshot_losses(model, z, target, temp)
    assert torch.all(deg == 0) and torch.all(data > 0)


def _run(chain_ds, epochs=3, seed=0, milestones=(2,), **kw):
    cfg = TrainConfig(epochs=epochs, batch_size=16, base_lr=3e-3, milestones=list(milestones), noise_var=1e-4,
                      seed=seed, **kw)
    return train(cfg, chain_ds, SMALL)


def test_training_is_reproducible(chain_ds):
    a, b = _run(chain_ds).report.rows, _run(chain_ds).report.rows
    assert a == b


def test_resume_continues_identically(chain_ds, tmp_path):
    full = _run(chain_ds, epochs=4)
    cfg = TrainConfig(epochs=4, batch_size=16, base_lr=3e-3, milestones=[2], noise_var=1e-4)
    state, tr, va = prepare(cfg, chain_ds, SMALL)
    train_epochs(state, tr, va, until=2)
    save_checkpoint(str(tmp_path / "last"), state)
    resumed = load_state(str(tmp_path / "last"))
    train_epochs(resumed, tr, va)
    assert resumed.report.rows == full.report.rows
    for p, q in zip(resumed.model.parameters(), full.model.parameters()):
        assert torch.equal(p, q)


def test_best_checkpoint_is_best_validation(chain_ds, tmp_path):
    state = _run(chain_ds, epochs=4)
    vals = [r["val_data"] for r in state.report.rows]
    assert state.best_epoch == int(np.argmin(vals))
    save_checkpoint(str(tmp_path / "best"), state, best=True)
    m, meta = load_model(str(tmp_path / "best"))
    ref = best_model(state)
    for p, q in zip(m.parameters(), ref.parameters()):
        assert torch.equal(p, q)
    assert meta["split"]["test"] == state.split["test"]


def test_divergence_restores_last_good_parameters(chain_ds):
    cfg = TrainConfig(epochs=2, batch_size=16, noise_var=1e300)
    state, tr, va = prepare(cfg, chain_ds, SMALL)
    before = [p.detach().clone() for p in state.model.parameters()]
    with pytest.raises(TrainingDivergence):
        train_epochs(state, tr, va)
    for p, q in zip(state.model.parameters(), before):
        assert torch.equal(p, q)


@pytest.mark.parametrize("variant", ["tignn", "gnn", "spnn"])
def test_chain_data_loss_drops_tenfold(chain_ds, variant):
    cfg = TrainConfig(epochs=40, batch_size=8, base_lr=5e-3, milestones=[30], noise_var=1e-4, variant=variant)
    state = train(cfg, chain_ds, GnnConfig(hidden=12, blocks=2))
    d = state.report.column("train_data")
    assert np.all(np.isfinite(d))
    assert d[-1] <= d[0] / 10
