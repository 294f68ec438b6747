import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpfnet import autodiff as ad
from gpfnet.autodiff import Tensor
from gpfnet.data import DatasetError, SamplingError, gen_synthetic
from gpfnet.experiment import micro_batch
from gpfnet.model import GpfModel, ModelConfig
from gpfnet.training import (
    AdamState,
    Batch,
    TrainConfig,
    TrainConfigError,
    adam_step,
    batch_hard_mining,
    decay_for,
    id_loss,
    total_loss,
    train,
    triplet_loss,
)


def tiny_model(num_ids=8, seed=0, **kw):
    cfg = dict(d_model=16, img_dim=12, txt_dim=10, fusion_layers=2, fusion_heads=2,
               encoder_layers=1, encoder_heads=2, num_identities=num_ids)
    cfg.update(kw)
    return GpfModel.init(ModelConfig(**cfg), seed)


def tiny_data(seed=0, per_id=4):
    return gen_synthetic(8, per_id, img_dim=12, txt_dim=10, n_tokens=3, noise_sigma=0.1, seed=seed)


def tiny_config(**kw):
    base = dict(iterations=5, batch_size=16, p_identities=8, k_instances=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# config ---------------------------------------------------------------------

def test_train_config_defaults():
    c = TrainConfig()
    assert (c.lr, c.weight_decay, c.bias_decay) == (3.5e-4, 1e-5, 1e-7)
    assert (c.iterations, c.batch_size, c.p_identities, c.k_instances, c.margin) == (180, 64, 16, 4, 0.3)


@pytest.mark.parametrize(
    "kw", [dict(batch_size=60), dict(margin=-0.1), dict(iterations=0), dict(lr=0.0)]
)
def test_train_config_rejects(kw):
    with pytest.raises(TrainConfigError):
        TrainConfig(**kw)


# losses ---------------------------------------------------------------------

def _row(*v):
    return Tensor(np.array([v], dtype=np.float64))


def test_triplet_tie_gives_margin():
    loss = triplet_loss(_row(0.0, 0.0), _row(1.0, 0.0), _row(0.0, 1.0), 0.3).item()
    assert loss == pytest.approx(0.3, abs=1e-9)


def test_triplet_satisfied():
    # d(a,p)=0.2, d(a,n)=0.9
    assert triplet_loss(_row(0.0), _row(0.2), _row(0.9), 0.3).item() == 0.0
    assert triplet_loss(_row(1.0, 0.0), _row(1.0, 0.0), _row(0.0, 1.0), 0.3).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, p, n = (Tensor(rng.normal(size=(4, 5))) for _ in range(3))
    assert np.all(triplet_loss(a, p, n, 0.3).data >= 0)
    logits = Tensor(rng.normal(scale=10, size=(4, 6)))
    assert np.all(id_loss(logits, rng.integers(0, 6, size=4)).data >= 0)


def test_id_loss_examples():
    assert id_loss(Tensor(np.zeros((1, 7))), [3]).item() == pytest.approx(math.log(7), abs=1e-12)
    expect = -math.log(math.exp(10) / (math.exp(10) + 2))
    assert id_loss(Tensor([[10.0, 0.0, 0.0]]), [0]).item() == pytest.approx(expect, rel=1e-10)
    assert expect == pytest.approx(9.08e-5, rel=1e-3)
    logits = np.random.default_rng(0).normal(size=(3, 4))
    base = id_loss(Tensor(logits), [0, 1, 2]).data
    np.testing.assert_allclose(id_loss(Tensor(logits + 17.0), [0, 1, 2]).data, base, atol=1e-12)


def test_id_loss_label_range():
    with pytest.raises(ValueError):
        id_loss(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(ValueError):
        id_loss(Tensor(np.zeros((1, 3))), [-1])


# mining ---------------------------------------------------------------------

def test_mining_hand_case():
    # anchor 0 at the origin; same-label samples at 1 and 2, other label at 0.5
    feats = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 0.5], [0.0, 0.6]])
    labels = [0, 0, 0, 1, 1]
    a, p, n = batch_hard_mining(feats, labels)[0]
    assert (a, p, n) == (0, 2, 3)


def test_mining_separated_clusters_zero_loss():
    rng = np.random.default_rng(0)
    feats = np.vstack([rng.normal(0, 0.01, (3, 4)) + 5, rng.normal(0, 0.01, (3, 4)) - 5])
    labels = [0, 0, 0, 1, 1, 1]
    trip = batch_hard_mining(feats, labels)
    a, p, n = (np.array(c) for c in zip(*trip))
    f = Tensor(feats)
    assert not triplet_loss(f[a], f[p], f[n], 0.3).data.any()


def test_mining_identical_features_give_margin():
    feats = np.ones((4, 3))
    labels = [0, 1, 0, 1]
    trip = batch_hard_mining(feats, labels)
    assert trip == [(0, 2, 1), (1, 3, 0), (2, 0, 1), (3, 1, 0)]  # lowest-index ties
    a, p, n = (np.array(c) for c in zip(*trip))
    f = Tensor(feats)
    np.testing.assert_allclose(triplet_loss(f[a], f[p], f[n], 0.3).data, 0.3, atol=1e-5)


def test_mining_errors():
    with pytest.raises(SamplingError):
        batch_hard_mining(np.zeros((3, 2)), [0, 0, 1])
    with pytest.raises(SamplingError):
        batch_hard_mining(np.zeros((2, 2)), [0, 0])


def test_mining_permutation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(20):
        feats = rng.normal(size=(8, 3))
        labels = np.repeat(np.arange(4), 2)
        perm = rng.permutation(8)
        base = batch_hard_mining(feats, labels)
        permuted = batch_hard_mining(feats[perm], labels[perm])
        inv = np.argsort(perm)
        for a, p, n in base:
            pa, pp, pn = permuted[inv[a]]
            assert (perm[pp], perm[pn]) == (p, n)


# adam -----------------------------------------------------------------------

def test_adam_first_step_is_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    g = np.array([0.5, -3.0, 1e-3])
    adam_step([p], [g], AdamState.zeros_like([p]), lr=0.01, decays=[0.0])
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], atol=1e-7)


def test_adam_zero_grad_fixed_point():
    p = Tensor(np.array([[1.0, 2.0]]))
    state = AdamState.zeros_like([p])
    for _ in range(3):
        adam_step([p], [np.zeros((1, 2))], state, lr=0.1, decays=[0.0])
    np.testing.assert_array_equal(p.data, [[1.0, 2.0]])
    assert state.t == 3


def test_adam_decay_geometric():
    p = Tensor(np.array([4.0, -1.0]))
    state = AdamState.zeros_like([p])
    lr, lam, steps = 0.1, 0.5, 7
    for _ in range(steps):
        adam_step([p], [np.zeros(2)], state, lr=lr, decays=[lam])
    np.testing.assert_allclose(p.data, np.array([4.0, -1.0]) * (1 - lr * lam) ** steps, rtol=1e-14)


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=(3, 2)))
    ref = p.data.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    state = AdamState.zeros_like([p])
    lr, wd = 1e-2, 1e-3
    for t in range(1, 6):
        g = rng.normal(size=(3, 2))
        adam_step([p], [g], state, lr=lr, decays=[wd])
        ref = ref * (1 - lr * wd)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)
    assert np.all(state.v[0] >= 0)


def test_decay_grouping():
    cfg = TrainConfig()
    model = tiny_model()
    for name, p in model.named_parameters():
        expect = 1e-5 if name.endswith(".weight") else 1e-7
        assert decay_for(name, p, cfg) == expect, name


# total loss / training ------------------------------------------------------

def test_untrained_loss_near_log_m_plus_margin():
    data = gen_synthetic(8, 4, seed=0)
    model = GpfModel.init(ModelConfig(num_identities=8, fusion_layers=1, encoder_layers=1), 0)
    batch = Batch.from_dataset(data).subset(np.arange(16))
    loss = total_loss(batch, model, TrainConfig()).total.item()
    target = math.log(8) + 0.3
    assert abs(loss - target) <= 0.2 * target


def test_total_loss_finite_and_grad_checks():
    model = tiny_model(num_ids=2)
    batch = micro_batch(12, 10, seed=0)
    cfg = TrainConfig()
    assert np.isfinite(total_loss(batch, model, cfg).total.item())
    w = model["fusion.0.gate.weight"]
    err = ad.grad_check(lambda _: total_loss(batch, model, cfg).total, w, coords=range(0, 256, 17))
    assert err < 1e-4


def test_train_iteration_contract():
    model = tiny_model()
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    result = train(tiny_data(), model, tiny_config(iterations=1))
    assert result.steps == 1 and len(result.history) == 1
    assert any(not np.array_equal(before[n], p.data) for n, p in model.named_parameters())


def test_train_determinism():
    h1 = train(tiny_data(), tiny_model(), tiny_config()).history
    h2 = train(tiny_data(), tiny_model(), tiny_config()).history
    assert h1 == h2
    h3 = train(tiny_data(), tiny_model(), tiny_config(seed=1)).history
    assert h1 != h3


def test_train_rejects_small_dataset():
    with pytest.raises(DatasetError):
        train(tiny_data(), tiny_model(), TrainConfig(iterations=1))  # needs 16 x 4


def test_train_rejects_label_overflow():
    with pytest.raises(DatasetError):
        train(tiny_data(), tiny_model(num_ids=4), tiny_config())


def test_train_reduces_loss():
    # full-size defaults are exercised by the acceptance overfitting run
    result = train(tiny_data(), tiny_model(d_model=32), tiny_config(iterations=180, lr=1e-3))
    h = result.history
    assert np.mean(h[-10:]) < np.mean(h[:10])
    assert h[-1] < 0.1 * h[0]


def test_callback_sees_every_step():
    seen = []
    train(tiny_data(), tiny_model(), tiny_config(iterations=3), callback=lambda s, parts: seen.append(s))
    assert seen == [1, 2, 3]
