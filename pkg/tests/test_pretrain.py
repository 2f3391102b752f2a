import math
import warnings

import numpy as np
import pytest
import torch

from eeg2vec.checkpoint import ModelCheckpoint
from eeg2vec.gradcheck import module_grad_check
from eeg2vec.pretrain import (
    Eeg2vec,
    Eeg2vecConfig,
    FrozenExtractor,
    TrainingDivergedError,
    contrastive_loss,
    extract_representation,
    info_nce,
    load_eeg2vec,
    pretrain,
    reconstruction_loss,
    sample_mask,
)

TINY = dict(
    n_channels=3,
    encoder_layers=2,
    encoder_dim=8,
    context_layers=2,
    context_dim=16,
    context_ffn_dim=16,
    n_heads=2,
    max_len=64,
    mask_span=3,
    n_negatives=4,
)


def softmax_oracle(pos_sim, neg_sims, kappa):
    num = math.exp(pos_sim / kappa)
    den = num + sum(math.exp(s / kappa) for s in neg_sims)
    return -math.log(num / den)


# ---------------------------------------------------------------------------
# masking


def test_mask_forced_single_span():
    plan = sample_mask(10, 0.5, 10, np.random.default_rng(0))
    assert plan.starts == (0,)
    assert plan.masked.all()


def test_mask_coverage_bounds_over_seeds():
    covers = []
    for seed in range(1000):
        plan = sample_mask(192, 0.5, 10, np.random.default_rng(seed))
        covers.append(plan.coverage)
        starts_mask = np.zeros(192, bool)
        for s in plan.starts:
            starts_mask[s : s + 10] = True
        assert np.array_equal(starts_mask, plan.masked)
    assert 96 <= min(covers) and max(covers) <= 105


def test_mask_deterministic():
    a = sample_mask(50, 0.5, 5, np.random.default_rng(9))
    b = sample_mask(50, 0.5, 5, np.random.default_rng(9))
    assert a.starts == b.starts and np.array_equal(a.masked, b.masked)


def test_mask_too_short():
    with pytest.raises(ValueError):
        sample_mask(5, 0.5, 10, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# contrastive loss


def test_orthogonal_negatives_value():
    # 51 masked frames with mutually orthogonal predictions equal to their targets
    c = torch.eye(64, dtype=torch.float64)[:51]
    mask = torch.ones(51, dtype=torch.bool)
    loss = contrastive_loss(c, c.clone(), mask, np.random.default_rng(0), 50, 1.5)
    expected = softmax_oracle(1.0, [0.0] * 50, 1.5)
    assert expected == pytest.approx(3.2835714318532543, abs=1e-12)
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_uniform_candidates_give_log_51():
    v = torch.randn(8, dtype=torch.float64)
    c = v.repeat(60, 1)
    loss = contrastive_loss(c, c.clone(), torch.ones(60, dtype=torch.bool), np.random.default_rng(1), 50, 1.5)
    assert abs(loss.item() - math.log(51)) < 1e-9


def test_info_nce_matches_oracle_random():
    g = torch.Generator().manual_seed(3)
    a, p = torch.randn(5, 6, generator=g, dtype=torch.float64), torch.randn(5, 6, generator=g, dtype=torch.float64)
    n = torch.randn(5, 7, 6, generator=g, dtype=torch.float64)

    def cos(x, y):
        return float(x @ y / (x.norm() * y.norm()))

    ref = np.mean([softmax_oracle(cos(a[i], p[i]), [cos(a[i], n[i, j]) for j in range(7)], 0.7) for i in range(5)])
    assert info_nce(a, p, n, 0.7).item() == pytest.approx(ref, abs=1e-12)


def test_contrastive_scale_invariance():
    g = torch.Generator().manual_seed(4)
    c = torch.randn(2, 30, 5, generator=g, dtype=torch.float64)
    z = torch.randn(2, 30, 5, generator=g, dtype=torch.float64)
    mask = torch.zeros(2, 30, dtype=torch.bool)
    mask[:, 5:25] = True
    a = contrastive_loss(c, z, mask, np.random.default_rng(5), 10, 1.5, negatives_from="target")
    b = contrastive_loss(2 * c, z, mask, np.random.default_rng(5), 10, 1.5, negatives_from="target")
    assert abs(a.item() - b.item()) < 1e-9


def test_contrastive_monotone_in_positive_similarity():
    negs = torch.tensor([[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]], dtype=torch.float64)
    anchor = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    values = []
    for angle in np.linspace(0, np.pi, 7):
        pos = torch.tensor([[math.cos(angle), 0.0, math.sin(angle)]], dtype=torch.float64)
        values.append(info_nce(anchor, pos, negs, 1.5).item())
    assert all(x < y for x, y in zip(values, values[1:]))
    assert min(values) >= 0


def test_too_few_negatives_warns():
    c = torch.randn(6, 4, dtype=torch.float64)
    with pytest.warns(RuntimeWarning, match="with replacement"):
        loss = contrastive_loss(c, c, torch.ones(6, dtype=torch.bool), np.random.default_rng(0), 10, 1.5)
    assert math.isfinite(loss.item())


def test_negatives_exclude_anchor():
    from eeg2vec.pretrain import _negative_indices

    idx = _negative_indices(20, 19, np.random.default_rng(0))
    for i, row in enumerate(idx):
        assert i not in row and len(set(row)) == 19


# ---------------------------------------------------------------------------
# reconstruction loss


def test_reconstruction_identity_and_offset():
    z = torch.randn(2, 7, 4, dtype=torch.float64)
    assert reconstruction_loss(z, z).item() == 0.0
    assert reconstruction_loss(z + 1, z).item() == pytest.approx(1.0, abs=1e-15)


def test_reconstruction_naive_oracle():
    rng = np.random.default_rng(6)
    c, z = rng.normal(size=(2, 9, 5))
    total = 0.0
    for t in range(9):
        for d in range(5):
            total += abs(c[t, d] - z[t, d])
    lib = reconstruction_loss(torch.from_numpy(c), torch.from_numpy(z)).item()
    assert abs(lib - total / 45) <= 1e-12


def test_reconstruction_masked_average():
    c = torch.zeros(4, 2, dtype=torch.float64)
    z = torch.tensor([[1.0, 1.0], [3.0, 3.0], [0.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    mask = torch.tensor([True, True, False, False])
    assert reconstruction_loss(c, z, mask, "masked").item() == 2.0
    assert reconstruction_loss(c, z, mask, "all").item() == 1.0


def test_reconstruction_shape_mismatch():
    with pytest.raises(ValueError):
        reconstruction_loss(torch.zeros(3, 2), torch.zeros(3, 3))


# ---------------------------------------------------------------------------
# model


def test_encoder_zero_input_zero_bias():
    model = Eeg2vec(Eeg2vecConfig.desk(n_channels=4))
    with torch.no_grad():
        for conv in model.encoder.convs:
            conv.bias.zero_()
        for norm in model.encoder.norms:
            norm.bias.zero_()
    z = model.encode_features(torch.zeros(4, 50))
    assert not z.any()


def test_full_scale_shapes():
    cfg = Eeg2vecConfig.full()
    assert (cfg.encoder_layers, cfg.encoder_kernel, cfg.encoder_dim) == (4, 3, 64)
    assert (cfg.context_layers, cfg.context_dim, cfg.context_ffn_dim) == (12, 256, 1024)
    assert (cfg.mask_ratio, cfg.mask_span, cfg.n_negatives, cfg.temperature, cfg.lr) == (0.5, 10, 50, 1.5, 5e-4)
    model = Eeg2vec(cfg)
    eeg = torch.randn(64, 192)
    z = model.encode_features(eeg)
    assert z.shape == (192, 64)
    plan = sample_mask(192, 0.5, 10, np.random.default_rng(0))
    c_pre = model.context_forward(z, torch.from_numpy(plan.masked))
    assert c_pre.shape == (192, 64)
    assert extract_representation(model, eeg.numpy()).shape == (192, 256)


def test_channel_mismatch():
    model = Eeg2vec(Eeg2vecConfig.desk(n_channels=4))
    with pytest.raises(ValueError, match="channels"):
        model.encode_features(torch.zeros(5, 20))


def test_plan_length_mismatch():
    model = Eeg2vec(Eeg2vecConfig.desk(n_channels=4))
    z = model.encode_features(torch.zeros(4, 20))
    with pytest.raises(ValueError, match="mask shape"):
        model.context_forward(z, torch.zeros(21, dtype=torch.bool))


def test_unmasked_context_is_deterministic():
    model = Eeg2vec(Eeg2vecConfig.desk(n_channels=4, context_layers=0, encoder_dim=32)).eval()
    z = torch.randn(30, 32)
    assert torch.equal(model.context_forward(z), model.context_forward(z))
    assert torch.equal(model.context_forward(z, torch.zeros(30, dtype=torch.bool)), model.context_forward(z))


def test_mask_embedding_replaces_frames():
    model = Eeg2vec(Eeg2vecConfig.desk(n_channels=4, encoder_dim=32)).eval()
    z1, z2 = torch.randn(2, 30, 32)
    mask = torch.zeros(30, dtype=torch.bool)
    mask[:15] = True
    z2[15:] = z1[15:]
    torch.testing.assert_close(model.context_forward(z1, mask), model.context_forward(z2, mask))


def _tiny_model(seed, objective="contrastive"):
    torch.manual_seed(seed)
    return Eeg2vec(Eeg2vecConfig(**TINY, objective=objective)).double()


def test_encoder_gradient():
    model = _tiny_model(0)
    eeg = torch.randn(2, 3, 12, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 12, 8, dtype=torch.float64)
    err = module_grad_check(model.encoder, lambda: (model.encode_features(eeg) * w).sum(), [eeg])
    assert err < 1e-4


@pytest.mark.parametrize("objective", ["contrastive", "reconstruction"])
def test_full_model_gradient(objective):
    model = _tiny_model(1, objective)
    eeg = torch.randn(2, 3, 12, dtype=torch.float64)
    rng_state = np.random.default_rng(2)
    mask = torch.from_numpy(np.stack([sample_mask(12, 0.5, 3, rng_state).masked for _ in range(2)]))
    seed = 11

    def loss():
        z, c_pre = model(eeg, mask)
        if objective == "contrastive":
            return contrastive_loss(c_pre, z, mask, np.random.default_rng(seed), 4, 1.5)
        return reconstruction_loss(c_pre, z)

    assert module_grad_check(model, loss, max_coords=6) < 1e-4


# ---------------------------------------------------------------------------
# training loop and extraction


def _windows(n=24, c=4, t=64, seed=0):
    rng = np.random.default_rng(seed)
    base = np.cumsum(rng.normal(size=(n, 1, t)), axis=-1) * 0.2
    return (base + rng.normal(size=(n, c, t))).astype(np.float32)


SMALL = dict(n_channels=4, encoder_dim=16, context_dim=16, context_ffn_dim=32, n_heads=2, n_negatives=10, batch_size=4)


def test_pretrain_is_deterministic():
    cfg = Eeg2vecConfig.desk(**SMALL, updates=5)
    a = pretrain(_windows(), cfg)
    b = pretrain(_windows(), cfg)
    assert a.losses == b.losses
    for k in a.checkpoint.state:
        assert np.array_equal(a.checkpoint.state[k], b.checkpoint.state[k])


def test_pretrain_divergence_guard():
    cfg = Eeg2vecConfig.desk(**SMALL, updates=3, objective="reconstruction")
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        pretrain(_windows() * np.float32(1e38) * 10, cfg)


def test_pretrain_checkpoint_round_trip(tmp_path):
    cfg = Eeg2vecConfig.desk(**SMALL, updates=3)
    res = pretrain(_windows(), cfg, checkpoint_path=tmp_path / "m.ckpt", checkpoint_every=1)
    back = ModelCheckpoint.load(tmp_path / "m.ckpt")
    assert back.provenance["step"] == 3
    model = load_eeg2vec(back)
    x = _windows(1)[0]
    np.testing.assert_array_equal(extract_representation(model, x), extract_representation(res.model, x))


def test_frozen_extractor_is_frozen():
    model = Eeg2vec(Eeg2vecConfig.desk(**SMALL))
    ext = FrozenExtractor(model)
    x = _windows(2)
    a, b = ext(x), ext(x)
    assert torch.equal(a, b) and not a.requires_grad
    assert all(not p.requires_grad for p in model.parameters())
    head = torch.nn.Linear(ext.out_dim, 1)
    head(ext(x)).sum().backward()
    assert all(p.grad is None for p in model.parameters())
