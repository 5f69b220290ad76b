import math

import numpy as np
import pytest
import torch
from torch import nn

from ephyslab.config import ModelConfig, MuPConfig
from ephyslab.embedder import PatchGrid
from ephyslab.ingest import ChannelMeta
from ephyslab.ndcore import ConfigError, make_rng
from ephyslab.pretrain import (GradCheckError, ReconstructionHeads, Sample, Schedule, TrainingDiverged,
                               build_model, grad_check, linear_probe, load_checkpoint, make_sample,
                               make_targets, mup_role, pretrain_loss, resample_input, save_checkpoint,
                               synthetic_corpus, trace_to_csv, train_loop)


def test_head_shapes_1s():
    cfg = ModelConfig(patch_size=500, d_model=32)
    heads = ReconstructionHeads(cfg)
    out = heads(torch.randn(3, 4, 32))
    assert out["raw"].shape == (3, 4, 500)
    assert out["fft"].shape == (3, 4, 201)
    assert [tuple(s.shape[-2:]) for s in out["stft"]] == [(81, 4), (41, 9)]


def test_head_shapes_01s():
    cfg = ModelConfig(patch_size=50, d_model=32)
    out = ReconstructionHeads(cfg)(torch.randn(2, 5, 32))
    assert set(out) == {"raw", "fft"} and out["fft"].shape[-1] == 21


def test_zero_representation_gives_zero_predictions():
    heads = ReconstructionHeads(ModelConfig(d_model=32))
    with torch.no_grad():
        for m in heads.modules():
            if isinstance(m, nn.Linear):
                m.bias.zero_()
        out = heads(torch.zeros(1, 2, 32))
    assert all(torch.count_nonzero(v) == 0 for v in [out["raw"], out["fft"], *out["stft"]])


def _targets(c=2, n=3, P=500, seed=0):
    cfg = ModelConfig(patch_size=P, d_model=32)
    patches = np.random.default_rng(seed).uniform(-1, 1, (c, n, P))
    return cfg, make_targets(patches, cfg)


def test_perfect_prediction_loss_zero():
    cfg, tg = _targets()
    mask = np.ones((2, 3), bool)
    assert pretrain_loss(tg, tg, mask, cfg.loss_weights).item() == 0.0


def test_unit_offset_raw_only():
    cfg, tg = _targets(1, 1)
    preds = {"raw": torch.zeros(1, 1, 500)}
    targets = {"raw": torch.ones(1, 1, 500)}
    assert pretrain_loss(preds, targets, np.ones((1, 1), bool), (1, 0, 0)).item() == pytest.approx(1.0)


def test_loss_is_sum_over_masked_patches():
    cfg, tg = _targets(1, 2)
    preds = {k: (v.clone() if k != "stft" else [s.clone() for s in v]) for k, v in tg.items()}
    preds["raw"][0, 0] += 0.5  # MSE 0.25
    preds["raw"][0, 1] += 2.0  # MSE 4
    loss = pretrain_loss(preds, tg, np.ones((1, 2), bool), cfg.loss_weights)
    assert loss.item() == pytest.approx(4.25, rel=1e-12)
    # perturbing an unmasked patch changes nothing
    mask = np.array([[True, False]])
    before = pretrain_loss(preds, tg, mask, cfg.loss_weights).item()
    preds["fft"][0, 1] += 10.0
    preds["stft"][1][0, 1] -= 3.0
    assert pretrain_loss(preds, tg, mask, cfg.loss_weights).item() == before


def test_stft_terms_sum_over_resolutions():
    cfg, tg = _targets(1, 1)
    preds = {"raw": tg["raw"], "fft": tg["fft"], "stft": [tg["stft"][0] + 1.0, tg["stft"][1] + 2.0]}
    loss = pretrain_loss(preds, tg, np.ones((1, 1), bool), (1.0, 0.1, 1.0))
    assert loss.item() == pytest.approx(1.0 + 4.0, rel=1e-12)


def test_empty_mask_warns():
    cfg, tg = _targets()
    with pytest.warns(RuntimeWarning):
        assert pretrain_loss(tg, tg, np.zeros((2, 3), bool), cfg.loss_weights).item() == 0.0


def _grid(c, n, P=500):
    return PatchGrid(np.zeros((c, n, P)), [ChannelMeta(f"c{i}") for i in range(c)])


def test_resample_bounds_and_single_channel():
    rng = make_rng(0)
    for _ in range(300):
        g = resample_input(_grid(40, 60), rng)
        assert 1 <= g.C <= 32 and 1 <= g.N <= 30
    assert {resample_input(_grid(1, 30), rng).C for _ in range(50)} == {1}


def test_resample_channel_mean():
    rng = make_rng(1)
    g = _grid(32, 30, P=1)  # sizes do not depend on the patch contents
    cs = np.array([resample_input(g, rng).C for _ in range(100_000)])
    exact = 32 - sum(j ** 3 for j in range(32)) / 32 ** 3
    assert abs(exact - 24) <= 0.5
    assert abs(cs.mean() - exact) < 4 * cs.std() / np.sqrt(cs.size)


def test_resample_temporal_run_is_contiguous():
    g = _grid(2, 30)
    g.patches[:] = np.arange(30)[None, :, None]
    rng = make_rng(2)
    for _ in range(50):
        sub = resample_input(g, rng)
        starts = sub.patches[0, :, 0]
        assert np.array_equal(np.diff(starts), np.ones(sub.N - 1))


def test_mup_width_one_matches_standard():
    cfg = ModelConfig(d_model=64, n_layers=1)
    a, _ = build_model(cfg, MuPConfig(base_width=64), seed=3)
    b, mup_b = build_model(cfg, MuPConfig(base_width=64, enabled=False), seed=3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    assert set(mup_b.lr_multipliers.values()) == {1.0}


def test_mup_roles_and_multipliers():
    cfg = ModelConfig(d_model=128, n_layers=1)
    model, mup = build_model(cfg, MuPConfig(base_width=32), seed=0)
    params = dict(model.named_parameters())
    assert mup_role("heads.raw.weight", params["heads.raw.weight"], cfg) == "output"
    assert mup_role("embedder.cnn.convs.0.weight", params["embedder.cnn.convs.0.weight"], cfg) == "input"
    name = "encoder.blocks.0.attn.q_proj.weight"
    assert mup_role(name, params[name], cfg) == "hidden"
    assert mup.lr_multipliers[name] == 0.25
    assert mup.lr_multipliers["heads.raw.weight"] == 0.25
    assert mup.lr_multipliers["embedder.spectral.proj.weight"] == 1.0
    assert torch.count_nonzero(params["encoder.blocks.0.attn.u1"]) == 0
    assert torch.all(params["encoder.blocks.0.attn_norm.weight"] == 1)


def test_hidden_preactivation_variance_is_width_independent():
    rng = np.random.default_rng(0)
    second_moments = []
    for d in (64, 128, 256):
        cfg = ModelConfig(d_model=d, n_layers=1)
        vals = []
        for seed in range(4):
            model, _ = build_model(cfg, MuPConfig(base_width=64), seed=seed)
            w = model.encoder.blocks[0].ffn.gate.weight
            x = torch.from_numpy(rng.standard_normal((300, d)))
            vals.append((x @ w.T).pow(2).mean().item())
        second_moments.append(np.mean(vals))
    assert max(second_moments) / min(second_moments) < 1.1
    assert second_moments[0] == pytest.approx(1.0, rel=0.1)


class LinearToy(nn.Module):
    """Reconstruction heads on fixed features: the loss is quadratic in the parameters."""

    def __init__(self, cfg, feats):
        super().__init__()
        self.cfg, self.feats = cfg, feats
        self.heads = ReconstructionHeads(cfg)

    def loss(self, batch):
        total = 0.0
        for f, s in zip(self.feats, batch):
            total = total + pretrain_loss(self.heads(f), make_targets(s.grid.patches, self.cfg), s.mask,
                                          self.cfg.loss_weights)
        return total / len(batch)

    def param_groups(self):
        return {n: "heads" for n, _ in self.named_parameters()}


def _toy_batch(cfg, seed=0):
    rng = make_rng(seed)
    segs = synthetic_corpus(2, seed, n_channels=3, seconds=4 * cfg.patch_size / 500)
    batch = [make_sample(s, cfg, rng, resample=False) for s in segs]
    feats = [torch.from_numpy(rng.standard_normal((3, 4, cfg.d_model))) for _ in batch]
    return batch, feats


@pytest.mark.parametrize("P", [500, 50])
def test_grad_check_linear_toy(P):
    cfg = ModelConfig(patch_size=P, d_model=32)
    batch, feats = _toy_batch(cfg)
    torch.manual_seed(0)
    # central differences are exact for a quadratic, so the widest step minimizes roundoff
    rep = grad_check(LinearToy(cfg, feats), batch, eps=1e-2, n_params=240)
    assert rep.n_checked >= 200
    assert rep.max_rel_error <= 1e-8


def test_zero_loss_batch_has_zero_gradient():
    cfg = ModelConfig(patch_size=50, d_model=32, loss_weights=(1.0, 0.0, 0.0))
    batch, feats = _toy_batch(cfg)
    toy = LinearToy(cfg, feats)
    # replace the data with what the heads already predict
    for f, s in zip(feats, batch):
        with torch.no_grad():
            s.grid.patches = toy.heads(f)["raw"].numpy().copy()
    loss = toy.loss(batch)
    loss.backward()
    assert loss.item() == 0.0
    assert math.sqrt(sum(p.grad.pow(2).sum().item() for p in toy.parameters())) <= 1e-10


def test_grad_check_reports_nonfinite_group():
    cfg = ModelConfig(patch_size=50, d_model=32)
    batch, feats = _toy_batch(cfg)
    toy = LinearToy(cfg, feats)
    with torch.no_grad():
        toy.heads.raw.weight[0, 0] = float("inf")
    with pytest.raises(GradCheckError, match="heads"):
        grad_check(toy, batch)


def test_grad_check_eps_range():
    cfg = ModelConfig(patch_size=50, d_model=32)
    batch, feats = _toy_batch(cfg)
    with pytest.raises(ConfigError):
        grad_check(LinearToy(cfg, feats), batch, eps=1e-1)


def test_grad_check_covers_every_group():
    cfg = ModelConfig(patch_size=50, d_model=32, n_layers=1, dropout=0.0)
    model, _ = build_model(cfg, seed=0)
    rng = make_rng(0)
    batch = [make_sample(s, cfg, rng, resample=False) for s in synthetic_corpus(1, 0, 3, seconds=0.4)]
    rep = grad_check(model, batch, n_params=60)
    assert set(rep.per_group) == {"cnn", "spectral", "modality", "stcpe", "registers", "heads",
                                  "attention_bias", "attention", "glu", "norm"}
    assert rep.max_rel_error <= 1e-3


def test_schedule():
    s = Schedule(lr=1.0, warmup_frac=0.1)
    assert s.lr_at(0, 100) == pytest.approx(0.1)
    assert s.lr_at(9, 100) == pytest.approx(1.0)
    assert s.lr_at(99, 100) == pytest.approx(0.01, abs=1e-3)
    lrs = [s.lr_at(i, 100) for i in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= 0.01


def _tiny_cfg():
    return ModelConfig(patch_size=50, d_model=32, n_layers=1, dropout=0.0)


def test_zero_learning_rate_keeps_parameters():
    cfg = _tiny_cfg()
    data = synthetic_corpus(4, 0, 2, seconds=2.0)
    ref, _ = build_model(cfg, seed=0)
    res = train_loop(data, cfg, sched=Schedule(lr=0.0), steps=3, seed=0)
    for (n, p), (_, q) in zip(res.model.named_parameters(), ref.named_parameters()):
        assert torch.equal(p, q), n


def test_trace_layout_and_determinism():
    cfg = _tiny_cfg()
    data = synthetic_corpus(6, 0, 2, seconds=2.0)
    a = train_loop(data, cfg, sched=Schedule(lr=1e-2, batch_size=2), steps=7, seed=4, test_set=data[:2])
    b = train_loop(data, cfg, sched=Schedule(lr=1e-2, batch_size=2), steps=7, seed=4, test_set=data[:2])
    assert trace_to_csv(a.trace) == trace_to_csv(b.trace)
    assert [r.epoch for r in a.trace] == [0, 1, 2, 3]
    assert [r.step for r in a.trace] == [0, 3, 6, 7]
    assert trace_to_csv(a.trace).splitlines()[0] == "epoch,step,train_loss,test_loss,lr"


def test_zero_steps():
    cfg = _tiny_cfg()
    res = train_loop(synthetic_corpus(2, 0, 2, seconds=1.0), cfg, steps=0, seed=0)
    ref, _ = build_model(cfg, seed=0)
    assert res.trace == [] and res.step == 0
    assert all(torch.equal(p, q) for p, q in zip(res.model.parameters(), ref.parameters()))


def test_divergence_aborts_with_trace():
    cfg = _tiny_cfg()
    with pytest.raises(TrainingDiverged) as info:
        train_loop(synthetic_corpus(2, 0, 2, seconds=1.0), cfg, steps=2, seed=0, divergence_factor=1e-9)
    assert len(info.value.trace) == 1


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(patch_size=500, d_model=32, n_layers=1)
    model, mup = build_model(cfg, MuPConfig(base_width=32), seed=1)
    save_checkpoint(tmp_path / "ck", model, mup, step=5)
    back, mup2, step = load_checkpoint(tmp_path / "ck")
    assert step == 5 and mup2.base_width == 32 and back.cfg == cfg
    for (n, p), (_, q) in zip(model.named_parameters(), back.named_parameters()):
        assert torch.equal(p, q), n
    blob = (tmp_path / "ck" / "params.f64le").read_bytes()
    assert len(blob) == 8 * sum(p.numel() for p in model.parameters())


def test_probe_separable_blobs():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-3, 1, (100, 8)), rng.normal(3, 1, (100, 8))])
    y = np.repeat([0, 1], 100)
    assert linear_probe(x, y) >= 0.95


def test_probe_random_labels_near_chance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((400, 8))
    y = rng.integers(0, 2, 400)
    assert abs(linear_probe(x, y) - 0.5) <= 0.1


def test_probe_constant_embeddings_predict_majority():
    x = np.ones((100, 4))
    y = np.array([0] * 70 + [1] * 30)
    assert linear_probe(x, y) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        linear_probe(x, np.zeros(100))
