import pytest
import torch

from conftest import small_config
from tdr.fusion import FusionTransformer, build_mask, split


def masks(words=3, objs=2, ocr=1, V1=5, E=3, M=4):
    wm = torch.zeros(1, V1, dtype=torch.bool)
    wm[0, :words] = True
    om = torch.zeros(1, E, dtype=torch.bool)
    om[0, :objs] = True
    cm = torch.zeros(1, M, dtype=torch.bool)
    cm[0, :ocr] = True
    return wm, om, cm


def test_single_decoder_slot():
    wm, om, cm = masks()
    m = build_mask(wm, om, cm, T=1)[0]
    enc = torch.cat([wm, om, cm], 1)[0]
    assert m[-1, -1]
    assert torch.equal(m[-1, :-1], enc)


@pytest.mark.parametrize("T", [1, 3, 6])
def test_decoder_row_counts_and_isolation(T):
    wm, om, cm = masks(words=4, objs=1, ocr=3)
    m = build_mask(wm, om, cm, T)[0]
    S_enc = wm.shape[1] + om.shape[1] + cm.shape[1]
    n_real = int(wm.sum() + om.sum() + cm.sum())
    for t in range(T):
        assert int(m[S_enc + t].sum()) == n_real + t + 1
        assert m[S_enc + t, S_enc:S_enc + t + 1].all()
    assert not m[:S_enc, S_enc:].any()
    enc = torch.cat([wm, om, cm], 1)[0]
    for i in range(S_enc):
        if enc[i]:
            assert torch.equal(m[i, :S_enc], enc)
        else:
            assert int(m[i].sum()) == 1 and m[i, i]


@pytest.fixture
def stack():
    torch.manual_seed(0)
    cfg = small_config()
    return FusionTransformer(cfg.d, cfg.num_layers, cfg.num_heads, 0.0).double().eval(), cfg


def test_zero_layers_is_identity():
    x = torch.randn(2, 7, 16, dtype=torch.float64)
    mask = torch.ones(2, 7, 7, dtype=torch.bool)
    assert torch.equal(FusionTransformer(16, 0, 2, 0.0)(x, mask), x)


def test_non_finite_activation_names_layer(stack):
    model, cfg = stack
    x = torch.randn(1, 4, cfg.d, dtype=torch.float64)
    x[0, 0, 0] = float("inf")
    with pytest.raises(FloatingPointError, match="layer 0"):
        model(x, torch.ones(1, 4, 4, dtype=torch.bool))


def fused(problem, perturb=None):
    model, batch, targets, *_ = problem
    bundle = model.embed.bundle(batch, targets["prev_slots"])
    if perturb:
        perturb(bundle)
    mask = build_mask(*bundle.encoder_masks, bundle.h_dec.shape[1])
    c = model.config
    return split(model.fusion(model.embed.pack(bundle), mask), c.V + 1, c.E, c.M, c.T)


def test_decoder_causality(problem):
    base = fused(problem)
    T = base.z_dec.shape[1]

    def bump_last(b):
        b.h_dec = b.h_dec.clone()
        b.h_dec[:, T - 1] += 5.0 * torch.randn_like(b.h_dec[:, T - 1])

    moved = fused(problem, bump_last)
    assert (base.z_dec[:, : T - 1] - moved.z_dec[:, : T - 1]).abs().max() < 1e-6
    assert (base.z_dec[:, T - 1] - moved.z_dec[:, T - 1]).abs().max() > 1e-3


@pytest.mark.parametrize("step", [0, 1, 3])
def test_encoder_isolated_from_decoder(problem, step):
    base = fused(problem)

    def bump(b):
        b.h_dec = b.h_dec.clone()
        b.h_dec[:, step] += 3.0

    moved = fused(problem, bump)
    for name in ("z_cls", "z_word", "z_obj", "z_ocr"):
        assert (getattr(base, name) - getattr(moved, name)).abs().max() < 1e-6, name
    if step:
        assert (base.z_dec[:, :step] - moved.z_dec[:, :step]).abs().max() < 1e-6


def test_padding_independence(problem):
    model, batch, targets, *_ = problem
    base = fused(problem)
    noisy = dict(batch)
    pad = ~batch["ocr_mask"]
    assert pad.any()
    noisy["ocr_smt"] = batch["ocr_smt"] + 7.0 * pad.unsqueeze(-1)
    noisy["ocr_spt"] = batch["ocr_spt"] + 0.3 * pad.unsqueeze(-1)
    obj_pad = ~batch["obj_mask"]
    noisy["obj_feats"] = batch["obj_feats"] + 5.0 * obj_pad.unsqueeze(-1)
    moved = fused((model, noisy, targets))
    real = batch["ocr_mask"].unsqueeze(-1)
    assert ((base.z_ocr - moved.z_ocr) * real).abs().max() < 1e-6
    assert (base.z_cls - moved.z_cls).abs().max() < 1e-6
    assert (base.z_dec - moved.z_dec).abs().max() < 1e-6


def test_fusion_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = FusionTransformer(8, 1, 2, 0.0).double().eval()
    torch.manual_seed(1)
    x = torch.randn(2, 6, 8, dtype=torch.float64, requires_grad=True)
    wm, om, cm = masks(words=2, objs=1, ocr=1, V1=2, E=1, M=1)
    mask = build_mask(wm, om, cm, T=2).expand(2, -1, -1)
    w = torch.randn(2, 6, 8, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda inp: (model(inp, mask) * w).sum(), (x,), eps=1e-6, atol=1e-7)
