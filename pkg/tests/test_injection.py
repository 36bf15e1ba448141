import pytest
import torch

from mvfuse import backbone as bb
from mvfuse import injection as inj
from mvfuse import tensor_core as tc

SMALL = bb.BackboneConfig(ch1=8, ch2=16, temb_dim=16, tokens=2)


@pytest.fixture
def pair(gen):
    backbone = bb.init_backbone(SMALL, gen)
    return backbone, inj.init_from_backbone(backbone, SMALL, gen)


def _batch(gen, b=2, h=4):
    return (torch.randn(b, 4, h, h, generator=gen), torch.randn(b, 4, h, h, generator=gen),
            torch.randint(1, 101, (b,), generator=gen), torch.randn(b, 4, generator=gen))


def test_clone_contract(pair):
    backbone, ctrl = pair
    cloned = [n for n in ctrl if not n.startswith(("inject.stem", "inject.link"))]
    assert cloned
    for name in cloned:
        src = "backbone." + name[len("inject."):]
        assert torch.equal(ctrl[name], backbone[src])
        assert ctrl[name].data_ptr() != backbone[src].data_ptr()
    blocks = {n[len("inject."):].split(".")[0] for n in cloned}
    assert blocks == set(inj.CLONED_BLOCKS)
    assert "conv_in" not in blocks


def test_stem_and_links(pair):
    _, ctrl = pair
    assert ctrl["inject.stem.weight"].shape == (SMALL.ch1, 8, 3, 3)
    links = sorted(n for n in ctrl if n.startswith("inject.link"))
    assert len({n.split(".")[1] for n in links}) == inj.N_LINKS
    for n in links:
        assert torch.count_nonzero(ctrl[n]) == 0


def test_parameter_count_from_shapes(pair):
    backbone, ctrl = pair
    enc = sum(v.numel() for n, v in backbone.tensors.items()
              if n[len("backbone."):].split(".")[0] in inj.CLONED_BLOCKS)
    stem = SMALL.ch1 * 8 * 9 + SMALL.ch1
    links = sum(c * c + c for c in SMALL.junction_channels())
    assert ctrl.num_elements() == enc + stem + links


def test_without_xt_stem_has_four_channels(gen):
    backbone = bb.init_backbone(SMALL, gen)
    ctrl = inj.init_from_backbone(backbone, SMALL, gen, use_xt=False)
    assert not inj.uses_xt(ctrl)
    f, x, t, d = _batch(gen)
    assert len(inj.compute_residuals(ctrl, SMALL, f, x, t, d)) == inj.N_LINKS


def test_residuals_zero_at_init(pair, gen):
    _, ctrl = pair
    f, x, t, d = _batch(gen)
    res = inj.compute_residuals(ctrl, SMALL, f, x, t, d)
    assert [tuple(r.shape[1:]) for r in res] == SMALL.junction_shapes(4)
    assert all(torch.count_nonzero(r) == 0 for r in res)


def test_injected_backbone_equals_plain_at_init(pair, gen):
    backbone, ctrl = pair
    f, x, t, d = _batch(gen)
    m = torch.randn(x.shape, generator=gen)
    plain = bb.predict_eps(backbone, SMALL, x, t, m, d)
    injected = bb.predict_eps(backbone, SMALL, x, t, m, d, inj.make_injector(ctrl, SMALL, f, d)(x, t))
    assert torch.equal(plain, injected)


def test_links_receive_gradient_at_init(pair, gen):
    """Zero links still pass gradient to themselves, which is what lets training start."""
    backbone, ctrl = pair
    backbone.freeze()
    ctrl.requires_grad_()
    f, x, t, d = _batch(gen)
    m = torch.randn(x.shape, generator=gen)
    out = bb.predict_eps(backbone, SMALL, x, t, m, d, inj.compute_residuals(ctrl, SMALL, f, x, t, d))
    grads = tc.grad((out * torch.randn(out.shape, generator=gen)).sum(), ctrl)
    assert all(grads[f"inject.link{i}.weight"].abs().sum() > 0 for i in range(inj.N_LINKS))
    assert "backbone.out.weight" not in grads


def test_gradient_reaches_fused_latent(f64, gen):
    backbone = bb.init_backbone(SMALL, gen)
    ctrl = inj.init_from_backbone(backbone, SMALL, gen)
    with torch.no_grad():
        for i in range(inj.N_LINKS):
            w = ctrl[f"inject.link{i}.weight"]
            w.copy_(torch.randn(w.shape, generator=gen) * 0.3)
    f0, x, t, d = _batch(gen)
    m = torch.randn(x.shape, generator=gen)
    probe = tc.ParamSet({"f": f0.clone()})
    wout = torch.randn(x.shape, generator=gen)

    def loss(p):
        res = inj.compute_residuals(ctrl, SMALL, p["f"], x, t, d)
        return (bb.predict_eps(backbone, SMALL, x, t, m, d, res) * wout).sum()

    probe.requires_grad_()
    g = tc.grad(loss(probe), probe)["f"]
    assert g.abs().sum() > 0
    rep = tc.fd_check(loss, tc.ParamSet({"f": f0.clone()}), eps=1e-5)
    assert rep.max_rel_error < 1e-4, rep


def test_check_against_backbone(pair, gen):
    _, ctrl = pair
    inj.check_against_backbone(ctrl, SMALL)
    with pytest.raises(tc.ShapeError, match="link"):
        inj.check_against_backbone(ctrl, bb.BackboneConfig(ch1=8, ch2=32, temb_dim=16, tokens=2))
    extra = ctrl.clone()
    extra.add("inject.link7.weight", torch.zeros(16, 16, 1, 1))
    with pytest.raises(tc.ShapeError):
        inj.check_against_backbone(extra, SMALL)


def test_shape_error_on_mismatched_inputs(pair, gen):
    _, ctrl = pair
    f, x, t, d = _batch(gen)
    with pytest.raises(tc.ShapeError, match="compute_residuals"):
        inj.compute_residuals(ctrl, SMALL, f[:, :3], x, t, d)


def test_gating_probe_shape_and_zero_at_init(pair, gen):
    _, ctrl = pair
    f, x, t, _ = _batch(gen)
    rows = inj.gating_probe(ctrl, SMALL, f, x, t)
    assert [r[0] for r in rows] == [0.0, 90.0, 180.0]
    assert all(r[1] == 0.0 for r in rows)


def test_residual_magnitude():
    r = [torch.ones(2, 1, 2, 2) * 3, torch.zeros(2, 4, 1, 1)]
    assert inj.residual_magnitude(r) == pytest.approx(3.0)
