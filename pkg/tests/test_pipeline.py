import numpy as np
import pytest
import torch

from hairfast.config import FACE, GeneratorConfig
from hairfast.errors import DegenerateInputError, RequestError, ShapeMismatchError
from hairfast.generator import FTensor
from hairfast.masks import SegMask, SoftMask
from hairfast.pipeline import (
    HairFastRuntime,
    TransferRequest,
    compose_f,
    inpaint_f,
    mix_fs,
    pose_align,
    transfer,
)

CFG = GeneratorConfig(output_resolution=32, style_dim=32, channel_base=16,
                      channel_max=64, f_edit_block=2)


@pytest.fixture(scope="module")
def rt():
    runtime = HairFastRuntime.from_random(CFG, seed=0)
    runtime.generator.latent_avg()
    return runtime.eval_all()


def rand_img(seed):
    return torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(seed)) * 2 - 1


def const_f(value, seed=None):
    res = CFG.block_resolution(CFG.f_edit_block)
    ch = CFG.channels(CFG.f_edit_block)
    if seed is None:
        data = torch.full((ch, res, res), float(value))
    else:
        data = torch.randn(ch, res, res, generator=torch.Generator().manual_seed(seed))
    return FTensor(data, CFG.f_edit_block)


def mask_of(value_or_array):
    res = CFG.block_resolution(CFG.f_edit_block)
    if np.isscalar(value_or_array):
        return SoftMask(torch.full((res, res), float(value_or_array)))
    return SoftMask(torch.as_tensor(value_or_array, dtype=torch.float32))


class TestRequestValidation:
    def test_full_requires_all_three(self):
        req = TransferRequest(face=rand_img(0), shape=rand_img(1), mode="full")
        with pytest.raises(RequestError) as exc:
            req.validate()
        assert exc.value.missing_role == "color"

    def test_both_requires_shape(self):
        with pytest.raises(RequestError) as exc:
            TransferRequest(face=rand_img(0), mode="both").validate()
        assert exc.value.missing_role == "shape"

    def test_shape_only_requires_shape(self):
        with pytest.raises(RequestError) as exc:
            TransferRequest(face=rand_img(0), color=rand_img(1), mode="shape_only").validate()
        assert exc.value.missing_role == "shape"

    def test_color_only_requires_color(self):
        with pytest.raises(RequestError) as exc:
            TransferRequest(face=rand_img(0), shape=rand_img(1), mode="color_only").validate()
        assert exc.value.missing_role == "color"

    def test_unknown_mode(self):
        with pytest.raises(RequestError):
            TransferRequest(face=rand_img(0), mode="everything").validate()

    def test_valid_requests_pass(self):
        TransferRequest(face=rand_img(0), shape=rand_img(1), color=rand_img(2), mode="full").validate()
        TransferRequest(face=rand_img(0), shape=rand_img(1), mode="both").validate()
        TransferRequest(face=rand_img(0), shape=rand_img(1), mode="shape_only").validate()
        TransferRequest(face=rand_img(0), color=rand_img(1), mode="color_only").validate()


class TestComposeF:
    @pytest.mark.parametrize("ha", [0.0, 1.0])
    @pytest.mark.parametrize("hs", [0.0, 1.0])
    @pytest.mark.parametrize("hp", [0.0, 1.0])
    def test_partition_of_unity_all_eight_cases(self, ha, hs, hp):
        coeffs = [ha * hp, ha * (1 - hp), (1 - ha) * (1 - hs), (1 - ha) * hs]
        assert sum(coeffs) == pytest.approx(1.0)
        # and compose_f with constant-valued tensors reproduces the weighting
        out = compose_f(const_f(1.0), const_f(2.0), const_f(3.0), const_f(4.0),
                        mask_of(ha), mask_of(hs), mask_of(hp))
        expect = ha * hp * 2.0 + ha * (1 - hp) * 4.0 + (1 - ha) * (1 - hs) * 1.0 + (1 - ha) * hs * 3.0
        assert torch.allclose(out.data, torch.full_like(out.data, expect))

    def test_self_transfer_collapse_bitwise(self):
        f_mix = const_f(None, seed=1)
        f_inp_a = const_f(None, seed=2)
        f_inp_b = const_f(None, seed=3)
        res = CFG.block_resolution(CFG.f_edit_block)
        h = (torch.rand(res, res, generator=torch.Generator().manual_seed(4)) > 0.5).float()
        out = compose_f(f_mix, FTensor(f_mix.data.clone(), f_mix.block_index), f_inp_a, f_inp_b,
                        SoftMask(h), SoftMask(h), SoftMask(h))
        assert torch.equal(out.data, f_mix.data)

    def test_all_hair_takes_shape_branch(self):
        out = compose_f(const_f(1.0), const_f(2.0), const_f(3.0), const_f(4.0),
                        mask_of(1.0), mask_of(0.0), mask_of(1.0))
        assert torch.equal(out.data, const_f(2.0).data)

    def test_soft_masks_keep_partition(self):
        res = CFG.block_resolution(CFG.f_edit_block)
        g = torch.Generator().manual_seed(5)
        ha, hs, hp = (torch.rand(res, res, generator=g) for _ in range(3))
        coeff = ha * hp + ha * (1 - hp) + (1 - ha) * (1 - hs) + (1 - ha) * hs
        assert torch.allclose(coeff, torch.ones_like(coeff), atol=1e-6)

    def test_shape_mismatch_rejected(self):
        small = FTensor(torch.zeros(CFG.channels(CFG.f_edit_block), 4, 4), CFG.f_edit_block)
        with pytest.raises(ShapeMismatchError):
            compose_f(const_f(1.0), small, const_f(1.0), const_f(1.0),
                      mask_of(1.0), mask_of(0.0), mask_of(1.0))


class FormulaProbeRuntime:
    """Duck-typed stand-in driving mix_fs with constant F fields."""

    class _Gen:
        def __init__(self, cfg, fse_value, e4e_value):
            self.cfg = cfg
            self.fse_value = fse_value
            self.e4e_value = e4e_value

        def resume_to_block(self, f, s, a, b):
            res = self.cfg.block_resolution(b)
            return FTensor(torch.full((1, res, res), self.fse_value), b)

        def run_to_block(self, w, b):
            res = self.cfg.block_resolution(b)
            return FTensor(torch.full((1, res, res), self.e4e_value), b)

    def __init__(self, cfg, alpha, hair_value, fse=1.0, e4e=0.0):
        self.cfg = cfg
        self.alpha = alpha
        self.hair_value = hair_value
        self.generator = self._Gen(cfg, fse, e4e)
        self.f_edit_res = cfg.block_resolution(cfg.f_edit_block)

    def segment(self, img):
        from hairfast.config import HAIR

        cls = torch.full((self.cfg.output_resolution,) * 2,
                         HAIR if self.hair_value else FACE, dtype=torch.long)
        return SegMask(cls)

    def fs16(self, img):
        return FTensor(torch.zeros(1, 4, 4), self.cfg.f_edit_block - 1), torch.zeros(
            self.cfg.n_post_split_vectors, self.cfg.style_dim)

    def e4e(self, img):
        return torch.zeros(self.cfg.n_style_vectors, self.cfg.style_dim)


class TestMixFS:
    def test_no_hair_returns_reconstruction_branch_exactly(self):
        probe = FormulaProbeRuntime(CFG, alpha=0.95, hair_value=False, fse=1.7, e4e=-0.4)
        f_mix, _, h = mix_fs(probe, rand_img(0))
        assert torch.equal(f_mix.data, torch.full_like(f_mix.data, 1.7))
        assert h.values.sum() == 0

    def test_alpha_095_hair_probe_gives_005(self):
        probe = FormulaProbeRuntime(CFG, alpha=0.95, hair_value=True, fse=1.0, e4e=0.0)
        f_mix, _, _ = mix_fs(probe, rand_img(1))
        assert torch.allclose(f_mix.data, torch.full_like(f_mix.data, 0.05), atol=1e-7)

    def test_alpha_zero_ignores_hair_mask(self):
        probe = FormulaProbeRuntime(CFG, alpha=0.0, hair_value=True, fse=1.3, e4e=99.0)
        f_mix, _, _ = mix_fs(probe, rand_img(2))
        assert torch.allclose(f_mix.data, torch.full_like(f_mix.data, 1.3), atol=1e-5)

    def test_default_alpha(self, rt):
        assert rt.alpha == 0.95

    def test_real_runtime_shapes(self, rt):
        f_mix, s, h = mix_fs(rt, rand_img(3))
        assert f_mix.block_index == CFG.f_edit_block
        assert f_mix.resolution == rt.f_edit_res
        assert s.shape == (CFG.n_post_split_vectors, CFG.style_dim)
        assert h.resolution == rt.f_edit_res


class TestStages:
    def test_inpaint_f_deterministic(self, rt):
        img = rand_img(4)
        m = rt.segment(img)
        m_align = rt.segment(rand_img(5))
        a = inpaint_f(rt, img, m, m_align)
        b = inpaint_f(rt, img, m, m_align)
        assert torch.equal(a.data, b.data)
        assert a.block_index == CFG.f_edit_block

    def test_inpaint_f_detached_hair_still_renders(self, rt):
        img = rand_img(6)
        m = rt.segment(img)
        # hair floating far from the face: the codec+inverter path must not fail
        weird = torch.zeros(32, 32, dtype=torch.long)
        weird[0:4, 0:4] = 2
        weird[20:28, 10:22] = 1
        out = inpaint_f(rt, img, m, SegMask(weird))
        assert torch.isfinite(out.data).all()

    def test_pose_align_returns_valid_masks(self, rt):
        m_align, h_align, m_rotate = pose_align(rt, rand_img(7), rand_img(8))
        assert m_align.classes.shape == (32, 32)
        assert h_align.values.shape == (32, 32)
        assert m_rotate.classes.shape == (32, 32)

    def test_pose_align_rejects_faceless_source(self, rt, monkeypatch):
        def all_background(img):
            return SegMask(torch.zeros(32, 32, dtype=torch.long))

        monkeypatch.setattr(rt, "segment", all_background)
        with pytest.raises(DegenerateInputError) as exc:
            pose_align(rt, rand_img(9), rand_img(10))
        assert exc.value.stage == "pose"


class TestTransferModes:
    def test_color_only_has_no_pose_or_shape_timings(self, rt):
        req = TransferRequest(face=rand_img(11), color=rand_img(12), mode="color_only")
        _, art = transfer(rt, req)
        assert "pose" not in art.timings and "shape" not in art.timings
        assert {"embed", "color", "refine"} <= set(art.timings)

    def test_shape_only_still_runs_color_module(self, rt):
        req = TransferRequest(face=rand_img(13), shape=rand_img(14), mode="shape_only")
        _, art = transfer(rt, req)
        assert art.s_blend is not None
        assert art.produced_by["s_blend"] == "color"
        assert "pose" in art.timings and "shape" in art.timings

    def test_both_runs_pose_align_once(self, rt, monkeypatch):
        import hairfast.pipeline as pl

        calls = []
        original = pl.pose_align

        def counting(*args, **kwargs):
            calls.append(1)
            return original(*args, **kwargs)

        monkeypatch.setattr(pl, "pose_align", counting)
        req = TransferRequest(face=rand_img(15), shape=rand_img(16), mode="both")
        transfer(rt, req)
        assert len(calls) == 1

    def test_full_runs_pose_align_twice(self, rt, monkeypatch):
        import hairfast.pipeline as pl

        calls = []
        original = pl.pose_align

        def counting(*args, **kwargs):
            calls.append(1)
            return original(*args, **kwargs)

        monkeypatch.setattr(pl, "pose_align", counting)
        req = TransferRequest(face=rand_img(17), shape=rand_img(18), color=rand_img(19), mode="full")
        transfer(rt, req)
        assert len(calls) == 2

    def test_color_only_never_segments_a_shape_image(self, rt, monkeypatch):
        seen = []
        original = rt.segment

        def recording(img):
            seen.append(img)
            return original(img)

        monkeypatch.setattr(rt, "segment", recording)
        face, color = rand_img(20), rand_img(21)
        transfer(rt, TransferRequest(face=face, color=color, mode="color_only"))
        for img in seen:
            assert torch.equal(img, face) or torch.equal(img, color)

    def test_end_to_end_determinism(self, rt):
        req = TransferRequest(face=rand_img(22), shape=rand_img(23), color=rand_img(24), mode="full")
        out1, art1 = transfer(rt, req)
        out2, art2 = transfer(rt, req)
        assert torch.equal(out1, out2)
        assert torch.equal(art1.i_blend, art2.i_blend)

    def test_artifacts_tagged_with_stages(self, rt):
        req = TransferRequest(face=rand_img(25), shape=rand_img(26), mode="both")
        _, art = transfer(rt, req)
        assert art.produced_by["m_align"] == "pose"
        assert art.produced_by["f_align"] == "shape"
        assert art.produced_by["i_final"] == "refine"
        assert all(t >= 0 for t in art.timings.values())

    def test_missing_role_raises_before_any_compute(self, rt):
        with pytest.raises(RequestError):
            transfer(rt, TransferRequest(face=rand_img(27), mode="full"))


class TestGradientFlow:
    def test_stages_reach_all_trainable_components(self, rt):
        """Gradients from a final-image loss reach rotation, blending and
        fusing encoders when stages run with grad enabled."""
        for p in rt.rotate.parameters():
            p.requires_grad_(True)
        for p in rt.blend.parameters():
            p.requires_grad_(True)
        for p in rt.fuse_f.parameters():
            p.requires_grad_(True)
        face, shape = rand_img(28), rand_img(29)
        m_source = rt.segment(face)
        m_align, h_align, _ = pose_align(rt, face, shape)
        f_mix, s, h_edit = mix_fs(rt, face, seg=m_source)
        from hairfast.masks import downsample_mask, hair_mask
        from hairfast.pipeline import color_align, refine

        h_align_edit = downsample_mask(h_align, rt.f_edit_res)
        f_inp = inpaint_f(rt, face, m_source, m_align)
        f_align = compose_f(f_mix, f_mix, f_inp, f_inp, h_align_edit, h_edit, h_edit)
        s_blend, i_blend, _, _ = color_align(rt, f_align, face, face, s, s,
                                             hair_mask(m_source), hair_mask(m_source), h_align)
        i_final, _, _ = refine(rt, i_blend, face)
        loss = i_final.square().mean()
        loss.backward()
        assert any(p.grad is not None and float(p.grad.abs().sum()) > 0
                   for p in rt.blend.parameters())
        assert any(p.grad is not None and float(p.grad.abs().sum()) > 0
                   for p in rt.fuse_f.parameters())
        for p in list(rt.rotate.parameters()) + list(rt.blend.parameters()) + list(rt.fuse_f.parameters()):
            p.requires_grad_(False)
            p.grad = None
