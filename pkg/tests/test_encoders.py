import numpy as np
import pytest
import torch

from hairfast.config import GeneratorConfig, HAIR
from hairfast.encoders import (
    BlendEncoder,
    ConditionMLP,
    Discriminator,
    E4EEncoder,
    FSEncoder,
    FuseFEncoder,
    FuseSEncoder,
    ModulatedMLP,
    ModulationLayer,
    RotateEncoder,
    SEANCodec,
    Segmenter,
    ShapeAdaptor,
    ShapeEncoder,
    zero_init_,
)
from hairfast.errors import ConfigError
from hairfast.generator import FTensor, ToyGenerator
from hairfast.masks import SegMask
from hairfast.perception import PerceptionBundle

from helpers import fd_directional_check

CFG = GeneratorConfig(output_resolution=32, style_dim=32, channel_base=16,
                      channel_max=64, f_edit_block=2)


def rand(shape, seed=0, dtype=torch.float32):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def rand_img(seed, batch=None):
    shape = (3, 32, 32) if batch is None else (batch, 3, 32, 32)
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed)) * 2 - 1


class TestModulation:
    def test_zero_init_condition_nets_give_identity(self):
        layer = ModulationLayer(width=16, cond_dim=8, hidden=12, zero_init=True)
        x = rand((5, 16), 1)
        cond = rand((5, 8), 2)
        assert torch.equal(layer(x, cond), x)

    def test_gradients_match_finite_differences(self):
        layer = ModulationLayer(width=8, cond_dim=6, hidden=10).double()
        x = rand((3, 8), 3, torch.float64)
        cond = rand((3, 6), 4, torch.float64)

        def f(xx, cc):
            return (layer(xx, cc) * torch.linspace(0.5, 1.5, 8, dtype=torch.float64)).sum()

        fd_directional_check(f, [x, cond], eps=1e-6, rtol=1e-3)

    def test_zero_condition_fixed_affine_byte_stable(self):
        layer = ModulationLayer(width=16, cond_dim=8, hidden=12)
        x = rand((4, 16), 5)
        zeros = torch.zeros(4, 8)
        assert torch.equal(layer(x, zeros), layer(x, zeros))

    def test_block_structure(self):
        mlp = ModulatedMLP(width=16, cond_dim=16, hidden=16, n_blocks=5, seed=0)
        assert len(mlp.blocks) == 5
        head_params = list(mlp.head.parameters())
        assert all(bool((p == 0).all()) for p in head_params)


class TestRotateEncoder:
    def test_zero_init_is_exact_identity(self):
        enc = RotateEncoder(CFG, seed=1)
        w_src, w_tgt = rand((CFG.n_style_vectors, CFG.style_dim), 1), rand((CFG.n_style_vectors, CFG.style_dim), 2)
        assert torch.equal(enc(w_src, w_tgt), w_src)

    def test_tail_rows_bitwise_for_any_weights(self):
        enc = RotateEncoder(CFG, seed=2)
        with torch.no_grad():
            for p in enc.parameters():
                p.add_(torch.randn_like(p))
        w_src, w_tgt = rand((CFG.n_style_vectors, CFG.style_dim), 3), rand((CFG.n_style_vectors, CFG.style_dim), 4)
        out = enc(w_src, w_tgt)
        k = CFG.rotate_rows
        assert torch.equal(out[k:], w_src[k:])
        assert not torch.equal(out[:k], w_src[:k])

    def test_coarse_third_row_count(self):
        assert CFG.rotate_rows == CFG.n_style_vectors // 3
        paper_like = GeneratorConfig(output_resolution=1024, style_dim=8, channel_base=8,
                                     channel_max=8, f_edit_block=6)
        assert paper_like.n_style_vectors == 18
        assert paper_like.rotate_rows == 6

    def test_gradient_check(self):
        enc = RotateEncoder(CFG, seed=3).double()
        with torch.no_grad():
            for p in enc.parameters():
                p.add_(0.1 * torch.randn_like(p))
        w_src = rand((CFG.n_style_vectors, CFG.style_dim), 5, torch.float64)
        w_tgt = rand((CFG.n_style_vectors, CFG.style_dim), 6, torch.float64)

        def f(a, b):
            return enc(a, b).square().mean()

        fd_directional_check(f, [w_src, w_tgt], eps=1e-6, rtol=1e-3)


class TestBlendEncoder:
    def test_zero_init_identity(self):
        enc = BlendEncoder(CFG, seed=4)
        s_src = rand((CFG.n_post_split_vectors, CFG.style_dim), 7)
        s_col = rand((CFG.n_post_split_vectors, CFG.style_dim), 8)
        emb = rand((CFG.embed_dim,), 9)
        assert torch.equal(enc(s_src, s_col, emb, emb), s_src)

    def test_condition_width_is_three_style_dims(self):
        assert BlendEncoder(CFG).cond_dim == 3 * CFG.style_dim
        paper_scale = GeneratorConfig(output_resolution=1024, style_dim=512,
                                      channel_base=16, channel_max=64, f_edit_block=6)
        assert BlendEncoder(paper_scale).cond_dim == 1536

    def test_batched_matches_single(self):
        enc = BlendEncoder(CFG, seed=5)
        with torch.no_grad():
            for p in enc.parameters():
                p.add_(0.05 * torch.randn_like(p))
        s_src = rand((3, CFG.n_post_split_vectors, CFG.style_dim), 10)
        s_col = rand((3, CFG.n_post_split_vectors, CFG.style_dim), 11)
        ef = rand((3, CFG.embed_dim), 12)
        eh = rand((3, CFG.embed_dim), 13)
        out = enc(s_src, s_col, ef, eh)
        for i in range(3):
            single = enc(s_src[i], s_col[i], ef[i], eh[i])
            assert torch.allclose(out[i], single, atol=1e-6)


class TestFusers:
    def test_fuse_f_zero_init_passes_blend_branch(self):
        fuser = FuseFEncoder(CFG, seed=6)
        ch = CFG.channels(CFG.f_refine_block)
        res = CFG.block_resolution(CFG.f_refine_block)
        fb = FTensor(rand((ch, res, res), 14), CFG.f_refine_block)
        fs = FTensor(rand((ch, res, res), 15), CFG.f_refine_block)
        out = fuser(fb, fs)
        assert torch.equal(out.data, fb.data)
        assert out.data.shape == fb.data.shape

    def test_fuse_f_gradients(self):
        fuser = FuseFEncoder(CFG, depth=2, seed=7).double()
        with torch.no_grad():
            for p in fuser.parameters():
                p.add_(0.05 * torch.randn_like(p))
        ch = CFG.channels(CFG.f_refine_block)
        res = CFG.block_resolution(CFG.f_refine_block)
        fb = rand((ch, res, res), 16, torch.float64)
        fs = rand((ch, res, res), 17, torch.float64)

        def f(a, b):
            return fuser(FTensor(a, CFG.f_refine_block), FTensor(b, CFG.f_refine_block)).data.square().mean()

        fd_directional_check(f, [fb, fs], eps=1e-6, rtol=1e-3)

    def test_fuse_s_zero_init_offset_gives_latent_avg(self):
        gen = ToyGenerator(CFG, seed=0).eval()
        fuser = FuseSEncoder(CFG, seed=8)
        _, s_avg = gen.latent_avg()
        s_b = rand((CFG.n_post_split_vectors, CFG.style_dim), 18)
        s_s = rand((CFG.n_post_split_vectors, CFG.style_dim), 19)
        offset = fuser(s_b, s_s)
        assert bool((offset == 0).all())
        assert torch.equal(s_avg + offset, s_avg)


class TestFSEncoder:
    def test_edit_variant_captures_below_edit_block(self):
        enc = FSEncoder(CFG, "edit16", seed=9)
        f, s = enc(rand_img(20))
        assert f.block_index == CFG.f_edit_block - 1
        assert f.resolution == CFG.block_resolution(CFG.f_edit_block - 1)
        assert s.shape == (CFG.n_post_split_vectors, CFG.style_dim)

    def test_refine_variant_captures_at_refine_block(self):
        enc = FSEncoder(CFG, "refine64", seed=10)
        f, s = enc(rand_img(21))
        assert f.block_index == CFG.f_refine_block
        assert f.resolution == CFG.block_resolution(CFG.f_refine_block)

    def test_deterministic(self):
        enc = FSEncoder(CFG, "edit16", seed=11)
        img = rand_img(22)
        f1, s1 = enc(img)
        f2, s2 = enc(img)
        assert torch.equal(f1.data, f2.data) and torch.equal(s1, s2)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            FSEncoder(CFG, "edit32")


class TestSEAN:
    def test_roundtrip_runs_and_is_deterministic(self):
        codec = SEANCodec(CFG, seed=12)
        img = rand_img(23)
        mask = SegMask(torch.randint(0, CFG.n_classes, (32, 32),
                                     generator=torch.Generator().manual_seed(0)))
        codes = codec.encode(img, mask)
        out1 = codec.decode(codes, mask)
        out2 = codec.decode(codec.encode(img, mask), mask)
        assert torch.equal(out1, out2)
        assert out1.shape == (3, codec.render_res, codec.render_res)

    def test_absent_class_uses_learned_default(self):
        codec = SEANCodec(CFG, seed=13)
        img = rand_img(24)
        no_hair = SegMask(torch.zeros(32, 32, dtype=torch.long))
        codes = codec.encode(img, no_hair)
        assert torch.equal(codes[HAIR], codec.default_codes[HAIR])
        with_hair = SegMask(torch.full((32, 32), HAIR, dtype=torch.long))
        out = codec.decode(codes, with_hair)  # renders from the default, no error
        assert out.shape[-1] == codec.render_res

    def test_render_resolution_capped(self):
        assert SEANCodec(CFG).render_res == 32
        big = GeneratorConfig(output_resolution=1024, style_dim=8, channel_base=8,
                              channel_max=16, f_edit_block=6)
        assert SEANCodec(big).render_res == 256


class TestShapeNetworks:
    def test_adaptor_emits_valid_segmask(self):
        enc = ShapeEncoder(CFG, seed=14)
        adapt = ShapeAdaptor(CFG, seed=15)
        mask = SegMask(torch.randint(0, CFG.n_classes, (32, 32),
                                     generator=torch.Generator().manual_seed(1)))
        hair_emb, face_emb = enc(mask, mask)
        out = adapt(hair_emb, face_emb)
        assert out.classes.shape == (32, 32)
        assert int(out.classes.min()) >= 0 and int(out.classes.max()) < CFG.n_classes

    def test_embeddings_deterministic(self):
        enc = ShapeEncoder(CFG, seed=16)
        mask = SegMask(torch.randint(0, CFG.n_classes, (32, 32),
                                     generator=torch.Generator().manual_seed(2)))
        a = enc.hair_embedding(mask)
        b = enc.hair_embedding(mask)
        assert torch.equal(a, b)


class TestSegmenterAndDiscriminator:
    def test_segmenter_deterministic(self):
        seg = Segmenter(CFG, seed=17)
        img = rand_img(25)
        assert torch.equal(seg(img).classes, seg(img).classes)

    def test_segmenter_logits_shape(self):
        seg = Segmenter(CFG, seed=18)
        assert seg.logits(rand_img(26, batch=2)).shape == (2, CFG.n_classes, 32, 32)

    def test_discriminator_scalar_logit(self):
        disc = Discriminator(CFG, seed=19)
        assert disc(rand_img(27)).shape == ()
        assert disc(rand_img(28, batch=4)).shape == (4,)


class TestE4E:
    def test_deterministic(self):
        enc = E4EEncoder(CFG, seed=20)
        img = rand_img(29)
        assert torch.equal(enc(img), enc(img))

    def test_output_conforms(self):
        enc = E4EEncoder(CFG, seed=21)
        w = enc(rand_img(30))
        assert w.shape == (CFG.n_style_vectors, CFG.style_dim)

    def test_offsets_relative_to_base(self):
        enc = E4EEncoder(CFG, seed=22)
        with torch.no_grad():
            enc.w_base.fill_(2.0)
        img = rand_img(31)
        assert torch.allclose(enc(img) - enc.offsets(img), torch.full_like(enc.w_base, 2.0))


class TestPerception:
    def test_clip_embedding_unit_norm(self):
        perc = PerceptionBundle(CFG.embed_dim)
        for seed in range(4):
            e = perc.clip(rand_img(seed))
            assert abs(float(e.norm()) - 1.0) < 1e-5

    def test_keypoints_shape_and_bounds(self):
        perc = PerceptionBundle(CFG.embed_dim)
        kp = perc.keypoints(rand_img(32))
        assert kp.shape == (76, 2)
        assert float(kp.min()) >= 0.0 and float(kp.max()) <= 31.0

    def test_keypoint_translation_equivariance(self):
        import dataclasses

        import torch.nn.functional as F

        from hairfast.data import render_face, sample_params

        perc = PerceptionBundle(CFG.embed_dim)
        rng = np.random.default_rng(5)
        errs = []
        for _ in range(8):
            p = dataclasses.replace(sample_params(rng), cx=0.5, cy=0.5)
            img, _ = render_face(p, 32)
            shifted = F.pad(img[None], (2, -2, 3, -3), mode="replicate")[0]
            delta = perc.keypoints(shifted) - perc.keypoints(img)
            errs.append(float((delta - torch.tensor([2.0, 3.0])).abs().mean()))
        assert float(np.mean(errs)) < 1.0

    def test_pyramid_returns_feature_list(self):
        perc = PerceptionBundle(CFG.embed_dim)
        feats = perc.pyramid(rand_img(33))
        assert len(feats) == 3
        assert feats[0].shape[-1] == 32 and feats[1].shape[-1] == 16

    def test_identity_embedder_unit_norm_and_deterministic(self):
        perc = PerceptionBundle(CFG.embed_dim)
        img = rand_img(34)
        a, b = perc.identity(img), perc.identity(img)
        assert torch.equal(a, b)
        assert abs(float(a.norm()) - 1.0) < 1e-5

    def test_seeds_recorded_and_reproducible(self):
        a = PerceptionBundle(CFG.embed_dim, seeds=(1, 2, 3, 4))
        b = PerceptionBundle(CFG.embed_dim, seeds=(1, 2, 3, 4))
        img = rand_img(35)
        assert torch.equal(a.clip(img), b.clip(img))
        c = PerceptionBundle(CFG.embed_dim, seeds=(9, 2, 3, 4))
        assert not torch.equal(a.clip(img), c.clip(img))


class TestEncoderGradients:
    """Every encoder forward passes an FD check (float64, rel 1e-3)."""

    def probe(self, module, inputs, readout):
        with torch.no_grad():
            for p in module.parameters():
                if p.requires_grad:
                    p.add_(0.05 * torch.randn_like(p))
        fd_directional_check(readout, inputs, eps=1e-6, rtol=1e-3)

    def test_e4e(self):
        enc = E4EEncoder(CFG, seed=23).double()
        self.probe(enc, [rand_img(36).double()], lambda x: enc(x).square().mean())

    def test_fs(self):
        enc = FSEncoder(CFG, "refine64", seed=24).double()

        def f(x):
            ft, s = enc(x)
            return ft.data.square().mean() + s.square().mean()

        self.probe(enc, [rand_img(37).double()], f)

    def test_sean(self):
        codec = SEANCodec(CFG, seed=25).double()
        mask = SegMask(torch.randint(0, CFG.n_classes, (32, 32),
                                     generator=torch.Generator().manual_seed(3)))

        def f(x):
            return codec.decode(codec.encode(x, mask), mask).square().mean()

        self.probe(codec, [rand_img(38).double()], f)

    def test_discriminator(self):
        disc = Discriminator(CFG, seed=26).double()
        self.probe(disc, [rand_img(39).double()], lambda x: disc(x).square().mean())

    def test_segmenter(self):
        seg = Segmenter(CFG, seed=27).double()
        self.probe(seg, [rand_img(40).double()], lambda x: seg.logits(x).square().mean())
