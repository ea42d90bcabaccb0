"""The alignment stages and their orchestration.

Order per request: pose alignment (target mask with the donor hair shape),
feature mixing (editability-preserving F reconstruction), shape alignment
(inpaint + four-way F compositing), color alignment (S-space edit), then
refinement (high-resolution F/S fusion restoring source detail).

Stage functions are differentiable and per-request; ``transfer`` wraps
them under ``no_grad`` with per-stage timings. Modes skip exactly the
stages their inputs make redundant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from .config import FACE, GeneratorConfig, scaled_radius
from .encoders import (
    BlendEncoder,
    Discriminator,
    E4EEncoder,
    FSEncoder,
    FuseFEncoder,
    FuseSEncoder,
    RotateEncoder,
    SEANCodec,
    Segmenter,
    ShapeAdaptor,
    ShapeEncoder,
)
from .errors import DegenerateInputError, RequestError, ShapeMismatchError
from .generator import FTensor, ToyGenerator
from .masks import SegMask, SoftMask, downsample_mask, hair_mask
from .perception import PerceptionBundle

MODES = ("full", "both", "shape_only", "color_only")


@dataclass
class TransferRequest:
    face: torch.Tensor
    shape: torch.Tensor | None = None
    color: torch.Tensor | None = None
    mode: str = "full"

    def validate(self):
        if self.mode not in MODES:
            raise RequestError(f"unknown mode {self.mode!r}", missing_role="mode")
        if self.face is None:
            raise RequestError("request is missing the face image", missing_role="face")
        needs_shape = self.mode in ("full", "both", "shape_only")
        needs_color = self.mode in ("full", "color_only")
        if needs_shape and self.shape is None:
            raise RequestError(f"mode {self.mode!r} requires a shape image", missing_role="shape")
        if needs_color and self.color is None:
            raise RequestError(f"mode {self.mode!r} requires a color image", missing_role="color")


@dataclass
class StageArtifacts:
    m_rotate: SegMask | None = None
    m_align: SegMask | None = None
    h_align: SoftMask | None = None
    h_align_color: SoftMask | None = None
    h_source: SoftMask | None = None
    h_shape: SoftMask | None = None
    h_color: SoftMask | None = None
    f_mix_source: FTensor | None = None
    f_mix_shape: FTensor | None = None
    f_inpaint_source: FTensor | None = None
    f_inpaint_shape: FTensor | None = None
    f_align: FTensor | None = None
    s_source: torch.Tensor | None = None
    s_color: torch.Tensor | None = None
    s_blend: torch.Tensor | None = None
    s_final: torch.Tensor | None = None
    emb_face: torch.Tensor | None = None
    emb_hair: torch.Tensor | None = None
    i_blend: torch.Tensor | None = None
    i_final: torch.Tensor | None = None
    timings: dict[str, float] = field(default_factory=dict)
    produced_by: dict[str, str] = field(default_factory=dict)

    def put(self, stage: str, **fields):
        for name, value in fields.items():
            setattr(self, name, value)
            self.produced_by[name] = stage


class HairFastRuntime:
    """All model components plus the generator config they agree on."""

    def __init__(self, cfg: GeneratorConfig, generator, segmenter, e4e, fs16, fs64, rotate,
                 blend, fuse_f, fuse_s, sean, shape_enc, shape_adapt, perception,
                 discriminator=None, alpha: float = 0.95):
        self.cfg = cfg
        self.generator = generator
        self.segmenter = segmenter
        self.e4e = e4e
        self.fs16 = fs16
        self.fs64 = fs64
        self.rotate = rotate
        self.blend = blend
        self.fuse_f = fuse_f
        self.fuse_s = fuse_s
        self.sean = sean
        self.shape_enc = shape_enc
        self.shape_adapt = shape_adapt
        self.perception = perception
        self.discriminator = discriminator
        self.alpha = alpha

    COMPONENTS = ("generator", "segmenter", "e4e", "fs16", "fs64", "rotate", "blend",
                  "fusef", "fuses", "sean", "shape", "disc")

    @classmethod
    def from_random(cls, cfg: GeneratorConfig, seed: int = 0) -> "HairFastRuntime":
        return cls(
            cfg,
            generator=ToyGenerator(cfg, seed=seed),
            segmenter=Segmenter(cfg, seed=seed + 1),
            e4e=E4EEncoder(cfg, seed=seed + 2),
            fs16=FSEncoder(cfg, "edit16", seed=seed + 3),
            fs64=FSEncoder(cfg, "refine64", seed=seed + 4),
            rotate=RotateEncoder(cfg, seed=seed + 5),
            blend=BlendEncoder(cfg, seed=seed + 6),
            fuse_f=FuseFEncoder(cfg, seed=seed + 7),
            fuse_s=FuseSEncoder(cfg, seed=seed + 8),
            sean=SEANCodec(cfg, seed=seed + 9),
            shape_enc=ShapeEncoder(cfg, seed=seed + 10),
            shape_adapt=ShapeAdaptor(cfg, seed=seed + 11),
            perception=PerceptionBundle(cfg.embed_dim),
            discriminator=Discriminator(cfg, seed=seed + 12),
        )

    def modules(self) -> dict[str, torch.nn.Module]:
        return {
            "generator": self.generator, "segmenter": self.segmenter, "e4e": self.e4e,
            "fs16": self.fs16, "fs64": self.fs64, "rotate": self.rotate, "blend": self.blend,
            "fusef": self.fuse_f, "fuses": self.fuse_s, "sean": self.sean,
            "shape": torch.nn.ModuleDict({"enc": self.shape_enc, "adapt": self.shape_adapt}),
            "disc": self.discriminator,
        }

    def eval_all(self):
        for m in self.modules().values():
            if m is not None:
                m.eval()
        return self

    def segment(self, img: torch.Tensor) -> SegMask:
        with torch.no_grad():
            return self.segmenter(img)

    def require_face(self, m: SegMask, stage: str):
        if not bool((m.classes == FACE).any()):
            raise DegenerateInputError("segmenter found no face region", stage=stage)

    @property
    def f_edit_res(self) -> int:
        return self.cfg.block_resolution(self.cfg.f_edit_block)


# -- stages -------------------------------------------------------------------


def pose_align(rt: HairFastRuntime, i_source, i_shape, w_source=None, w_shape=None,
               m_source: SegMask | None = None):
    """Donor hair shape adapted onto the recipient's pose and face layout.

    Returns (m_align, h_align, m_rotate). ``w_*`` accept cached inversion
    latents so a second run for the color reference reuses the face's.
    """
    m_source = m_source if m_source is not None else rt.segment(i_source)
    rt.require_face(m_source, "pose")
    if w_source is None:
        w_source = rt.e4e(i_source)
    if w_shape is None:
        w_shape = rt.e4e(i_shape)
    w_rotate = rt.rotate(w_source, w_shape)
    m_rotate = rt.segment(rt.generator.synthesize(w_rotate))
    hair_emb = rt.shape_enc.hair_embedding(m_rotate)
    face_emb = rt.shape_enc.face_embedding(m_source)
    m_align = rt.shape_adapt(hair_emb, face_emb)
    return m_align, hair_mask(m_align), m_rotate


def mix_fs(rt: HairFastRuntime, img, seg: SegMask | None = None, w=None):
    """Reconstruction features with the hair region traded toward the
    editability path; returns (f_mix, s, hair mask at the edit resolution)."""
    cfg = rt.cfg
    seg = seg if seg is not None else rt.segment(img)
    f16, s = rt.fs16(img)
    f_fse = rt.generator.resume_to_block(f16, s, f16.block_index, cfg.f_edit_block)
    if w is None:
        w = rt.e4e(img)
    f_e4e = rt.generator.run_to_block(w, cfg.f_edit_block)
    h = downsample_mask(hair_mask(seg), rt.f_edit_res).values
    a = rt.alpha
    mixed = (1.0 - h) * f_fse.data + (1.0 - a) * h * f_fse.data + a * h * f_e4e.data
    return FTensor(data=mixed, block_index=cfg.f_edit_block), s, SoftMask(h)


def inpaint_f(rt: HairFastRuntime, img, m: SegMask, m_align: SegMask) -> FTensor:
    """Render the image under the target layout with the per-class codec,
    then re-encode through the editability path (its regularization absorbs
    codec artifacts such as detached hair)."""
    codes = rt.sean.encode(img, m)
    rendered = rt.sean.decode(codes, m_align)
    if rendered.shape[-1] != rt.cfg.output_resolution:
        rendered = torch.nn.functional.interpolate(
            rendered[None], size=rt.cfg.output_resolution, mode="bilinear", align_corners=False
        )[0]
    w = rt.e4e(rendered)
    return rt.generator.run_to_block(w, rt.cfg.f_edit_block)


def compose_f(f_mix_src: FTensor, f_mix_shape: FTensor, f_inp_src: FTensor, f_inp_shape: FTensor,
              h_align: SoftMask, h_source: SoftMask, h_shape: SoftMask) -> FTensor:
    """Four-way mask-weighted compositing; the coefficient fields form a
    partition of unity."""
    tensors = (f_mix_src, f_mix_shape, f_inp_src, f_inp_shape)
    block = f_mix_src.block_index
    res = f_mix_src.data.shape[-1]
    for f in tensors:
        if f.block_index != block or f.data.shape != f_mix_src.data.shape:
            raise ShapeMismatchError("compose_f expects four F tensors of identical shape/block")
    for m in (h_align, h_source, h_shape):
        if m.values.shape[-1] != res:
            raise ShapeMismatchError("compose_f masks must live at the F resolution")
    ha, hs, hp = h_align.values, h_source.values, h_shape.values
    out = (
        ha * hp * f_mix_shape.data
        + ha * (1.0 - hp) * f_inp_shape.data
        + (1.0 - ha) * (1.0 - hs) * f_mix_src.data
        + (1.0 - ha) * hs * f_inp_src.data
    )
    return FTensor(data=out, block_index=block)


def color_align(rt: HairFastRuntime, f_align: FTensor, i_source, i_color, s_source, s_color,
                h_source: SoftMask, h_color: SoftMask, h_align_color: SoftMask):
    """S-space edit toward the reference hair color; returns
    (s_blend, i_blend, emb_face, emb_hair)."""
    face_region = (1.0 - h_align_color.values) * (1.0 - h_source.values)
    emb_face = rt.perception.clip(i_source * face_region)
    emb_hair = rt.perception.clip(i_color * h_color.values)
    s_blend = rt.blend(s_source, s_color, emb_face, emb_hair)
    i_blend = rt.generator.resume_from(f_align, s_blend, rt.cfg.f_edit_block)
    return s_blend, i_blend, emb_face, emb_hair


def refine(rt: HairFastRuntime, i_blend, i_source):
    """High-resolution F/S fusion; returns (i_final, f_final, s_final)."""
    f64_blend, s_blend = rt.fs64(i_blend)
    f64_source, s_source = rt.fs64(i_source)
    f_final = rt.fuse_f(f64_blend, f64_source)
    _, s_avg = rt.generator.latent_avg()
    s_final = s_avg + rt.fuse_s(s_blend, s_source)
    i_final = rt.generator.resume_from(f_final, s_final, rt.cfg.f_refine_block)
    return i_final, f_final, s_final


class _StageTimer:
    def __init__(self, timings: dict, name: str):
        self.timings, self.name = timings, name

    def __enter__(self):
        self.start = time.perf_counter()

    def __exit__(self, *exc):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + time.perf_counter() - self.start


def transfer(rt: HairFastRuntime, req: TransferRequest) -> tuple[torch.Tensor, StageArtifacts]:
    """Run the requested alignment stages; deterministic given weights."""
    req.validate()
    art = StageArtifacts()
    with torch.no_grad():
        _run_transfer(rt, req, art)
    return art.i_final, art


def _run_transfer(rt: HairFastRuntime, req: TransferRequest, art: StageArtifacts):
    cfg = rt.cfg
    mode = req.mode
    timer = lambda name: _StageTimer(art.timings, name)  # noqa: E731
    has_shape = mode in ("full", "both", "shape_only")
    i_color = {"full": req.color, "both": req.shape, "shape_only": req.face, "color_only": req.color}[mode]

    with timer("embed"):
        m_source = rt.segment(req.face)
        rt.require_face(m_source, "embed")
        h_source = hair_mask(m_source)
        w_face = rt.e4e(req.face)
        f_mix_source, s_source, h_source_edit = mix_fs(rt, req.face, seg=m_source, w=w_face)
        art.put("embed", h_source=h_source, f_mix_source=f_mix_source, s_source=s_source)
        if mode in ("full", "color_only"):
            m_color = rt.segment(i_color)
            _, s_color = rt.fs16(i_color)
        elif mode == "both":
            m_color = None  # filled after the shape pass segments it
            s_color = None
        else:  # shape_only: the face doubles as the color reference
            m_color, s_color = m_source, s_source

    if has_shape:
        with timer("embed"):
            m_shape = rt.segment(req.shape)
            rt.require_face(m_shape, "embed")
            w_shape = rt.e4e(req.shape)
            f_mix_shape, s_shape, h_shape_edit = mix_fs(rt, req.shape, seg=m_shape, w=w_shape)
            art.put("embed", h_shape=hair_mask(m_shape), f_mix_shape=f_mix_shape)
        if mode == "both":
            m_color = m_shape
            s_color = s_shape
        with timer("pose"):
            m_align, h_align, m_rotate = pose_align(rt, req.face, req.shape, w_source=w_face,
                                                    w_shape=w_shape, m_source=m_source)
            art.put("pose", m_align=m_align, h_align=h_align, m_rotate=m_rotate)
            if mode == "full":
                # the color reference needs its own aligned hair mask (its
                # shape carried onto the face) for the embedding regions
                _, h_align_color, _ = pose_align(rt, req.face, req.color, w_source=w_face,
                                                 m_source=m_source)
            elif mode == "both":
                h_align_color = h_align  # same donor image, reuse
            else:  # shape_only keeps the original hair shape for color
                h_align_color = h_source
        with timer("shape"):
            f_inp_source = inpaint_f(rt, req.face, m_source, m_align)
            f_inp_shape = inpaint_f(rt, req.shape, m_shape, m_align)
            h_align_edit = downsample_mask(h_align, rt.f_edit_res)
            f_align = compose_f(f_mix_source, f_mix_shape, f_inp_source, f_inp_shape,
                                h_align_edit, h_source_edit, h_shape_edit)
            art.put("shape", f_inpaint_source=f_inp_source, f_inpaint_shape=f_inp_shape,
                    f_align=f_align)
    else:
        # color_only: hair shape is untouched, features come from mixing alone
        f_align = f_mix_source
        h_align_color = h_source
        art.put("embed", f_align=f_align)

    with timer("color"):
        h_color = hair_mask(m_color)
        s_blend, i_blend, emb_face, emb_hair = color_align(
            rt, f_align, req.face, i_color, s_source, s_color, h_source, h_color, h_align_color
        )
        art.put("color", h_color=h_color, h_align_color=h_align_color, s_blend=s_blend,
                i_blend=i_blend, emb_face=emb_face, emb_hair=emb_hair)

    with timer("refine"):
        i_final, f_final, s_final = refine(rt, i_blend, req.face)
        art.put("refine", i_final=i_final, s_final=s_final)
