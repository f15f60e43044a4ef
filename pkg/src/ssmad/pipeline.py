"""Pyramid fusion, the four-stage decoder, and anomaly scoring.

A ``FeaturePyramid`` holds three channel-first maps at dyadic resolutions,
shallowest first: (C1, H, W), (C2, H/2, W/2), (C3, H/4, W/4).

``hfpn_fuse`` squeezes the pyramid to the deepest scale: the two shallower
maps are stride-2 average-pooled down to H/4 x W/4 (twice and once), the
three are concatenated on channels, and a 1x1 ConvB maps the stack to C3.

``decoder_forward`` reconstructs the pyramid from the fused map.  Stages of
consecutive locality-enhanced modules run in sequence; the outputs of the
last three stages are the reconstruction taps, deepest first, and between
taps a 2x nearest-neighbour upsample followed by a 1x1 ConvB adapts
resolution and channel count to the next shallower scale:

    fused -> stage0 -> stage1 -> up+ConvB -> stage2 -> up+ConvB -> stage3
                       |tap C3,H/4          |tap C2,H/2           |tap C1,H

Training signal and scoring:
  * ``mse_loss``: sum over scales of the mean squared difference.
  * ``anomaly_map``: per scale, one minus the channel-vector cosine at each
    pixel (guarded so two zero vectors agree and one zero vector maximally
    disagrees), bilinearly resized and summed; the image score is the max
    of the summed map after 5x5 Gaussian smoothing (sigma 4, kernel
    truncated and renormalised, borders renormalised by in-bounds mass).
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import numpy as np

from .blocks import (
    DEFAULT_DIRECTIONS,
    BlockConfig,
    ConvBParams,
    HssParams,
    LocalBranchParams,
    LssParams,
    SsmBankParams,
    conv_block,
    init_block_params,
    init_conv_block,
    lss_forward,
)
from .scans import ScanDirection, ScanMethod
from .tensor import Rng, Tensor, bilinear_resize, read_tensor_file, write_tensor_file

__all__ = [
    "FeaturePyramid",
    "DecoderConfig",
    "DecoderParams",
    "AnomalyScoreMap",
    "hfpn_fuse",
    "decoder_forward",
    "mse_loss",
    "anomaly_map",
    "pipeline_forward",
    "init_decoder_params",
    "save_decoder_params",
    "load_decoder_params",
    "ZERO_NORM_EPS",
    "SMOOTH_KERNEL",
    "SMOOTH_SIGMA",
]

ZERO_NORM_EPS = 1e-12
SMOOTH_KERNEL = 5
SMOOTH_SIGMA = 4.0


@dataclass(frozen=True)
class FeaturePyramid:
    """Three maps, shallowest first, halving resolution at each scale."""

    scales: tuple[Tensor, Tensor, Tensor]

    def __post_init__(self) -> None:
        if len(self.scales) != 3:
            raise ValueError("a pyramid has exactly three scales")
        prev = None
        for t in self.scales:
            if t.ndim != 3:
                raise ValueError("each scale must be a (C, H, W) tensor")
            _, h, w = t.shape
            if prev is not None:
                ph, pw = prev
                if (h, w) != (ph // 2, pw // 2) or ph % 2 or pw % 2:
                    raise ValueError(
                        "scales must halve resolution: "
                        f"{(ph, pw)} then {(h, w)}"
                    )
            prev = (h, w)

    @property
    def channels(self) -> tuple[int, int, int]:
        return tuple(t.shape[0] for t in self.scales)  # type: ignore[return-value]

    @property
    def top_resolution(self) -> tuple[int, int]:
        return self.scales[0].shape[1], self.scales[0].shape[2]


@dataclass(frozen=True)
class DecoderConfig:
    """Decoder layout; stage channels derive from the pyramid when None."""

    stage_depths: tuple[int, ...] = (3, 4, 6, 3)
    hss_per_stage: tuple[int, ...] = (3, 2, 3, 3)
    stage_channels: tuple[int, ...] | None = None
    scan_method: ScanMethod = ScanMethod.HILBERT
    directions: tuple[ScanDirection, ...] = DEFAULT_DIRECTIONS
    state_size: int = 4
    expansion: int = 2
    local_kernels: tuple[int, int] = (5, 7)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.stage_depths) != 4 or any(d < 1 for d in self.stage_depths):
            raise ValueError("stage_depths must be four positive counts")
        if len(self.hss_per_stage) != 4 or any(m < 1 for m in self.hss_per_stage):
            raise ValueError("hss_per_stage must be four positive counts")
        if self.stage_channels is not None and len(self.stage_channels) != 4:
            raise ValueError("stage_channels must list four counts when given")

    def resolved_channels(self, pyramid_channels: tuple[int, int, int]) -> tuple[int, ...]:
        c1, c2, c3 = pyramid_channels
        derived = (c3, c3, c2, c1)
        if self.stage_channels is not None and tuple(self.stage_channels) != derived:
            raise ValueError(
                f"stage_channels {self.stage_channels} incompatible with "
                f"pyramid channels {pyramid_channels}; need {derived}"
            )
        return derived


@dataclass(frozen=True)
class DecoderParams:
    """Fuse ConvB, per-stage module parameters, and the two tap adapters."""

    fuse: ConvBParams
    stages: tuple[tuple[LssParams, ...], ...]
    adapters: tuple[ConvBParams, ConvBParams]


@dataclass(frozen=True)
class AnomalyScoreMap:
    """Non-negative per-pixel scores plus the smoothed-max image score."""

    scores: np.ndarray
    image_score: float

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.scores, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError("score map must be two-dimensional")
        if not np.isfinite(arr).all():
            raise ValueError("score map must be finite")
        if (arr < 0).any():
            raise ValueError("score map must be non-negative")
        object.__setattr__(self, "scores", arr)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


# ---------------------------------------------------------------------------
# fusion


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling needs even extents, got {h}x{w}")
    z = x.astype(np.float64).reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return z.astype(np.float32)


def hfpn_fuse(p: FeaturePyramid, fuse: ConvBParams) -> Tensor:
    """Pool the shallow scales to the deepest, concat, 1x1 ConvB to C3."""
    s0, s1, s2 = (t.array for t in p.scales)
    s0 = _avg_pool2(_avg_pool2(s0))
    s1 = _avg_pool2(s1)
    stack = np.concatenate([s0, s1, s2], axis=0)
    if fuse.in_channels != stack.shape[0] or fuse.out_channels != p.channels[2]:
        raise ValueError(
            f"fuse block must map {stack.shape[0]} -> {p.channels[2]} channels"
        )
    return Tensor(conv_block(stack, fuse))


# ---------------------------------------------------------------------------
# decoder


def _upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def init_decoder_params(
    cfg: DecoderConfig, pyramid_channels: tuple[int, int, int]
) -> DecoderParams:
    """All decoder weights from one SplitMix64 stream seeded by cfg.seed."""
    c1, c2, c3 = pyramid_channels
    stage_ch = cfg.resolved_channels(pyramid_channels)
    rng = Rng(cfg.seed)
    fuse = init_conv_block(rng, c1 + c2 + c3, c3, 1)
    stages = []
    for depth, m, ch in zip(cfg.stage_depths, cfg.hss_per_stage, stage_ch):
        block_cfg = BlockConfig(
            channels=ch,
            hss_blocks=m,
            state_size=cfg.state_size,
            expansion=cfg.expansion,
            local_kernels=cfg.local_kernels,
            scan_method=cfg.scan_method,
            directions=cfg.directions,
            seed=cfg.seed,
        )
        stages.append(
            tuple(init_block_params(block_cfg, rng) for _ in range(depth))
        )
    adapters = (
        init_conv_block(rng, c3, c2, 1),
        init_conv_block(rng, c2, c1, 1),
    )
    return DecoderParams(fuse=fuse, stages=tuple(stages), adapters=adapters)


def decoder_forward(
    fused: Tensor,
    cfg: DecoderConfig,
    params: DecoderParams,
    workers: int = 1,
) -> FeaturePyramid:
    """Reconstruct a pyramid whose shapes mirror the encoder's."""
    if fused.ndim != 3:
        raise ValueError("fused input must be (C, H, W)")

    def run_stage(x: Tensor, stage: tuple[LssParams, ...]) -> Tensor:
        for module in stage:
            x = lss_forward(x, module, workers=workers)
        return x

    t = run_stage(fused, params.stages[0])
    t = run_stage(t, params.stages[1])
    deep = t
    t = Tensor(conv_block(_upsample2(t.array), params.adapters[0]))
    t = run_stage(t, params.stages[2])
    mid = t
    t = Tensor(conv_block(_upsample2(t.array), params.adapters[1]))
    t = run_stage(t, params.stages[3])
    shallow = t
    return FeaturePyramid(scales=(shallow, mid, deep))


# ---------------------------------------------------------------------------
# loss and scoring


def mse_loss(target: FeaturePyramid, recon: FeaturePyramid) -> float:
    """Sum over scales of the per-scale mean squared difference (float64)."""
    total = 0.0
    for t, r in zip(target.scales, recon.scales):
        if t.shape != r.shape:
            raise ValueError(f"scale shapes differ: {t.shape} vs {r.shape}")
        diff = t.array.astype(np.float64) - r.array.astype(np.float64)
        total += float(np.mean(diff * diff))
    return total


def _cosine_distance_map(e: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Per-pixel 1 - cos(enc, dec) over channel vectors, with zero guards."""
    e64 = e.astype(np.float64)
    d64 = d.astype(np.float64)
    dot = np.einsum("chw,chw->hw", e64, d64)
    ne = np.sqrt(np.einsum("chw,chw->hw", e64, e64))
    nd = np.sqrt(np.einsum("chw,chw->hw", d64, d64))
    ez = ne < ZERO_NORM_EPS
    dz = nd < ZERO_NORM_EPS
    denom = np.where(ez | dz, 1.0, ne * nd)
    cos = dot / denom
    cos = np.where(ez & dz, 1.0, cos)
    cos = np.where(ez ^ dz, 0.0, cos)
    return np.clip(1.0 - cos, 0.0, None)


def _gaussian_smooth(x: np.ndarray, size: int = SMOOTH_KERNEL, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    """Truncated, renormalised Gaussian; border weights renormalised too."""
    half = size // 2
    g = np.exp(-(np.arange(size) - half) ** 2 / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    kernel /= kernel.sum()
    h, w = x.shape
    num = np.zeros((h, w), dtype=np.float64)
    mass = np.zeros((h, w), dtype=np.float64)
    for dy in range(-half, half + 1):
        ys = slice(max(0, dy), min(h, h + dy))
        yd = slice(max(0, -dy), min(h, h - dy))
        for dx in range(-half, half + 1):
            xs = slice(max(0, dx), min(w, w + dx))
            xd = slice(max(0, -dx), min(w, w - dx))
            wgt = kernel[dy + half, dx + half]
            num[yd, xd] += wgt * x[ys, xs]
            mass[yd, xd] += wgt
    return num / mass


def anomaly_map(
    target: FeaturePyramid,
    recon: FeaturePyramid,
    out_h: int | None = None,
    out_w: int | None = None,
    combine: str = "resize-sum",
) -> AnomalyScoreMap:
    """Sum of per-scale cosine-distance maps at a common resolution.

    combine = "resize-sum" (default) resizes each per-scale map to the
    output resolution before summing; "sum-resize" resizes every map to the
    deepest scale, sums there, and resizes the total once.
    """
    if out_h is None or out_w is None:
        th, tw = target.top_resolution
        out_h = out_h or th
        out_w = out_w or tw
    per_scale = []
    for t, r in zip(target.scales, recon.scales):
        if t.shape != r.shape:
            raise ValueError(f"scale shapes differ: {t.shape} vs {r.shape}")
        per_scale.append(_cosine_distance_map(t.array, r.array))

    if combine == "resize-sum":
        total = np.zeros((out_h, out_w), dtype=np.float64)
        for m in per_scale:
            total += bilinear_resize(Tensor(m.astype(np.float32)), out_h, out_w).array
    elif combine == "sum-resize":
        dh, dw = per_scale[-1].shape
        acc = np.zeros((dh, dw), dtype=np.float64)
        for m in per_scale:
            acc += bilinear_resize(Tensor(m.astype(np.float32)), dh, dw).array
        total = bilinear_resize(Tensor(acc.astype(np.float32)), out_h, out_w).array.astype(np.float64)
    else:
        raise ValueError(f"unknown combine mode {combine!r}")

    total = np.clip(total, 0.0, None)
    smoothed = _gaussian_smooth(total)
    return AnomalyScoreMap(
        scores=total.astype(np.float32), image_score=float(smoothed.max())
    )


def pipeline_forward(
    p: FeaturePyramid,
    cfg: DecoderConfig,
    params: DecoderParams,
    out_h: int | None = None,
    out_w: int | None = None,
    identity_decoder: bool = False,
    combine: str = "resize-sum",
    workers: int = 1,
) -> tuple[float, AnomalyScoreMap]:
    """Fuse, decode (or echo the input when identity_decoder is set, a debug
    mode in which the loss is exactly zero), and score."""
    if identity_decoder:
        recon = p
    else:
        fused = hfpn_fuse(p, params.fuse)
        recon = decoder_forward(fused, cfg, params, workers=workers)
    loss = mse_loss(p, recon)
    amap = anomaly_map(p, recon, out_h=out_h, out_w=out_w, combine=combine)
    return loss, amap


# ---------------------------------------------------------------------------
# parameter serialisation: a directory of MBT tensors plus a JSON manifest


def _flatten_conv_block(prefix: str, p: ConvBParams, out: dict) -> None:
    out[f"{prefix}.weight"] = p.weight
    out[f"{prefix}.bias"] = p.bias
    out[f"{prefix}.norm_scale"] = p.norm_scale
    out[f"{prefix}.norm_shift"] = p.norm_shift


def _flatten_hss(prefix: str, p: HssParams, out: dict) -> None:
    for name in (
        "ln_pre_scale",
        "ln_pre_shift",
        "in_weight",
        "in_bias",
        "gate_weight",
        "gate_bias",
        "dw_weight",
        "dw_bias",
        "ln_post_scale",
        "ln_post_shift",
        "out_weight",
        "out_bias",
    ):
        out[f"{prefix}.{name}"] = getattr(p, name)
    for name in ("a", "b", "c", "delta"):
        out[f"{prefix}.bank.{name}"] = getattr(p.bank, name).astype(np.float32)


def _flatten_local(prefix: str, p: LocalBranchParams, out: dict) -> None:
    _flatten_conv_block(f"{prefix}.pre", p.pre, out)
    out[f"{prefix}.dw_weight"] = p.dw_weight
    out[f"{prefix}.dw_bias"] = p.dw_bias
    _flatten_conv_block(f"{prefix}.post", p.post, out)


def _flatten_lss(prefix: str, p: LssParams, out: dict) -> None:
    for i, hp in enumerate(p.hss):
        _flatten_hss(f"{prefix}.hss{i}", hp, out)
    _flatten_local(f"{prefix}.local5", p.local5, out)
    _flatten_local(f"{prefix}.local7", p.local7, out)
    out[f"{prefix}.fuse_weight"] = p.fuse_weight
    out[f"{prefix}.fuse_bias"] = p.fuse_bias


def _flatten_decoder(params: DecoderParams) -> dict:
    out: dict = {}
    _flatten_conv_block("fuse", params.fuse, out)
    for si, stage in enumerate(params.stages):
        for mi, module in enumerate(stage):
            _flatten_lss(f"stage{si}.lss{mi}", module, out)
    _flatten_conv_block("adapter0", params.adapters[0], out)
    _flatten_conv_block("adapter1", params.adapters[1], out)
    return out


def save_decoder_params(directory, params: DecoderParams) -> None:
    """One MBT file per tensor; manifest.json maps role -> file and shape."""
    os.makedirs(directory, exist_ok=True)
    tensors = _flatten_decoder(params)
    manifest = {"format": "mbt-dir/1", "tensors": {}}
    for name, arr in tensors.items():
        fname = re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".mbt"
        t = Tensor(np.asarray(arr, dtype=np.float32))
        write_tensor_file(os.path.join(directory, fname), t)
        manifest["tensors"][name] = {"file": fname, "shape": list(t.shape)}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_decoder_params(
    directory, cfg: DecoderConfig, pyramid_channels: tuple[int, int, int]
) -> DecoderParams:
    """Rebuild DecoderParams from a saved directory; shapes are validated by
    the dataclass constructors against cfg and the pyramid."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "mbt-dir/1":
        raise ValueError("unrecognised parameter manifest")

    loaded = {}
    for name, entry in manifest["tensors"].items():
        t = read_tensor_file(os.path.join(directory, entry["file"]))
        if list(t.shape) != list(entry["shape"]):
            raise ValueError(f"shape mismatch for {name}")
        loaded[name] = t.array

    def conv(prefix: str) -> ConvBParams:
        return ConvBParams(
            weight=loaded[f"{prefix}.weight"],
            bias=loaded[f"{prefix}.bias"],
            norm_scale=loaded[f"{prefix}.norm_scale"],
            norm_shift=loaded[f"{prefix}.norm_shift"],
        )

    def hss(prefix: str, channels: int) -> HssParams:
        bank = SsmBankParams(
            a=loaded[f"{prefix}.bank.a"].astype(np.float64),
            b=loaded[f"{prefix}.bank.b"].astype(np.float64),
            c=loaded[f"{prefix}.bank.c"].astype(np.float64),
            delta=loaded[f"{prefix}.bank.delta"].astype(np.float64),
        )
        return HssParams(
            channels=channels,
            expansion=cfg.expansion,
            method=cfg.scan_method,
            directions=tuple(cfg.directions),
            ln_pre_scale=loaded[f"{prefix}.ln_pre_scale"],
            ln_pre_shift=loaded[f"{prefix}.ln_pre_shift"],
            in_weight=loaded[f"{prefix}.in_weight"],
            in_bias=loaded[f"{prefix}.in_bias"],
            gate_weight=loaded[f"{prefix}.gate_weight"],
            gate_bias=loaded[f"{prefix}.gate_bias"],
            dw_weight=loaded[f"{prefix}.dw_weight"],
            dw_bias=loaded[f"{prefix}.dw_bias"],
            bank=bank,
            ln_post_scale=loaded[f"{prefix}.ln_post_scale"],
            ln_post_shift=loaded[f"{prefix}.ln_post_shift"],
            out_weight=loaded[f"{prefix}.out_weight"],
            out_bias=loaded[f"{prefix}.out_bias"],
        )

    def local(prefix: str) -> LocalBranchParams:
        return LocalBranchParams(
            pre=conv(f"{prefix}.pre"),
            dw_weight=loaded[f"{prefix}.dw_weight"],
            dw_bias=loaded[f"{prefix}.dw_bias"],
            post=conv(f"{prefix}.post"),
        )

    def lss(prefix: str, channels: int, m: int) -> LssParams:
        return LssParams(
            hss=tuple(hss(f"{prefix}.hss{i}", channels) for i in range(m)),
            local5=local(f"{prefix}.local5"),
            local7=local(f"{prefix}.local7"),
            fuse_weight=loaded[f"{prefix}.fuse_weight"],
            fuse_bias=loaded[f"{prefix}.fuse_bias"],
        )

    stage_ch = cfg.resolved_channels(pyramid_channels)
    stages = tuple(
        tuple(
            lss(f"stage{si}.lss{mi}", stage_ch[si], cfg.hss_per_stage[si])
            for mi in range(cfg.stage_depths[si])
        )
        for si in range(4)
    )
    return DecoderParams(
        fuse=conv("fuse"),
        stages=stages,
        adapters=(conv("adapter0"), conv("adapter1")),
    )
