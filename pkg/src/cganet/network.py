"""The CGA U-Net: block layout, static shape inference and the trainable model.

The layout follows a reference block table. Two of its rows are
inconsistent with the shape algebra and are fixed here:

* DeBlock3 is a residual block applied to DeUp3's output, so its size is
  ``64 x 32^3`` rather than ``16 x 128^3``.
* DeUp1 concatenates the EnBlock1 output (the only ``16 x 128^3`` skip),
  not EnBlock2.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import functional as F
from .autodiff import Variable
from .nn import Conv3d, ConvTranspose3d, Dropout, Module, ResBlock
from .sam import SAMConfig, SAMOutput, apply_sam


class SpecError(ValueError):
    """Raised when a NetworkSpec is internally inconsistent."""


class BlockRow(NamedTuple):
    group: str
    name: str
    details: str
    repeat: int


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 4
    n_classes: int = 4
    widths: tuple[int, ...] = (16, 32, 64, 128)
    enc_repeats: tuple[int, ...] = (1, 2, 2, 4)
    dec_repeats: tuple[int, ...] = (1, 1, 1)
    att_channels: tuple[int, ...] = (16, 16)
    dropout: float = 0.2
    attention_path: bool = True
    # Initial softmax mass on the background channel. With a foreground-only
    # Dice loss nothing else anchors background, and a uniform start lets one
    # foreground class absorb it with a vanishing gradient.
    background_prior: float | None = 0.85

    @property
    def att_rate(self) -> int:
        return 2 ** (len(self.att_channels) + 1)

    def scaled(self, divisor: int) -> "NetworkSpec":
        """Same topology with every hidden width divided by ``divisor``."""
        return replace(
            self,
            widths=tuple(max(1, w // divisor) for w in self.widths),
            att_channels=tuple(max(1, c // divisor) for c in self.att_channels),
        )

    def rows(self) -> list[BlockRow]:
        res = "BN, ReLU, Conv3, BN, ReLU, Conv3, +"
        rows = [BlockRow("Input", "Input", "-", 0), BlockRow("Encoder", "InitConv", "Conv3, Dropout", 1)]
        for lvl in range(len(self.widths)):
            if lvl > 0:
                rows.append(BlockRow("Encoder", f"EnDown{lvl}", "Conv3 (stride 2)", 1))
            rows.append(BlockRow("Encoder", f"EnBlock{lvl + 1}", res, self.enc_repeats[lvl]))
        for lvl in range(len(self.widths) - 1, 0, -1):
            rows.append(BlockRow("Decoder", f"DeUp{lvl}", f"Conv3, ConvT, EnBlock{lvl}(Concate), Conv3", 1))
            rows.append(BlockRow("Decoder", f"DeBlock{lvl}", res, self.dec_repeats[lvl - 1]))
        rows.append(BlockRow("Decoder", "EndConv", "Conv1", 1))
        rows.append(BlockRow("Decoder", "Softmax", "Softmax", 1))
        if self.attention_path:
            for i in range(len(self.att_channels) + 1):
                rows.append(BlockRow("Attention Conv Path", f"AttConv{i + 1}", "Conv3 (stride 2)", 1))
        return rows

    def validate(self) -> None:
        problems = []
        L = len(self.widths)
        if L < 2:
            problems.append("widths: need at least two levels")
        if len(self.enc_repeats) != L:
            problems.append(f"enc_repeats: {len(self.enc_repeats)} entries for {L} levels")
        if len(self.dec_repeats) != L - 1:
            problems.append(f"dec_repeats: {len(self.dec_repeats)} entries for {L - 1} decoder levels")
        for i, w in enumerate(self.widths):
            if w < 1:
                problems.append(f"EnBlock{i + 1}: width {w} must be positive")
        if any(r < 1 for r in self.enc_repeats) or any(r < 1 for r in self.dec_repeats):
            problems.append("repeat counts must be >= 1")
        if self.attention_path and 2 ** len(self.widths[1:]) != self.att_rate:
            problems.append(
                f"AttConv{len(self.att_channels) + 1}: attention rate {self.att_rate} does not match "
                f"bottleneck rate {2 ** (L - 1)}"
            )
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"InitConv: dropout {self.dropout} outside [0, 1)")
        if self.background_prior is not None and not 0.0 < self.background_prior < 1.0:
            problems.append(f"EndConv: background_prior {self.background_prior} outside (0, 1)")
        if problems:
            raise SpecError("inconsistent network spec: " + "; ".join(problems))


def infer_shapes(spec: NetworkSpec, input_shape: tuple[int, int, int, int]) -> dict[str, tuple[int, ...]]:
    """Per-row output size ``(C, D, H, W)`` without allocating any tensor."""
    spec.validate()
    c, *sp = input_shape
    if c != spec.in_channels:
        raise SpecError(f"Input: {c} channels, spec expects {spec.in_channels}")
    factor = 2 ** (len(spec.widths) - 1)
    if any(s % factor for s in sp):
        raise SpecError(f"Input: spatial extents {tuple(sp)} not divisible by {factor}")

    def down(s):
        return tuple((n + 2 - 3) // 2 + 1 for n in s)

    shapes: dict[str, tuple[int, ...]] = {"Input": (c, *sp)}
    cur = tuple(sp)
    shapes["InitConv"] = (spec.widths[0], *cur)
    level_sp = [cur]
    shapes["EnBlock1"] = shapes["InitConv"]
    for lvl in range(1, len(spec.widths)):
        cur = down(cur)
        level_sp.append(cur)
        shapes[f"EnDown{lvl}"] = (spec.widths[lvl], *cur)
        shapes[f"EnBlock{lvl + 1}"] = shapes[f"EnDown{lvl}"]
    for lvl in range(len(spec.widths) - 1, 0, -1):
        shapes[f"DeUp{lvl}"] = (spec.widths[lvl - 1], *level_sp[lvl - 1])
        shapes[f"DeBlock{lvl}"] = shapes[f"DeUp{lvl}"]
    shapes["EndConv"] = (spec.n_classes, *level_sp[0])
    shapes["Softmax"] = shapes["EndConv"]
    if spec.attention_path:
        a = tuple(sp)
        chans = list(spec.att_channels) + [spec.n_classes]
        for i, ch in enumerate(chans):
            a = down(a)
            shapes[f"AttConv{i + 1}"] = (ch, *a)
    return shapes


# Reference output sizes with the two fixes from the module docstring
# applied (DeBlock3 size; DeUp1 skip source).
ARCHITECTURE_SIZES: dict[str, tuple[int, ...]] = {
    "Input": (4, 128, 128, 128),
    "InitConv": (16, 128, 128, 128),
    "EnBlock1": (16, 128, 128, 128),
    "EnDown1": (32, 64, 64, 64),
    "EnBlock2": (32, 64, 64, 64),
    "EnDown2": (64, 32, 32, 32),
    "EnBlock3": (64, 32, 32, 32),
    "EnDown3": (128, 16, 16, 16),
    "EnBlock4": (128, 16, 16, 16),
    "DeUp3": (64, 32, 32, 32),
    "DeBlock3": (64, 32, 32, 32),
    "DeUp2": (32, 64, 64, 64),
    "DeBlock2": (32, 64, 64, 64),
    "DeUp1": (16, 128, 128, 128),
    "DeBlock1": (16, 128, 128, 128),
    "EndConv": (4, 128, 128, 128),
    "Softmax": (4, 128, 128, 128),
    "AttConv1": (16, 64, 64, 64),
    "AttConv2": (16, 32, 32, 32),
    "AttConv3": (4, 16, 16, 16),
}


class DeUp(Module):
    """Conv3 to the lower width, ConvT up, concatenate the skip, Conv3 back to width."""

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        self.reduce = Conv3d(c_in, c_out, 3, rng=rng, dtype=dtype, gain=1.0)
        self.up = ConvTranspose3d(c_out, c_out, 2, 2, rng=rng, dtype=dtype, gain=1.0)
        self.fuse = Conv3d(2 * c_out, c_out, 3, rng=rng, dtype=dtype, gain=1.0)

    def __call__(self, x: Variable, skip: Variable) -> Variable:
        h = self.up(self.reduce(x))
        return self.fuse(F.concat([h, skip], axis=1))


class AttentionPath(Module):
    """Stride-2 Conv3 chain from the raw input to a per-class attention map."""

    def __init__(self, spec: NetworkSpec, rng, dtype, softmax: bool = True):
        chans = [spec.in_channels] + list(spec.att_channels) + [spec.n_classes]
        self.convs = [Conv3d(a, b, 3, stride=2, rng=rng, dtype=dtype, gain=1.0 if i == 0 else np.sqrt(2.0))
                      for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]
        self.rate = 2 ** len(self.convs)
        self.softmax = softmax

    def __call__(self, x: Variable) -> Variable:
        if any(s % self.rate for s in x.shape[2:]):
            raise ValueError(f"attention path: input extents {x.shape[2:]} not divisible by {self.rate}")
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.relu(h)
        return F.softmax(h, axis=1) if self.softmax else h


@dataclass
class ForwardResult:
    probs: Variable
    logits: Variable
    sam: SAMOutput | None = None
    bottleneck: Variable | None = None


class CGAUNet(Module):
    def __init__(self, spec: NetworkSpec, sam: SAMConfig | None = None, seed: int = 0, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self._sam_cfg = sam if sam is not None else SAMConfig()
        if not self._sam_cfg.enabled:
            spec = replace(spec, attention_path=False)
        self._seed = seed
        rng = np.random.default_rng(seed)
        w = spec.widths
        # Convs whose input is not a ReLU output use unit gain so activations keep their scale.
        self.init_conv = Conv3d(spec.in_channels, w[0], 3, rng=rng, dtype=dtype, gain=1.0)
        self.init_drop = Dropout(spec.dropout, np.random.default_rng([seed, 1]))
        self.enc_blocks = []
        self.downs = []
        for lvl, width in enumerate(w):
            if lvl > 0:
                self.downs.append(Conv3d(w[lvl - 1], width, 3, stride=2, rng=rng, dtype=dtype, gain=1.0))
            self.enc_blocks.append([ResBlock(width, rng, dtype) for _ in range(spec.enc_repeats[lvl])])
        self.ups = []
        self.dec_blocks = []
        for lvl in range(len(w) - 1, 0, -1):
            self.ups.append(DeUp(w[lvl], w[lvl - 1], rng, dtype))
            self.dec_blocks.append([ResBlock(w[lvl - 1], rng, dtype) for _ in range(spec.dec_repeats[lvl - 1])])
        self.end_conv = Conv3d(w[0], spec.n_classes, 1, rng=rng, dtype=dtype, gain=1.0)
        if spec.background_prior is not None:
            rest = (1.0 - spec.background_prior) / (spec.n_classes - 1)
            self.end_conv.bias.value[:] = np.log(rest)
            self.end_conv.bias.value[0] = np.log(spec.background_prior)
        self.att_path = (
            AttentionPath(spec, rng, dtype, self._sam_cfg.attention_softmax) if self._sam_cfg.enabled else None
        )

    @property
    def sam_config(self) -> SAMConfig:
        return self._sam_cfg

    def named_parameters(self, prefix: str = "") -> dict[str, Variable]:
        out: dict[str, Variable] = {}
        out.update(self.init_conv.named_parameters(prefix + "init_conv."))
        for lvl, blocks in enumerate(self.enc_blocks):
            if lvl > 0:
                out.update(self.downs[lvl - 1].named_parameters(f"{prefix}en_down{lvl}."))
            for r, b in enumerate(blocks):
                out.update(b.named_parameters(f"{prefix}en_block{lvl + 1}.{r}."))
        for i, (up, blocks) in enumerate(zip(self.ups, self.dec_blocks)):
            lvl = len(self.ups) - i
            out.update(up.named_parameters(f"{prefix}de_up{lvl}."))
            for r, b in enumerate(blocks):
                out.update(b.named_parameters(f"{prefix}de_block{lvl}.{r}."))
        out.update(self.end_conv.named_parameters(prefix + "end_conv."))
        if self.att_path is not None:
            out.update(self.att_path.named_parameters(prefix + "att_path."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for lvl, blocks in enumerate(self.enc_blocks):
            for r, b in enumerate(blocks):
                out.update(b.named_buffers(f"{prefix}en_block{lvl + 1}.{r}."))
        for i, blocks in enumerate(self.dec_blocks):
            lvl = len(self.ups) - i
            for r, b in enumerate(blocks):
                out.update(b.named_buffers(f"{prefix}de_block{lvl}.{r}."))
        return out

    def modules(self):
        yield self
        yield from self.init_conv.modules()
        yield from self.init_drop.modules()
        for blocks in self.enc_blocks + self.dec_blocks:
            for b in blocks:
                yield from b.modules()
        for m in self.downs + self.ups:
            yield from m.modules()
        yield from self.end_conv.modules()
        if self.att_path is not None:
            yield from self.att_path.modules()

    def reseed_dropout(self, seed) -> None:
        self.init_drop._rng = np.random.default_rng(seed)

    def __call__(self, x) -> ForwardResult:
        x = x if isinstance(x, Variable) else Variable(np.asarray(x))
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"model expects {self.spec.in_channels} input channels, got {x.shape[1]}")
        h = self.init_drop(self.init_conv(x))
        skips = []
        for lvl, blocks in enumerate(self.enc_blocks):
            if lvl > 0:
                h = self.downs[lvl - 1](h)
            for b in blocks:
                h = b(h)
            skips.append(h)
        bottleneck = h
        sam_out = None
        if self.att_path is not None:
            S = self.att_path(x)
            sam_out = apply_sam(h, S, self._sam_cfg)
            h = sam_out.features_after
        for i, (up, blocks) in enumerate(zip(self.ups, self.dec_blocks)):
            skip = skips[len(skips) - 2 - i]
            h = up(h, skip)
            for b in blocks:
                h = b(h)
        logits = self.end_conv(h)
        probs = F.softmax(logits, axis=1)
        return ForwardResult(probs, logits, sam_out, bottleneck)


def build_cga_unet(spec: NetworkSpec | None = None, seed: int = 0, sam: SAMConfig | None = None,
                   dtype=np.float32) -> CGAUNet:
    """Construct the network with deterministic He-normal initialization."""
    return CGAUNet(spec if spec is not None else NetworkSpec(), sam, seed, dtype)
