"""Neural building blocks: YOLOv7 convolutions, attention gates and Swin.

All blocks consume and produce ``(B, C, H, W)`` feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_EPS = 1e-3
BN_MOMENTUM = 0.03


def autopad(k: int) -> int:
    return k // 2


def batch_norm(c: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(c, eps=BN_EPS, momentum=BN_MOMENTUM)


class CBS(nn.Module):
    """Conv -> BatchNorm -> SiLU with same padding."""

    def __init__(self, c1: int, c2: int, k: int = 1, s: int = 1, act: bool = True):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"CBS kernel must be odd, got {k}")
        if s not in (1, 2):
            raise ValueError(f"CBS stride must be 1 or 2, got {s}")
        self.conv = nn.Conv2d(c1, c2, k, s, autopad(k), bias=False)
        self.bn = batch_norm(c2)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class ELAN(nn.Module):
    """Efficient layer aggregation block.

    Two 1x1 stems, then a chain of ``2 * depth`` 3x3 convolutions on the second
    stem. The backbone variant concatenates every second chain output; the
    ``head`` variant (ELAN-H) concatenates all of them.
    """

    def __init__(self, c1: int, c2: int, mid: int, inner: int | None = None, depth: int = 2, head: bool = False):
        super().__init__()
        inner = inner or mid
        self.head = head
        self.cv1 = CBS(c1, mid, 1)
        self.cv2 = CBS(c1, mid, 1)
        chain = []
        for i in range(2 * depth):
            chain.append(CBS(mid if i == 0 else inner, inner, 3))
        self.chain = nn.ModuleList(chain)
        n_cat = 2 * depth if head else depth
        self.out = CBS(2 * mid + n_cat * inner, c2, 1)

    def forward(self, x):
        y = self.cv2(x)
        outs = [self.cv1(x), y]
        for i, m in enumerate(self.chain):
            y = m(y)
            if self.head or i % 2 == 1:
                outs.append(y)
        return self.out(torch.cat(outs[::-1], 1))


class MPDown(nn.Module):
    """Halve H and W: max-pool branch and strided-conv branch, concatenated."""

    def __init__(self, c1: int, c2: int | None = None):
        super().__init__()
        c2 = c2 or 2 * c1
        if c2 % 2:
            raise ValueError(f"MPDown output channels must be even, got {c2}")
        c_ = c2 // 2
        self.pool = nn.MaxPool2d(2, 2)
        self.cv1 = CBS(c1, c_, 1)
        self.cv2 = CBS(c1, c_, 1)
        self.cv3 = CBS(c_, c_, 3, 2)

    def forward(self, x):
        return torch.cat([self.cv3(self.cv2(x)), self.cv1(self.pool(x))], 1)


class UP(nn.Module):
    """1x1 channel reduction followed by 2x nearest upsampling."""

    def __init__(self, c1: int, c2: int):
        super().__init__()
        self.cv = CBS(c1, c2, 1)

    def forward(self, x):
        return F.interpolate(self.cv(x), scale_factor=2.0, mode="nearest")


class RepConv(nn.Module):
    """3x3 + 1x1 (+ identity BN) branches summed, then SiLU.

    :meth:`fuse` folds all branches into one biased 3x3 convolution.
    """

    def __init__(self, c1: int, c2: int, k: int = 3, s: int = 1):
        super().__init__()
        if k != 3:
            raise ValueError("RepConv supports k=3 only")
        self.c1, self.c2, self.s = c1, c2, s
        self.act = nn.SiLU()
        self.dense = nn.Sequential(nn.Conv2d(c1, c2, 3, s, 1, bias=False), batch_norm(c2))
        self.pointwise = nn.Sequential(nn.Conv2d(c1, c2, 1, s, 0, bias=False), batch_norm(c2))
        self.identity = batch_norm(c2) if c1 == c2 and s == 1 else None
        self.fused: nn.Conv2d | None = None

    def forward(self, x):
        if self.fused is not None:
            return self.act(self.fused(x))
        y = self.dense(x) + self.pointwise(x)
        if self.identity is not None:
            y = y + self.identity(x)
        return self.act(y)

    @staticmethod
    def _fold(kernel, bn: nn.BatchNorm2d):
        std = (bn.running_var + bn.eps).sqrt()
        t = (bn.weight / std).reshape(-1, 1, 1, 1)
        return kernel * t, bn.bias - bn.running_mean * bn.weight / std

    def fused_kernel(self):
        k3, b3 = self._fold(self.dense[0].weight, self.dense[1])
        k1, b1 = self._fold(F.pad(self.pointwise[0].weight, [1, 1, 1, 1]), self.pointwise[1])
        k, b = k3 + k1, b3 + b1
        if self.identity is not None:
            eye = torch.zeros_like(k3)
            eye[torch.arange(self.c1), torch.arange(self.c1), 1, 1] = 1.0
            ki, bi = self._fold(eye, self.identity)
            k, b = k + ki, b + bi
        return k, b

    @torch.no_grad()
    def fuse(self) -> "RepConv":
        k, b = self.fused_kernel()
        conv = nn.Conv2d(self.c1, self.c2, 3, self.s, 1, bias=True).to(k.dtype)
        conv.weight.copy_(k)
        conv.bias.copy_(b)
        self.fused = conv
        del self.dense, self.pointwise, self.identity
        self.identity = None
        return self


class SPPCSPC(nn.Module):
    """Spatial pyramid pooling (kernels 5/9/13) inside a cross-stage-partial wrapper."""

    def __init__(self, c1: int, c2: int, e: float = 0.5, k=(5, 9, 13)):
        super().__init__()
        c_ = int(2 * c2 * e)
        self.cv1 = CBS(c1, c_, 1)
        self.cv2 = CBS(c1, c_, 1)
        self.cv3 = CBS(c_, c_, 3)
        self.cv4 = CBS(c_, c_, 1)
        self.pools = nn.ModuleList(nn.MaxPool2d(kk, 1, kk // 2) for kk in k)
        self.cv5 = CBS(c_ * (len(k) + 1), c_, 1)
        self.cv6 = CBS(c_, c_, 3)
        self.cv7 = CBS(2 * c_, c2, 1)

    def forward(self, x):
        x1 = self.cv4(self.cv3(self.cv1(x)))
        y1 = self.cv6(self.cv5(torch.cat([x1, *(p(x1) for p in self.pools)], 1)))
        return self.cv7(torch.cat([y1, self.cv2(x)], 1))


# ------------------------------------------------------------------ attention


@dataclass(frozen=True)
class AttentionConfig:
    kind: str = "GAM"
    reduction: int = 4

    def __post_init__(self):
        if self.kind not in ("GAM", "CBAM"):
            raise ValueError(f"attention kind must be GAM or CBAM, got {self.kind!r}")


def _check_reduction(c: int, r: int):
    if r < 1 or c % r:
        raise ValueError(f"reduction {r} does not divide channel count {c}")


class GAM(nn.Module):
    """Global attention: permuted channel MLP gate, then 7x7 conv spatial gate."""

    def __init__(self, c: int, reduction: int = 4):
        super().__init__()
        _check_reduction(c, reduction)
        hidden = c // reduction
        self.channel_mlp = nn.Sequential(nn.Linear(c, hidden), nn.ReLU(), nn.Linear(hidden, c))
        self.spatial = nn.Sequential(
            nn.Conv2d(c, hidden, 7, padding=3),
            batch_norm(hidden),
            nn.ReLU(),
            nn.Conv2d(hidden, c, 7, padding=3),
            batch_norm(c),
        )
        self.gate = nn.Sigmoid()

    def forward(self, x):
        att = self.channel_mlp(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        x = x * self.gate(att)
        return x * self.gate(self.spatial(x))

    @torch.no_grad()
    def open_gates(self, bias: float = 1e4):
        """Force both gates to 1 (pass-through) by saturating the last biases."""
        last = self.channel_mlp[-1]
        last.weight.zero_()
        last.bias.fill_(bias)
        bn = self.spatial[-1]
        bn.weight.zero_()
        bn.bias.fill_(bias)


class CBAM(nn.Module):
    """Channel gate from avg/max pooled MLP, then 7x7 spatial gate."""

    def __init__(self, c: int, reduction: int = 4, kernel: int = 7):
        super().__init__()
        _check_reduction(c, reduction)
        hidden = c // reduction
        self.mlp = nn.Sequential(nn.Conv2d(c, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, c, 1))
        self.spatial = nn.Conv2d(2, 1, kernel, padding=kernel // 2)
        self.gate = nn.Sigmoid()

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        x = x * self.gate(avg + mx)
        pooled = torch.cat([x.mean(1, keepdim=True), x.amax(1, keepdim=True)], 1)
        return x * self.gate(self.spatial(pooled))

    @torch.no_grad()
    def open_gates(self, bias: float = 1e4):
        self.mlp[-1].weight.zero_()
        self.mlp[-1].bias.fill_(bias / 2)
        self.spatial.weight.zero_()
        self.spatial.bias.fill_(bias)


def attention_block(c: int, cfg: AttentionConfig) -> nn.Module:
    return GAM(c, cfg.reduction) if cfg.kind == "GAM" else CBAM(c, cfg.reduction)


# ----------------------------------------------------------------------- Swin


@dataclass(frozen=True)
class SwinConfig:
    """Swin block settings. Each spatial position of the incoming CNN
    feature map is one token, so there is no patch embedding here."""

    window_size: int = 7
    num_heads: int = 4
    head_dim: int = 32
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = True
    qkv_bias: bool = True

    @property
    def embed_dim(self) -> int:
        return self.num_heads * self.head_dim


def window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, w*w, C)."""
    b, h, wd, c = x.shape
    x = x.view(b, h // w, w, wd // w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, c)


def window_reverse(windows: torch.Tensor, w: int, h: int, wd: int) -> torch.Tensor:
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // w) * (wd // w))
    x = windows.view(b, h // w, wd // w, w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, wd, c)


class WindowAttention(nn.Module):
    """Multi-head self-attention within one window, optional relative position bias."""

    def __init__(self, dim: int, cfg: SwinConfig):
        super().__init__()
        self.cfg = cfg
        self.num_heads = cfg.num_heads
        self.scale = cfg.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim, bias=cfg.qkv_bias)
        self.proj = nn.Linear(dim, dim)
        w = cfg.window_size
        if cfg.rel_pos_bias:
            self.rel_bias_table = nn.Parameter(torch.zeros((2 * w - 1) ** 2, cfg.num_heads))
            nn.init.trunc_normal_(self.rel_bias_table, std=0.02)
            coords = torch.stack(torch.meshgrid(torch.arange(w), torch.arange(w), indexing="ij")).flatten(1)
            rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (w - 1)
            self.register_buffer("rel_index", rel[..., 0] * (2 * w - 1) + rel[..., 1], persistent=False)
        else:
            self.rel_bias_table = None

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``x``: (B_, N, C); ``mask``: (nW, N, N) bool, True where attention is blocked."""
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        if self.rel_bias_table is not None:
            bias = self.rel_bias_table[self.rel_index[:n, :n].reshape(-1)].view(n, n, -1)
            attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.num_heads, n, n)
            attn = attn.masked_fill(mask[None, :, None], float("-inf")).view(b, self.num_heads, n, n)
        attn = attn.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Pre-norm (shifted-)window MSA and SiLU MLP, each with a residual.

    The map is zero-padded bottom/right to window multiples and cropped back;
    padded tokens are masked out as keys.
    """

    def __init__(self, dim: int, cfg: SwinConfig, shift: bool = False):
        super().__init__()
        if dim != cfg.embed_dim:
            raise ValueError(
                f"Swin block dim {dim} != num_heads * head_dim = {cfg.num_heads} * {cfg.head_dim}"
            )
        self.cfg = cfg
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, cfg)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.SiLU(), nn.Linear(hidden, dim))

    def shift_size(self, hp: int, wp: int) -> int:
        w = self.cfg.window_size
        # a single window has nothing to exchange with
        if not self.shift or (hp <= w and wp <= w):
            return 0
        return w // 2

    def attention_mask(self, h: int, wd: int, device=None) -> torch.Tensor | None:
        """Blocked-pair mask of shape (nW, N, N) for an ``h`` x ``wd`` map, or None."""
        w = self.cfg.window_size
        hp, wp = h + (-h % w), wd + (-wd % w)
        s = self.shift_size(hp, wp)
        if s == 0 and hp == h and wp == wd:
            return None
        region = torch.zeros(hp, wp, dtype=torch.long, device=device)
        if s:
            cnt = 0
            for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
                for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
                    region[hs, ws] = cnt
                    cnt += 1
        pad = torch.zeros(hp, wp, dtype=torch.bool, device=device)
        pad[h:, :] = True
        pad[:, wd:] = True
        if s:
            pad = torch.roll(pad, (-s, -s), (0, 1))
        region = window_partition(region[None, :, :, None], w).squeeze(-1)
        pad = window_partition(pad[None, :, :, None], w).squeeze(-1)
        blocked = (region[:, :, None] != region[:, None, :]) | pad[:, None, :]
        eye = torch.eye(w * w, dtype=torch.bool, device=device)
        return blocked & ~eye

    def forward(self, x):
        b, c, h, wd = x.shape
        w = self.cfg.window_size
        tokens = x.permute(0, 2, 3, 1)
        y = self.norm1(tokens)
        pad_b, pad_r = -h % w, -wd % w
        if pad_b or pad_r:
            y = F.pad(y, (0, 0, 0, pad_r, 0, pad_b))
        hp, wp = h + pad_b, wd + pad_r
        s = self.shift_size(hp, wp)
        if s:
            y = torch.roll(y, (-s, -s), (1, 2))
        mask = self.attention_mask(h, wd, x.device)
        y = self.attn(window_partition(y, w), mask)
        y = window_reverse(y, w, hp, wp)
        if s:
            y = torch.roll(y, (s, s), (1, 2))
        tokens = tokens + y[:, :h, :wd]
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.permute(0, 3, 1, 2).contiguous()


class PatchMerge(nn.Module):
    """Concatenate each 2x2 neighbourhood (4C) and project to 2C."""

    def __init__(self, c: int, norm: bool = True):
        super().__init__()
        self.norm = nn.LayerNorm(4 * c) if norm else nn.Identity()
        self.reduction = nn.Linear(4 * c, 2 * c, bias=False)

    @staticmethod
    def gather(x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, H/2, W/2, 4C) neighbourhood stack."""
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"patch merging needs even H and W, got {h}x{w}")
        t = x.permute(0, 2, 3, 1)
        return torch.cat([t[:, 0::2, 0::2], t[:, 1::2, 0::2], t[:, 0::2, 1::2], t[:, 1::2, 1::2]], -1)

    def forward(self, x):
        return self.reduction(self.norm(self.gather(x))).permute(0, 3, 1, 2).contiguous()


class SWCSP(nn.Module):
    """Swin blocks inside a cross-stage-partial wrapper.

    One 1x1 projection feeds ``depth`` Swin blocks (shift alternating off/on)
    at the Swin embedding width; a second 1x1 projection (``c2 // 2``
    channels) bypasses them. The two are concatenated and fused by a 1x1 CBS.
    This internal layout is a reconstruction; only the name and the Swin
    settings are fixed by the source design.
    """

    def __init__(self, c1: int, c2: int, cfg: SwinConfig = SwinConfig(), depth: int = 2):
        super().__init__()
        dim = cfg.embed_dim
        self.c_pass = c2 // 2
        self.cv_pass = CBS(c1, self.c_pass, 1)
        self.cv_swin = CBS(c1, dim, 1)
        self.blocks = nn.Sequential(*(SwinBlock(dim, cfg, shift=bool(i % 2)) for i in range(depth)))
        self.fuse = CBS(self.c_pass + dim, c2, 1)

    def forward(self, x):
        return self.fuse(torch.cat([self.cv_pass(x), self.blocks(self.cv_swin(x))], 1))
