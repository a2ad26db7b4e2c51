"""Image-to-volume network: 2D lifting U-Net with spectral token blocks,
trough scatter, and a 3D refiner with a tokenized-spline bottleneck.

Layout conventions: 2D feature maps are [C, H, W], 3D maps are
[C, H, X, Y], volumes are [H, X, Y] with H the vertical row axis. One
sample at a time; no batch axis anywhere.

The lift encoder halves the grid once per stage (two 3x3 convs per
stage, instance norm), runs the token blocks on the coarsest grid, and
decodes with kernel-2 transposed convs and attention-gated additive
skips into a K-channel head squashed to (0, 255). The refiner mirrors
the same shape in 3D at one conv per stage (runtime is the binding
constraint at this scale) with a 255*sigmoid(0.5x) head.
"""

from dataclasses import dataclass

import numpy as np

from .attention import AttentionGate, AxialAttention
from .conv import Conv1x1, Conv2d, Conv3d, ConvUp2x, DepthwiseConv2d, \
    DepthwiseConv3d
from .diffops import Op
from .geometry import TroughGeometry, build_mask, build_warp_table, \
    scatter, scatter_vjp
from .kan import KanStack, SplineGrid
from .koopman import KoopmanBlock
from .ops import GroupNorm, InstanceNorm, LayerNorm, ReLU, SiLU, Sigmoid
from . import volio


@dataclass(frozen=True)
class LiftConfig:
    height: int = 32
    width: int = 64
    depth_bins: int = 12
    widths: tuple = (8, 16)
    d_tok: int = 32
    n_token_blocks: int = 2

    def __post_init__(self):
        s = 2 ** len(self.widths)
        if self.height % s or self.width % s:
            raise ValueError(f"extents must divide by {s}")
        if self.depth_bins < 1:
            raise ValueError("need at least one depth bin")
        if not 1 <= self.n_token_blocks <= 4:
            raise ValueError("token block count must be 1..4")


@dataclass(frozen=True)
class RefinerConfig:
    extents: tuple = (32, 64, 64)
    widths: tuple = (8, 16)
    d_bottleneck: int = 32
    n_tok_kan: int = 1
    kan_grid_size: int = 5

    def __post_init__(self):
        s = 2 ** len(self.widths)
        if any(e % s for e in self.extents):
            raise ValueError(f"extents must divide by {s}")
        if self.n_tok_kan not in (1, 2):
            raise ValueError("tok-kan block count must be 1 or 2")


@dataclass
class PipelineOutput:
    F: np.ndarray
    V0: np.ndarray
    V0_masked: np.ndarray
    V: np.ndarray


def _tokens(x):
    """[C, *spatial] -> [T, C] token matrix."""
    return x.reshape(x.shape[0], -1).T


def _untokens(t, shape):
    return t.T.reshape(shape)


class TokenBlock2d(Op):
    """Residual mixer: pointwise conv, depthwise conv, per-token spline
    lift, one contractive spectral step, axial attention, then a
    normalized depthwise tail."""

    def __init__(self, dim: int, rho: float = 0.1, heads: int = 4,
                 rng=None, name: str = "tok"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.proj = Conv1x1(dim, dim, rng=rng, name=f"{name}.proj")
        self.dw1 = DepthwiseConv2d(dim, rng=rng, name=f"{name}.dw1")
        self.kan = KanStack([dim, dim, dim], rng=rng, name=f"{name}.kan")
        self.koop = KoopmanBlock(dim, rho=rho, rng=rng, name=f"{name}.koop")
        self.attn = AxialAttention(dim, heads=heads, rng=rng)
        self.dw2 = DepthwiseConv2d(dim, rng=rng, name=f"{name}.dw2")
        self.norm = GroupNorm(min(8, dim), dim)

    def forward(self, x):
        if x.ndim != 3 or x.shape[0] != self.dim:
            raise ValueError(f"expected [{self.dim},H,W], got {x.shape}")
        y = self.dw1.forward(self.proj.forward(x))
        t = self.koop.forward(self.kan.forward(_tokens(y)))
        y = self.attn.forward(_untokens(t, y.shape))
        y = self.norm.forward(self.dw2.forward(y))
        self.save(x.shape)
        return x + y

    def backward(self, gy):
        (shape,) = self.saved()
        g = self.dw2.backward(self.norm.backward(gy))
        g = self.attn.backward(g)
        g = self.kan.backward(self.koop.backward(_tokens(g)))
        g = self.dw1.backward(_untokens(g, shape))
        return gy + self.proj.backward(g)


class _ConvBlock(Op):
    """conv -> instance norm -> activation, 2D or 3D."""

    def __init__(self, conv, act):
        super().__init__()
        self.conv = conv
        self.norm = InstanceNorm(conv.cout)
        self.act = act

    def forward(self, x):
        return self.act.forward(self.norm.forward(self.conv.forward(x)))

    def backward(self, gy):
        return self.conv.backward(self.norm.backward(self.act.backward(gy)))


class LiftNet(Op):
    """PX image [H, W] -> flat depth field [K, H, W] in (0, 255)."""

    def __init__(self, cfg: LiftConfig = None, rng=None):
        super().__init__()
        cfg = cfg or LiftConfig()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        w1, w2 = cfg.widths
        self.stem = _ConvBlock(Conv2d(1, w1, rng=rng, name="lift.stem"),
                               ReLU())
        self.enc1 = _ConvBlock(Conv2d(w1, w1, rng=rng, name="lift.enc1"),
                               ReLU())
        self.down1 = _ConvBlock(Conv2d(w1, w2, stride=2, rng=rng,
                                       name="lift.down1"), ReLU())
        self.enc2 = _ConvBlock(Conv2d(w2, w2, rng=rng, name="lift.enc2"),
                               ReLU())
        self.down2 = _ConvBlock(Conv2d(w2, cfg.d_tok, stride=2, rng=rng,
                                       name="lift.down2"), ReLU())
        self.blocks = [TokenBlock2d(cfg.d_tok, rng=rng, name=f"lift.tok{i}")
                       for i in range(cfg.n_token_blocks)]
        self.up1 = ConvUp2x(cfg.d_tok, w2, ndim=2, rng=rng, name="lift.up1")
        self.gate1 = AttentionGate(w2, cfg.d_tok, inter=w2, rng=rng,
                                   name="lift.gate1")
        self.dec1 = _ConvBlock(Conv2d(w2, w2, rng=rng, name="lift.dec1"),
                               ReLU())
        self.up2 = ConvUp2x(w2, w1, ndim=2, rng=rng, name="lift.up2")
        self.gate2 = AttentionGate(w1, w2, inter=w1, rng=rng,
                                   name="lift.gate2")
        self.dec2 = _ConvBlock(Conv2d(w1, w1, rng=rng, name="lift.dec2"),
                               ReLU())
        self.head = Conv1x1(w1, cfg.depth_bins, rng=rng, name="lift.head")
        self.squash = Sigmoid()

    def forward(self, px):
        cfg = self.cfg
        if px.shape != (cfg.height, cfg.width):
            raise ValueError(
                f"expected ({cfg.height},{cfg.width}) image, got {px.shape}")
        s1 = self.enc1.forward(self.stem.forward(px[None]))
        s2 = self.enc2.forward(self.down1.forward(s1))
        y = self.down2.forward(s2)
        for blk in self.blocks:
            y = blk.forward(y)
        u = self.up1.forward(y) + self.gate1.forward(s2, y)
        d1 = self.dec1.forward(u)
        u = self.up2.forward(d1) + self.gate2.forward(s1, d1)
        d2 = self.dec2.forward(u)
        return 255.0 * self.squash.forward(self.head.forward(d2))

    def backward(self, gy):
        g = self.head.backward(self.squash.backward(255.0 * gy))
        g = self.dec2.backward(g)
        gs1, gd1 = self.gate2.backward(g)
        gd1 = gd1 + self.up2.backward(g)
        g = self.dec1.backward(gd1)
        gs2, gctx = self.gate1.backward(g)
        g = self.up1.backward(g) + gctx
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        g = self.down2.backward(g)
        g = self.down1.backward(self.enc2.backward(g + gs2))
        g = self.stem.backward(self.enc1.backward(g + gs1))
        return g[0]


class TokKan3d(Op):
    """Bottleneck mixer on [d, A, B, C]: per-token spline layer plus a
    depthwise 3x3x3 conv, residual, token-wise layer norm."""

    def __init__(self, dim: int, grid_size: int = 5, rng=None,
                 name: str = "tokkan"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        grid = SplineGrid(grid_size=grid_size)
        self.kan = KanStack([dim, dim], grid=grid, rng=rng,
                            name=f"{name}.kan")
        self.dw = DepthwiseConv3d(dim, rng=rng, name=f"{name}.dw")
        self.norm = LayerNorm(dim)

    def forward(self, x):
        if x.ndim != 4 or x.shape[0] != self.dim:
            raise ValueError(f"expected [{self.dim},A,B,C], got {x.shape}")
        t = self.kan.forward(_tokens(x))
        y = self.dw.forward(x)
        self.save(x.shape)
        return _untokens(self.norm.forward(_tokens(x) + t + _tokens(y)),
                         x.shape)

    def backward(self, gy):
        (shape,) = self.saved()
        gt = self.norm.backward(_tokens(gy))
        gmap = _untokens(gt, shape)
        gx = gmap + self.dw.backward(gmap)
        gx += _untokens(self.kan.backward(gt), shape)
        return gx


class RefinerNet(Op):
    """Masked seed volume [H, X, Y] -> refined volume, values (0, 255)."""

    def __init__(self, cfg: RefinerConfig = None, rng=None):
        super().__init__()
        cfg = cfg or RefinerConfig()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        w1, w2 = cfg.widths
        d = cfg.d_bottleneck
        self.stem = _ConvBlock(Conv3d(1, w1, rng=rng, name="ref.stem"),
                               SiLU())
        self.down1 = _ConvBlock(Conv3d(w1, w2, stride=2, rng=rng,
                                       name="ref.down1"), SiLU())
        self.down2 = _ConvBlock(Conv3d(w2, d, stride=2, rng=rng,
                                       name="ref.down2"), SiLU())
        self.blocks = [TokKan3d(d, grid_size=cfg.kan_grid_size, rng=rng,
                                name=f"ref.tokkan{i}")
                       for i in range(cfg.n_tok_kan)]
        self.up1 = ConvUp2x(d, w2, ndim=3, rng=rng, name="ref.up1")
        self.gate1 = AttentionGate(w2, d, inter=w2, rng=rng,
                                   name="ref.gate1")
        self.dec1 = _ConvBlock(Conv3d(w2, w2, rng=rng, name="ref.dec1"),
                               SiLU())
        self.up2 = ConvUp2x(w2, w1, ndim=3, rng=rng, name="ref.up2")
        self.gate2 = AttentionGate(w1, w2, inter=w1, rng=rng,
                                   name="ref.gate2")
        self.dec2 = _ConvBlock(Conv3d(w1, w1, rng=rng, name="ref.dec2"),
                               SiLU())
        self.head = Conv1x1(w1, 1, rng=rng, name="ref.head")
        self.squash = Sigmoid()

    def forward(self, v):
        if v.shape != self.cfg.extents:
            raise ValueError(
                f"expected {self.cfg.extents} volume, got {v.shape}")
        s1 = self.stem.forward(v[None])
        s2 = self.down1.forward(s1)
        y = self.down2.forward(s2)
        for blk in self.blocks:
            y = blk.forward(y)
        u = self.up1.forward(y) + self.gate1.forward(s2, y)
        d1 = self.dec1.forward(u)
        u = self.up2.forward(d1) + self.gate2.forward(s1, d1)
        d2 = self.dec2.forward(u)
        return 255.0 * self.squash.forward(0.5 * self.head.forward(d2))[0]

    def backward(self, gy):
        g = self.head.backward(0.5 * self.squash.backward(255.0 * gy[None]))
        g = self.dec2.backward(g)
        gs1, gd1 = self.gate2.backward(g)
        gd1 = gd1 + self.up2.backward(g)
        g = self.dec1.backward(gd1)
        gs2, gctx = self.gate1.backward(g)
        g = self.up1.backward(g) + gctx
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        g = self.down2.backward(g)
        g = self.down1.backward(g + gs2)
        g = self.stem.backward(g + gs1)
        return g[0]


class Pipeline(Op):
    """lift -> trough scatter -> mask -> refine, gradients end to end."""

    def __init__(self, geom: TroughGeometry, lift_cfg: LiftConfig = None,
                 ref_cfg: RefinerConfig = None, rows: int = 32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if lift_cfg is None:
            lift_cfg = LiftConfig(height=rows, width=geom.W,
                                  depth_bins=geom.K)
        if ref_cfg is None:
            ref_cfg = RefinerConfig(
                extents=(lift_cfg.height, geom.nx, geom.ny))
        if lift_cfg.width != geom.W or lift_cfg.depth_bins != geom.K:
            raise ValueError("lift config disagrees with geometry (W, K)")
        if ref_cfg.extents != (lift_cfg.height, geom.nx, geom.ny):
            raise ValueError("refiner extents disagree with geometry")
        self.geom = geom
        self.table = build_warp_table(geom)
        self.mask = build_mask(self.table, lift_cfg.height)
        self.lift = LiftNet(lift_cfg, rng=rng)
        self.refiner = RefinerNet(ref_cfg, rng=rng)

    def forward(self, px) -> PipelineOutput:
        def stage(name, fn, *args):
            try:
                return fn(*args)
            except Exception as e:
                raise RuntimeError(f"{name} stage failed: {e}") from e

        F = stage("lift", self.lift.forward, px)
        V0 = stage("scatter", scatter, F, self.table)
        V0m = self.mask.astype(V0.dtype) * V0
        V = stage("refine", self.refiner.forward, V0m)
        return PipelineOutput(F=F, V0=V0, V0_masked=V0m, V=V)

    def backward(self, gV):
        gV0 = self.mask.astype(gV.dtype) * self.refiner.backward(gV)
        return self.lift.backward(scatter_vjp(gV0, self.table))


def save_model(path, pipeline: Pipeline):
    named = [(f"p{i:04d}", p.data) for i, p in enumerate(pipeline.params())]
    volio.save_checkpoint(path, named)


def load_model(path, pipeline: Pipeline):
    stored = volio.load_checkpoint(path)
    params = pipeline.params()
    if len(stored) != len(params):
        raise ValueError(f"checkpoint has {len(stored)} tensors, "
                         f"model has {len(params)}")
    for i, p in enumerate(params):
        arr = stored[f"p{i:04d}"]
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for tensor {i}: "
                             f"{arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    return pipeline
