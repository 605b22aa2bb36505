"""The occupancy network: image/LiDAR tokenizers, cross-attention BEV transforms,
BEV context lifting, coarse heads and grid-sampled fine predictions.

Nothing in this module accepts a camera model or an extrinsic matrix.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import GridSpec, grid_sample, interpolation_matrix, normalize_lidar_rows, positional_encoding
from .nn import AttentionBlock, Conv2d, Linear, MLP, Module, parameter
from .tensor import ConfigError, Tensor

MODES = ("camera_only", "lidar_only", "fused")


@dataclass
class ModelConfig:
    n_cameras: int = 2
    image_size: tuple = (32, 64)
    enc_channels: tuple = (16, 32, 64)
    enc_strides: tuple = (2, 2, 2)
    c_t: int = 32
    heads: int = 4
    cst_layers: int = 2
    bev_size: tuple = (16, 16)
    bev_cell: float = 1.6
    c_coarse: int = 16
    d_coarse: int = 4
    context_dilations: tuple = (1, 2)
    classes: int = 4
    n_lidar: int = 512
    lidar_pe: int = 96
    # sensor-frame range box used to normalise LiDAR rows (a constant, not a calibration)
    lidar_box: tuple = ((-12.8, -12.8, -2.4), (12.8, 12.8, 5.6))
    head_hidden: int = 32
    decoder_channels: tuple = (32, 16, 16)
    mode: str = "fused"

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.bev_size = tuple(self.bev_size)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.c_t % self.heads:
            raise ConfigError(f"c_t={self.c_t} not divisible by heads={self.heads}")
        if self.c_t % 4:
            raise ConfigError(f"c_t={self.c_t} must be divisible by 4 for 2-D position codes")
        if self.lidar_pe % 12:
            raise ConfigError(f"lidar_pe={self.lidar_pe} must be divisible by 12")
        if len(self.enc_channels) != len(self.enc_strides):
            raise ConfigError("enc_channels and enc_strides differ in length")

    @property
    def c_context(self):
        return self.c_coarse * self.d_coarse

    @property
    def n_bev(self):
        return self.bev_size[0] * self.bev_size[1]

    @property
    def feature_size(self):
        h, w = self.image_size
        for s in self.enc_strides:
            h = (h + 2 - 3) // s + 1
            w = (w + 2 - 3) // s + 1
        return h, w

    def lidar_spec(self):
        lo, hi = np.asarray(self.lidar_box[0]), np.asarray(self.lidar_box[1])
        return GridSpec(tuple(lo), (0.4, 0.4, 0.4), tuple(np.round((hi - lo) / 0.4).astype(int)))


@dataclass
class ForwardInputs:
    """Everything the network consumes. Deliberately no calibration field."""

    images: np.ndarray          # (N, 3, H, W)
    lidar: np.ndarray | None    # (N_lidar, 6) raw voxel rows in the sensor frame
    queries: np.ndarray         # (Nq, 3) in [-1, 1]^3
    mode: str = "fused"


@dataclass
class OccupancyPrediction:
    coarse_sem: Tensor
    coarse_geo: Tensor
    coarse_rgb: Tensor
    fine_sem: Tensor
    fine_geo: Tensor
    fine_rgb: Tensor
    bev: Tensor
    image_features: Tensor | None = None
    aux2d: dict = field(default_factory=dict)


def bev_points(cfg):
    """BEV cell centres in normalised [-1, 1]^2, row-major over (H_bev, W_bev)."""
    h, w = cfg.bev_size
    ys = np.linspace(-1, 1, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1, 1, w) if w > 1 else np.zeros(1)
    g = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1)
    return g.reshape(-1, 2)


def split_channels(x, c_coarse, d_coarse):
    """(C_coarse*D_coarse, H, W) -> (C_coarse, H, W, D_coarse)."""
    _, h, w = x.shape
    return T.transpose(T.reshape(x, (c_coarse, d_coarse, h, w)), (0, 2, 3, 1))


def unsplit_channels(v):
    c, h, w, d = v.shape
    return T.reshape(T.transpose(v, (0, 3, 1, 2)), (c * d, h, w))


def geometry_from_semantics(sem_logits):
    """[free logit, logsumexp of the occupied logits] along the last axis."""
    free = sem_logits[..., 0:1]
    occ = T.logsumexp(sem_logits[..., 1:], axis=-1, keepdims=True)
    return T.concat([free, occ], axis=-1)


class ImageEncoder(Module):
    def __init__(self, cfg, rng):
        self.stages = []
        cin = 3
        for cout, s in zip(cfg.enc_channels, cfg.enc_strides):
            self.stages.append(Conv2d(cin, cout, 3, rng, stride=s))
            self.stages.append(Conv2d(cout, cout, 3, rng))
            cin = cout

    def forward(self, x):
        for conv in self.stages:
            x = T.gelu(conv(x))
        return x


class SpatialAttentionGate(Module):
    """sigmoid(conv([mean_c, max_c])) multiplied onto the features."""

    def __init__(self, rng):
        self.conv = Conv2d(2, 1, 3, rng)

    def gate(self, f):
        stats = T.concat([T.mean(f, axis=1, keepdims=True), T.max_(f, axis=1, keepdims=True)], axis=1)
        return T.sigmoid(self.conv(stats))

    def forward(self, f):
        return f * self.gate(f)


class ContextBlock(Module):
    """Residual block: 1x1 shortcut plus two 3x3 convs, the second dilated."""

    def __init__(self, cin, cout, dilation, rng):
        self.shortcut = Conv2d(cin, cout, 1, rng)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng, dilation=dilation)

    def forward(self, x):
        s = self.shortcut(x)
        y = T.gelu(self.conv1(x))
        y = T.gelu(self.conv2(y))
        return s + y


class CST(Module):
    """Calibration-free spatial transformation: stacked cross-attention blocks."""

    def __init__(self, c, heads, layers, rng):
        self.blocks = [AttentionBlock(c, heads, rng) for _ in range(layers)]

    def forward(self, queries, tokens):
        x = queries
        for blk in self.blocks:
            x = blk(x, tokens)
        return x


class AuxDecoder(Module):
    """Upsampling conv decoder from the deepest image features to input resolution."""

    def __init__(self, cfg, rng):
        cin = cfg.enc_channels[-1]
        self.convs = []
        for cout in cfg.decoder_channels:
            self.convs.append(Conv2d(cin, cout, 3, rng))
            cin = cout
        self.sem = Conv2d(cin, cfg.classes, 1, rng)
        self.depth = Conv2d(cin, 1, 1, rng)
        self.rgb = Conv2d(cin, 3, 1, rng)

    def forward(self, f):
        x = f
        for conv in self.convs:
            x = T.gelu(conv(T.upsample2x(x)))
        return self.sem(x), T.softplus(self.depth(x)), T.sigmoid(self.rgb(x))


class REOModel(Module):
    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        if 2 ** len(cfg.decoder_channels) != int(np.prod(cfg.enc_strides)):
            raise ConfigError("decoder upsampling must undo the encoder stride")
        self.encoder = ImageEncoder(cfg, rng)
        c_f = cfg.enc_channels[-1]
        self.sam = SpatialAttentionGate(rng)
        self.self_attn = AttentionBlock(c_f, cfg.heads, rng, cross=False)
        self.cam_proj = Linear(c_f, cfg.c_t, rng)
        self.cam_embed = parameter(rng.normal(0, 0.02, (cfg.n_cameras, cfg.c_t)))
        self.lidar_proj = Linear(cfg.lidar_pe, cfg.c_t, rng)
        self.bev_embed = parameter(rng.normal(0, 0.02, (cfg.n_bev, cfg.c_t)))
        self.cst_camera = CST(cfg.c_t, cfg.heads, cfg.cst_layers, rng)
        self.cst_lidar = CST(cfg.c_t, cfg.heads, cfg.cst_layers, rng)
        self.context = []
        cin = cfg.c_t
        for dil in cfg.context_dilations:
            self.context.append(ContextBlock(cin, cfg.c_context, dil, rng))
            cin = cfg.c_context
        self.sem_head = MLP(cfg.c_coarse, cfg.head_hidden, cfg.classes + 1, rng)
        self.rgb_head = MLP(cfg.c_coarse, cfg.head_hidden, 3, rng)
        self.aux = AuxDecoder(cfg, rng)
        fh, fw = cfg.feature_size
        pix = np.stack(np.meshgrid(np.linspace(-1, 1, fh), np.linspace(-1, 1, fw), indexing="ij"), -1)
        self._pix_code = positional_encoding(pix.reshape(-1, 2), cfg.c_t)
        self._bev_code = positional_encoding(bev_points(cfg), cfg.c_t)

    # ------------------------------------------------------------- parameters
    def inference_parameters(self):
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("aux.")}

    def parameter_report(self):
        named = self.named_parameters()
        aux = sum(v.size for k, v in named.items() if k.startswith("aux."))
        total = sum(v.size for v in named.values())
        return {"inference": total - aux, "aux_decoder": aux, "total": total}

    # ---------------------------------------------------------------- stages
    def encode_images(self, images):
        images = images if isinstance(images, Tensor) else Tensor(images)
        n, c, h, w = images.shape
        if (h, w) != self.cfg.image_size or c != 3:
            raise ConfigError(f"expected images of shape (N, 3, {self.cfg.image_size}), got {images.shape}")
        return self.encoder(images)

    def aggregate_features(self, feats):
        """SAM gating then per-camera self-attention. Returns (N, HW, C_f) rows."""
        gated = self.sam(feats)
        n, c, h, w = gated.shape
        rows = T.transpose(T.reshape(gated, (n, c, h * w)), (0, 2, 1))
        return T.stack([self.self_attn(rows[i]) for i in range(n)], axis=0)

    def tokenize_camera(self, rows):
        """(N, HW, C_f) -> (N*HW, C_t): projection + pixel code + camera embedding."""
        n, hw, _ = rows.shape
        if n > self.cfg.n_cameras:
            raise ConfigError(f"{n} cameras but the model was built for {self.cfg.n_cameras}")
        tok = self.cam_proj(rows) + Tensor(self._pix_code[None]) + T.reshape(self.cam_embed[:n], (n, 1, -1))
        return T.reshape(tok, (n * hw, self.cfg.c_t))

    def tokenize_lidar(self, rows):
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
        if len(rows) == 0:
            raise ConfigError("LiDAR-dependent mode needs at least one voxel")
        norm = normalize_lidar_rows(rows, self.cfg.lidar_spec())
        return self.lidar_proj(Tensor(positional_encoding(norm, self.cfg.lidar_pe)))

    def bev_queries(self):
        return Tensor(self._bev_code) + self.bev_embed

    def bev_context(self, bev):
        """(N_bev, C_t) -> V_coarse (C_coarse, H_bev, W_bev, D_coarse)."""
        h, w = self.cfg.bev_size
        x = T.reshape(T.transpose(bev, (1, 0)), (self.cfg.c_t, h, w))
        for blk in self.context:
            x = blk(x)
        if x.shape[0] != self.cfg.c_context:
            raise ConfigError("context channels != c_coarse * d_coarse")
        return split_channels(x, self.cfg.c_coarse, self.cfg.d_coarse)

    def coarse_heads(self, vcoarse):
        c, h, w, d = vcoarse.shape
        feats = T.reshape(T.transpose(vcoarse, (1, 2, 3, 0)), (h * w * d, c))
        sem = self.sem_head(feats)
        geo = geometry_from_semantics(sem)
        rgb = T.sigmoid(self.rgb_head(feats))

        def grid(x):
            return T.transpose(T.reshape(x, (h, w, d, x.shape[-1])), (3, 0, 1, 2))

        return grid(sem), grid(geo), grid(rgb)

    def fine_predict(self, coarse_sem, coarse_geo, coarse_rgb, queries):
        w = self._interp_for(np.asarray(queries), coarse_sem.shape[1:])
        return (grid_sample(coarse_sem, w), grid_sample(coarse_geo, w),
                grid_sample(coarse_rgb, w))

    def _interp_for(self, queries, shape):
        # training reuses one query set for every scene, so keep the last matrix
        cached = getattr(self, "_interp_cache", None)
        if cached is not None and cached[1] == shape and np.array_equal(cached[0], queries):
            return cached[2]
        w = interpolation_matrix(queries, shape)
        self._interp_cache = (queries.copy(), shape, w)
        return w

    def aux_heads_2d(self, feats):
        """2D decoder on one camera's deepest features (1 or 3 dims: C,H,W)."""
        if not self.training:
            raise RuntimeError("2D auxiliary heads are training-only")
        sem, depth, rgb = self.aux(feats)
        return sem, depth, rgb

    # --------------------------------------------------------------- forward
    def forward(self, inputs, timings=None):
        mode = inputs.mode
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        clock = _Clock(timings)
        uses_cam = mode in ("camera_only", "fused")
        uses_lidar = mode in ("lidar_only", "fused")
        if uses_lidar and (inputs.lidar is None or len(inputs.lidar) == 0):
            raise ConfigError(f"mode {mode} needs LiDAR voxels")
        if uses_cam and inputs.images is None:
            raise ConfigError(f"mode {mode} needs images")

        feats = None
        if uses_cam:
            feats = self.encode_images(inputs.images)
            rows = self.aggregate_features(feats)
            clock.lap("encode")
            cam_tokens = self.tokenize_camera(rows)
        queries = self.bev_queries()
        lidar_tokens = self.tokenize_lidar(inputs.lidar) if uses_lidar else None
        clock.lap("tokenize")
        if uses_lidar:
            queries = self.cst_lidar(queries, lidar_tokens)
            clock.lap("cst_lidar")
        bev = self.cst_camera(queries, cam_tokens) if uses_cam else queries
        clock.lap("cst_camera")
        vcoarse = self.bev_context(bev)
        csem, cgeo, crgb = self.coarse_heads(vcoarse)
        clock.lap("context_heads")
        fsem, fgeo, frgb = self.fine_predict(csem, cgeo, crgb, inputs.queries)
        clock.lap("fine_sample")
        return OccupancyPrediction(csem, cgeo, crgb, fsem, fgeo, frgb, bev, feats)


class _Clock:
    def __init__(self, sink):
        self.sink = sink
        self.t = time.perf_counter()

    def lap(self, name):
        if self.sink is None:
            return
        now = time.perf_counter()
        self.sink[name] = self.sink.get(name, 0.0) + now - self.t
        self.t = now
