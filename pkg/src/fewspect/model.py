"""Dual-domain reconstruction network.

Three parts:

* ProjectionNet reconstructs the volume slice by slice straight from the
  stacked module projections.  Every output slice owns a private parameter
  group (tokenizer, transformer, slice head, shallow 2D CNN); groups are
  stored stacked along a leading slice axis so all of them evaluate as one
  batched GEMM per op.  Per slice, the transformer tokens (all modules,
  patched) are pooled and projected to an image slice, fused with the
  matching back-projection slice and every module projection resized to the
  slice size (n_modules + 2 feature channels), and refined by the CNN.
* ImageRefiner fuses the ProjectionNet output with the back projection and
  the iterative reconstruction through two U-net style 3D CNNs of identical
  layout, with a residual connection from the iterative reconstruction and
  a nonnegativity clamp.
* VolumeCritic scores volumes for adversarial training: strided 3D convs,
  leaky activations between layers, global mean, no normalization.  Its
  input gradient is exposed as an explicit differentiable chain for the
  gradient penalty.

All forward passes accept a leading batch axis.  Volumes are handled as
(N, 1, nz, ny, nx); projections as (N, n_modules, nv, nu).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .datamodel import ProjectionSet, VolumeGrid
from .errors import ConfigError


@dataclass(frozen=True)
class TransformerConfig:
    patch_size: int = 4
    embed_dim: int = 64
    n_heads: int = 2
    n_layers: int = 2
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if min(self.patch_size, self.embed_dim, self.n_heads, self.n_layers, self.mlp_ratio) < 1:
            raise ConfigError("transformer config values must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    grid_shape: tuple = (24, 24, 16)  # (nx, ny, nz)
    n_modules: int = 19
    nu: int = 16
    nv: int = 16
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    slice_cnn_channels: tuple = (32, 16)
    unet_widths: tuple = (16, 32, 64)
    critic_channels: tuple = (8, 16, 32, 64, 64)
    slice_cnn_slope: float = 0.1
    unet_slope: float = 0.1
    critic_slope: float = 0.2

    def __post_init__(self):
        p = self.transformer.patch_size
        if self.nu % p or self.nv % p:
            raise ConfigError(f"patch_size {p} must divide nu={self.nu} and nv={self.nv}")

    @property
    def nx(self):
        return self.grid_shape[0]

    @property
    def ny(self):
        return self.grid_shape[1]

    @property
    def nz(self):
        return self.grid_shape[2]

    @property
    def patches_per_module(self):
        p = self.transformer.patch_size
        return (self.nu // p) * (self.nv // p)

    @property
    def n_tokens(self):
        return self.n_modules * self.patches_per_module

    @property
    def fused_channels(self):
        # transformer slice + back-projection slice + one channel per module
        return self.n_modules + 2


def desk_config() -> ModelConfig:
    return ModelConfig()


def paper_config() -> ModelConfig:
    return ModelConfig(grid_shape=(70, 70, 50), nu=32, nv=32)


# ---------------------------------------------------------------------------
# Input preparation (constant arrays, no gradients)
# ---------------------------------------------------------------------------

def tokenize_projections(proj_values, cfg: ModelConfig):
    """(..., n_modules, nv, nu) -> (..., n_tokens, patch^2) by per-module patching."""
    arr = np.asarray(proj_values)
    p = cfg.transformer.patch_size
    lead = arr.shape[:-3]
    m, nv, nu = arr.shape[-3:]
    if (m, nv, nu) != (cfg.n_modules, cfg.nv, cfg.nu):
        raise ConfigError(
            f"projection block {(m, nv, nu)} does not match model ({cfg.n_modules}, {cfg.nv}, {cfg.nu})"
        )
    a = arr.reshape(lead + (m, nv // p, p, nu // p, p))
    a = np.moveaxis(a, -3, -2)  # (..., m, nv/p, nu/p, p, p)
    return np.ascontiguousarray(a.reshape(lead + (cfg.n_tokens, p * p)))


def resize_modules(proj_values, cfg: ModelConfig):
    """(..., n_modules, nv, nu) -> (..., n_modules, ny, nx) bilinear (align-corners)."""
    from .autodiff import _linear_resample_matrix

    arr = np.asarray(proj_values, dtype=np.float64)
    R = _linear_resample_matrix(cfg.nv, cfg.ny, arr.dtype)
    Cm = _linear_resample_matrix(cfg.nu, cfg.nx, arr.dtype)
    return np.matmul(np.matmul(R, arr), Cm.T)


# ---------------------------------------------------------------------------
# ProjectionNet
# ---------------------------------------------------------------------------

class ProjectionNet:
    """Slice-by-slice projection-to-image transformer (one group per slice)."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32, prefix="pnet"):
        self.cfg = cfg
        self.dtype = dtype
        t = cfg.transformer
        S, T, E = cfg.nz, cfg.n_tokens, t.embed_dim
        P2 = t.patch_size * t.patch_size
        hidden = E * t.mlp_ratio
        c1, c2 = cfg.slice_cnn_channels
        cin = cfg.fused_channels
        self._params = {}

        def add(name, shape, kind="xavier", fans=None):
            p = Parameter(np.zeros(shape, dtype=dtype), f"{prefix}.{name}")
            p.init_kind = kind
            p.fans = fans
            self._params[name] = p
            return p

        add("patch_embed.weight", (S, P2, E))
        add("patch_embed.bias", (S, 1, E), kind="zeros")
        add("pos_embed", (S, T, E))
        add("module_embed", (S, cfg.n_modules, 1, E), fans=(cfg.n_modules, E))
        for l in range(t.n_layers):
            add(f"block{l}.ln1.gain", (S, 1, E), kind="ones")
            add(f"block{l}.ln1.bias", (S, 1, E), kind="zeros")
            for nm in ("wq", "wk", "wv", "wo"):
                add(f"block{l}.attn.{nm}", (S, E, E))
            add(f"block{l}.ln2.gain", (S, 1, E), kind="ones")
            add(f"block{l}.ln2.bias", (S, 1, E), kind="zeros")
            add(f"block{l}.mlp.fc1.weight", (S, E, hidden))
            add(f"block{l}.mlp.fc1.bias", (S, 1, hidden), kind="zeros")
            add(f"block{l}.mlp.fc2.weight", (S, hidden, E))
            add(f"block{l}.mlp.fc2.bias", (S, 1, E), kind="zeros")
        add("ln_final.gain", (S, 1, E), kind="ones")
        add("ln_final.bias", (S, 1, E), kind="zeros")
        add("head.weight", (S, E, cfg.ny * cfg.nx))
        add("head.bias", (S, 1, cfg.ny * cfg.nx), kind="zeros")
        add("cnn.conv1.weight", (S, c1, cin, 3, 3), fans=(cin * 9, c1 * 9))
        add("cnn.conv1.bias", (1, S, c1, 1, 1), kind="zeros")
        add("cnn.conv2.weight", (S, c2, c1, 3, 3), fans=(c1 * 9, c2 * 9))
        add("cnn.conv2.bias", (1, S, c2, 1, 1), kind="zeros")
        add("cnn.conv3.weight", (S, 1, c2, 3, 3), fans=(c2 * 9, 9))
        add("cnn.conv3.bias", (1, S, 1, 1, 1), kind="zeros")

    def params(self):
        return list(self._params.values())

    def param_count(self):
        return sum(p.size for p in self._params.values())

    def _p(self, name, srange):
        p = self._params[name]
        if srange is None:
            return p
        s0, s1 = srange
        ax = 1 if name.startswith("cnn.") and name.endswith("bias") else 0
        sl = (slice(None), slice(s0, s1)) if ax == 1 else (slice(s0, s1),)
        return Tensor(np.ascontiguousarray(p.data[sl]))

    def forward(self, tokens, bp_slices, resized, srange=None):
        """tokens (N,T,p^2), bp_slices (N,nz,ny,nx), resized (N,n_modules,ny,nx).

        Returns (N, nz, ny, nx).  srange=(s0,s1) restricts computation to a
        block of slices using parameter snapshots (inference chunking only;
        gradients do not flow to parameters in that mode).
        """
        cfg = self.cfg
        t = cfg.transformer
        N = tokens.shape[0]
        S = cfg.nz if srange is None else srange[1] - srange[0]
        T, E, H = cfg.n_tokens, t.embed_dim, t.n_heads
        dh = E // H
        pm = cfg.patches_per_module

        x = ad.matmul(
            Tensor(np.ascontiguousarray(tokens[:, None], dtype=self.dtype)),
            self._p("patch_embed.weight", srange),
        )
        x = ad.add(x, self._p("patch_embed.bias", srange))
        x = ad.reshape(x, (N, S, cfg.n_modules, pm, E))
        x = ad.add(x, self._p("module_embed", srange))
        x = ad.reshape(x, (N, S, T, E))
        x = ad.add(x, self._p("pos_embed", srange))

        for l in range(t.n_layers):
            h = ad.layer_norm(
                x, self._p(f"block{l}.ln1.gain", srange), self._p(f"block{l}.ln1.bias", srange)
            )
            q = ad.matmul(h, self._p(f"block{l}.attn.wq", srange))
            k = ad.matmul(h, self._p(f"block{l}.attn.wk", srange))
            v = ad.matmul(h, self._p(f"block{l}.attn.wv", srange))
            q = ad.permute(ad.reshape(q, (N, S, T, H, dh)), (0, 1, 3, 2, 4))
            k = ad.permute(ad.reshape(k, (N, S, T, H, dh)), (0, 1, 3, 2, 4))
            v = ad.permute(ad.reshape(v, (N, S, T, H, dh)), (0, 1, 3, 2, 4))
            att = ad.scale(ad.matmul(q, ad.permute(k, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(dh))
            att = ad.softmax(att)
            o = ad.matmul(att, v)
            o = ad.reshape(ad.permute(o, (0, 1, 3, 2, 4)), (N, S, T, E))
            o = ad.matmul(o, self._p(f"block{l}.attn.wo", srange))
            x = ad.add(x, o)
            h = ad.layer_norm(
                x, self._p(f"block{l}.ln2.gain", srange), self._p(f"block{l}.ln2.bias", srange)
            )
            h = ad.matmul(h, self._p(f"block{l}.mlp.fc1.weight", srange))
            h = ad.add(h, self._p(f"block{l}.mlp.fc1.bias", srange))
            h = ad.relu(h)
            h = ad.matmul(h, self._p(f"block{l}.mlp.fc2.weight", srange))
            h = ad.add(h, self._p(f"block{l}.mlp.fc2.bias", srange))
            x = ad.add(x, h)

        x = ad.layer_norm(
            x, self._p("ln_final.gain", srange), self._p("ln_final.bias", srange)
        )
        pooled = ad.tmean(x, axes=2)  # (N,S,E)
        flat = ad.add(
            ad.matmul(ad.reshape(pooled, (N, S, 1, E)), self._p("head.weight", srange)),
            self._p("head.bias", srange),
        )
        tslice = ad.reshape(flat, (N, S, 1, cfg.ny, cfg.nx))

        s0, s1 = (0, cfg.nz) if srange is None else srange
        bp = np.ascontiguousarray(bp_slices[:, s0:s1, None], dtype=self.dtype)
        rs = np.ascontiguousarray(
            np.broadcast_to(
                resized[:, None].astype(self.dtype), (N, S, cfg.n_modules, cfg.ny, cfg.nx)
            )
        )
        fused = ad.concat([tslice, Tensor(bp), Tensor(rs)], axis=2)

        slope = cfg.slice_cnn_slope
        h = ad.conv2d_stack(fused, self._p("cnn.conv1.weight", srange), padding=1)
        h = ad.leaky_relu(ad.add(h, self._p("cnn.conv1.bias", srange)), slope)
        h = ad.conv2d_stack(h, self._p("cnn.conv2.weight", srange), padding=1)
        h = ad.leaky_relu(ad.add(h, self._p("cnn.conv2.bias", srange)), slope)
        h = ad.conv2d_stack(h, self._p("cnn.conv3.weight", srange), padding=1)
        h = ad.add(h, self._p("cnn.conv3.bias", srange))
        return ad.reshape(h, (N, S, cfg.ny, cfg.nx))


# ---------------------------------------------------------------------------
# U-net building block and ImageRefiner
# ---------------------------------------------------------------------------

class UNet3D:
    """Three-level encoder-decoder with stride-2 downsampling, nearest
    upsampling, and skip concatenations; linear final layer."""

    def __init__(self, in_channels, widths, slope, dtype, prefix, params):
        w1, w2, w3 = widths
        self.slope = slope
        self.prefix = prefix
        self._store = params

        def add(name, shape):
            kind = "zeros" if name.endswith(".bias") else "xavier"
            p = Parameter(np.zeros(shape, dtype=dtype), f"{prefix}.{name}")
            p.init_kind = kind
            p.fans = None
            params[f"{prefix}.{name}"] = p
            return p

        def conv(name, cin, cout):
            add(f"{name}.weight", (cout, cin, 3, 3, 3))
            add(f"{name}.bias", (1, cout, 1, 1, 1))

        conv("e1", in_channels, w1)
        conv("e2", w1, w2)      # stride 2
        conv("e2b", w2, w2)
        conv("e3", w2, w3)      # stride 2
        conv("e3b", w3, w3)
        conv("d2", w3 + w2, w2)
        conv("d1", w2 + w1, w1)
        conv("out", w1, 1)

    def _conv(self, x, name, stride=1):
        w = self._store[f"{self.prefix}.{name}.weight"]
        b = self._store[f"{self.prefix}.{name}.bias"]
        return ad.add(ad.conv3d(x, w, stride=stride, padding=1), b)

    def forward(self, x):
        act = lambda t: ad.leaky_relu(t, self.slope)
        e1 = act(self._conv(x, "e1"))
        e2 = act(self._conv(e1, "e2", stride=2))
        e2 = act(self._conv(e2, "e2b"))
        e3 = act(self._conv(e2, "e3", stride=2))
        e3 = act(self._conv(e3, "e3b"))
        u2 = ad.crop3d(ad.upsample3d_nearest(e3), e2.shape[2:])
        d2 = act(self._conv(ad.concat([u2, e2], axis=1), "d2"))
        u1 = ad.crop3d(ad.upsample3d_nearest(d2), e1.shape[2:])
        d1 = act(self._conv(ad.concat([u1, e1], axis=1), "d1"))
        return self._conv(d1, "out")


class ImageRefiner:
    """Two identical-layout 3D U-nets refining the dual-domain inputs.

    cnn1 sees (img_p, img_bp, img_mlem); cnn2 sees (cnn1 output, img_mlem);
    the final volume is relu(cnn2 output + img_mlem).
    """

    def __init__(self, cfg: ModelConfig, dtype=np.float32, prefix="inet"):
        self.cfg = cfg
        self.dtype = dtype
        self._params = {}
        self.cnn1 = UNet3D(3, cfg.unet_widths, cfg.unet_slope, dtype, f"{prefix}.cnn1", self._params)
        self.cnn2 = UNet3D(2, cfg.unet_widths, cfg.unet_slope, dtype, f"{prefix}.cnn2", self._params)

    def params(self):
        return list(self._params.values())

    def forward(self, img_p, img_bp, img_mlem):
        """All inputs (N,1,nz,ny,nx) tensors; returns the clamped final volume."""
        h1 = self.cnn1.forward(ad.concat([img_p, img_bp, img_mlem], axis=1))
        h2 = self.cnn2.forward(ad.concat([h1, img_mlem], axis=1))
        return ad.relu(ad.add(h2, img_mlem))


# ---------------------------------------------------------------------------
# Critic
# ---------------------------------------------------------------------------

class VolumeCritic:
    """Strided conv critic with a global-mean score head."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32, prefix="critic"):
        self.cfg = cfg
        self.dtype = dtype
        self.slope = cfg.critic_slope
        self._params = {}
        channels = (1,) + tuple(cfg.critic_channels)
        self.n_layers = len(cfg.critic_channels)
        for i in range(self.n_layers):
            w = Parameter(
                np.zeros((channels[i + 1], channels[i], 3, 3, 3), dtype=dtype),
                f"{prefix}.conv{i}.weight",
            )
            w.init_kind = "xavier"
            w.fans = None
            b = Parameter(
                np.zeros((1, channels[i + 1], 1, 1, 1), dtype=dtype), f"{prefix}.conv{i}.bias"
            )
            b.init_kind = "zeros"
            b.fans = None
            self._params[f"conv{i}.weight"] = w
            self._params[f"conv{i}.bias"] = b

    def params(self):
        return list(self._params.values())

    def score(self, x):
        """x (N,1,nz,ny,nx) -> per-sample scores (N,)."""
        h = x
        for i in range(self.n_layers):
            h = ad.add(
                ad.conv3d(h, self._params[f"conv{i}.weight"], stride=2, padding=1),
                self._params[f"conv{i}.bias"],
            )
            if i < self.n_layers - 1:
                h = ad.leaky_relu(h, self.slope)
        return ad.tmean(h, axes=(1, 2, 3, 4))

    def input_gradient(self, x_values):
        """Explicit differentiable chain computing d score_n / d x_n.

        x_values is a constant (N,1,nz,ny,nx) array.  The returned tensor has
        the same shape; gradients flow to the critic weights through the
        transposed-convolution chain (activation masks are detached, exact
        almost everywhere).
        """
        x = np.asarray(x_values, dtype=self.dtype)
        shapes = [x.shape[2:]]
        masks = []
        h = x
        with ad.no_grad():
            for i in range(self.n_layers):
                z = ad.conv3d(
                    Tensor(h), self._params[f"conv{i}.weight"], stride=2, padding=1
                ).data + self._params[f"conv{i}.bias"].data
                if i < self.n_layers - 1:
                    masks.append(np.where(z > 0, 1.0, self.slope).astype(self.dtype))
                    h = z * masks[-1]
                else:
                    h = z
                shapes.append(h.shape[2:])
        n = x.shape[0]
        feat = h.shape[1] * int(np.prod(shapes[-1]))
        g = Tensor(np.full(h.shape, 1.0 / feat, dtype=self.dtype))
        for i in reversed(range(self.n_layers)):
            g = ad.conv3d_transpose(
                g, self._params[f"conv{i}.weight"], stride=2, padding=1,
                output_spatial=shapes[i],
            )
            if i > 0:
                g = ad.mul(g, Tensor(masks[i - 1]))
        return g


# ---------------------------------------------------------------------------
# Generator bundle and spec-level single-volume entry points
# ---------------------------------------------------------------------------

class DualDomainGenerator:
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.pnet = ProjectionNet(cfg, dtype)
        self.inet = ImageRefiner(cfg, dtype)

    def params(self):
        return self.pnet.params() + self.inet.params()

    def forward(self, tokens, bp_slices, resized, mlem_slices):
        """Returns (img_p, final) tensors, both (N, nz, ny, nx) shaped volumes."""
        cfg = self.cfg
        N = tokens.shape[0]
        img_p = self.pnet.forward(tokens, bp_slices, resized)
        vol = lambda a: ad.reshape(a, (N, 1, cfg.nz, cfg.ny, cfg.nx))
        bp_t = Tensor(np.ascontiguousarray(bp_slices[:, None], dtype=self.dtype))
        mlem_t = Tensor(np.ascontiguousarray(mlem_slices[:, None], dtype=self.dtype))
        final = self.inet.forward(vol(img_p), bp_t, mlem_t)
        return img_p, ad.reshape(final, (N, cfg.nz, cfg.ny, cfg.nx))


def _check_volume(v: VolumeGrid, cfg: ModelConfig, name):
    if v.shape != cfg.grid_shape:
        raise ConfigError(f"{name} dims {v.shape} do not match model grid {cfg.grid_shape}")


def pnet_forward(proj: ProjectionSet, img_bp: VolumeGrid, pnet: ProjectionNet,
                 slice_chunk=None) -> VolumeGrid:
    """Single-subject projection-domain reconstruction (IMG_p)."""
    cfg = pnet.cfg
    if proj.n_angles != 1:
        raise ConfigError("projection-domain network consumes the one-angle projection set")
    if (proj.n_modules, proj.nu, proj.nv) != (cfg.n_modules, cfg.nu, cfg.nv):
        raise ConfigError(
            f"projection dims ({proj.n_modules},{proj.nu},{proj.nv}) do not match model "
            f"({cfg.n_modules},{cfg.nu},{cfg.nv})"
        )
    _check_volume(img_bp, cfg, "img_bp")
    block = proj.as_array()[0]
    tokens = tokenize_projections(block, cfg)[None]
    resized = resize_modules(block, cfg)[None]
    bp = img_bp.grid3d()[None]
    with ad.no_grad():
        if slice_chunk is None:
            out = pnet.forward(tokens, bp, resized).data[0]
        else:
            parts = []
            for s0 in range(0, cfg.nz, slice_chunk):
                s1 = min(s0 + slice_chunk, cfg.nz)
                parts.append(pnet.forward(tokens, bp, resized, srange=(s0, s1)).data[0])
            out = np.concatenate(parts, axis=0)
    return VolumeGrid(cfg.nx, cfg.ny, cfg.nz, img_bp.voxel_size, out.reshape(-1).astype(np.float64))


def inet_forward(img_p: VolumeGrid, img_bp: VolumeGrid, img_mlem: VolumeGrid,
                 inet: ImageRefiner) -> VolumeGrid:
    """Single-subject image-domain refinement (final volume)."""
    cfg = inet.cfg
    for v, name in ((img_p, "img_p"), (img_bp, "img_bp"), (img_mlem, "img_mlem")):
        _check_volume(v, cfg, name)
    as_t = lambda v: Tensor(v.grid3d()[None, None].astype(inet.dtype))
    with ad.no_grad():
        out = inet.forward(as_t(img_p), as_t(img_bp), as_t(img_mlem)).data[0, 0]
    return VolumeGrid(
        cfg.nx, cfg.ny, cfg.nz, img_mlem.voxel_size, out.reshape(-1).astype(np.float64)
    )


def critic_forward(x: VolumeGrid, critic: VolumeCritic):
    """Score one volume; returns a scalar Tensor (differentiable)."""
    _check_volume(x, critic.cfg, "x")
    xt = Tensor(x.grid3d()[None, None].astype(critic.dtype))
    return ad.tmean(critic.score(xt))
