"""Cascade-VAE generator and binary discriminator.

The generator is a primary convolutional VAE (encoder ``e11 + e12``, decoder
``d11 + d12``) plus a branch VAE whose input is the channel concatenation of
the ``e11`` activation and the (average-pooled) ``d11`` activation.  The two
decoders emit logits that are summed and squashed into the final
reconstruction.

Networks are plain dictionaries of named arrays wrapped in a
:class:`ParamSet`.  Forward functions optionally record their intermediate
caches on a ``tape`` dict, which the matching backward function consumes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ArchitectureError, ConfigError, DimensionError


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 64
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 5
    latent_dim: int = 128
    branch_enabled: bool = True
    branch_channels: int = 64

    def __post_init__(self):
        s = self.image_size
        if s < 4 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of 2, got {s}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2 so that both e11 and e12 are non-empty")
        if s // 2 ** self.depth < 2:
            raise ConfigError(f"bottleneck extent {s}/2^{self.depth} is below 2")
        if min(self.base_channels, self.latent_dim, self.branch_channels) < 1:
            raise ConfigError("channel and latent sizes must be positive")

    @property
    def branch_latent_dim(self):
        return 4 * self.latent_dim if self.branch_enabled else 0

    @property
    def e11_stages(self):
        return math.ceil(self.depth * 3 / 5)

    @property
    def d11_stages(self):
        # chosen so the d11 map is exactly twice the e11 map spatially
        return self.depth - self.e11_stages + 1

    @property
    def enc_channels(self):
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    @property
    def dec_channels(self):
        """Output channels of each decoder stage, ending in the image channels."""
        return self.enc_channels[-2::-1] + [self.in_channels]

    @property
    def bottleneck_size(self):
        return self.image_size // 2 ** self.depth

    @property
    def bottleneck_features(self):
        return self.enc_channels[-1] * self.bottleneck_size ** 2

    @property
    def e11_channels(self):
        return self.enc_channels[self.e11_stages - 1]

    @property
    def e11_size(self):
        return self.image_size // 2 ** self.e11_stages

    @property
    def d11_channels(self):
        return self.dec_channels[self.d11_stages - 1]

    @property
    def branch_in_channels(self):
        return self.e11_channels + self.d11_channels

    @property
    def branch_features(self):
        return self.branch_channels * (self.e11_size // 2) ** 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown arch keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "desk": ArchConfig(image_size=64, base_channels=16, depth=5, latent_dim=128, branch_channels=64),
    "paper": ArchConfig(image_size=256, base_channels=16, depth=5, latent_dim=512, branch_channels=128),
    # smallest config used for end-to-end gradient checks
    "tiny": ArchConfig(image_size=32, base_channels=4, depth=4, latent_dim=8, branch_channels=8),
}


def _conv_stages(in_ch, out_chs, transposed):
    specs, c = [], in_ch
    for o in out_chs:
        specs.append(nn.ConvSpec(c, o, transposed=transposed))
        c = o
    return specs


def generator_layout(cfg):
    """Ordered ``{group: [ConvSpec, ...]}`` for every convolutional group."""
    enc = _conv_stages(cfg.in_channels, cfg.enc_channels, False)
    dec = _conv_stages(cfg.enc_channels[-1], cfg.dec_channels, True)
    k = cfg.e11_stages
    j = cfg.d11_stages
    layout = {"e11": enc[:k], "e12": enc[k:], "d11": dec[:j], "d12": dec[j:]}
    if cfg.branch_enabled:
        layout["e2"] = [nn.ConvSpec(cfg.branch_in_channels, cfg.branch_channels)]
        layout["d2"] = list(dec)
    return layout


def discriminator_layout(cfg):
    return {"conv": _conv_stages(cfg.in_channels, cfg.enc_channels, False)}


def _is_output_stage(group, i, specs):
    return group in ("d12", "d2") and i == len(specs) - 1


def _linear_heads(cfg):
    heads = {
        "enc_head.mu": (cfg.bottleneck_features, cfg.latent_dim),
        "enc_head.logvar": (cfg.bottleneck_features, cfg.latent_dim),
        "dec_head": (cfg.latent_dim, cfg.bottleneck_features),
    }
    if cfg.branch_enabled:
        heads.update({
            "e2_head.mu": (cfg.branch_features, cfg.branch_latent_dim),
            "e2_head.logvar": (cfg.branch_features, cfg.branch_latent_dim),
            "d2_head": (cfg.branch_latent_dim, cfg.bottleneck_features),
        })
    return heads


@dataclass
class ParamSet:
    """Named trainable tensors plus batch-norm running statistics."""

    cfg: ArchConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def tensors(self):
        out = dict(self.params)
        out.update(self.buffers)
        return out

    def astype(self, dtype):
        return type(self)(
            self.cfg,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def copy(self):
        return self.astype(next(iter(self.params.values())).dtype)


class GeneratorParams(ParamSet):
    pass


class DiscriminatorParams(ParamSet):
    pass


def _conv_group_tensors(layout):
    """Yield ``(name, shape, role, fan_in)`` for every tensor of the conv groups."""
    for group, specs in layout.items():
        for i, spec in enumerate(specs):
            name = f"{group}.{i}"
            c = spec.out_channels
            yield f"{name}.w", spec.weight_shape, "weight", spec.fan_in
            if _is_output_stage(group, i, specs):
                yield f"{name}.b", (c,), "zeros", None
            else:
                # conv bias is redundant in front of batch norm
                yield f"{name}.bn.gamma", (c,), "ones", None
                yield f"{name}.bn.beta", (c,), "zeros", None
                yield f"{name}.bn.running_mean", (c,), "buffer_zeros", None
                yield f"{name}.bn.running_var", (c,), "buffer_ones", None


def _linear_tensors(heads):
    for name, (din, dout) in heads.items():
        yield f"{name}.w", (din, dout), "weight", din
        yield f"{name}.b", (dout,), "zeros", None


def tensor_table(cfg, kind):
    """List of ``(name, shape, role, fan_in)`` for a generator or discriminator."""
    if kind == "generator":
        return list(_conv_group_tensors(generator_layout(cfg))) + list(_linear_tensors(_linear_heads(cfg)))
    if kind == "discriminator":
        return list(_conv_group_tensors(discriminator_layout(cfg))) + \
            list(_linear_tensors({"fc": (cfg.bottleneck_features, 1)}))
    raise ValueError(f"unknown network kind {kind!r}")


def _build(cfg, kind, rng, dtype, zero):
    params, buffers = {}, {}
    for name, shape, role, fan_in in tensor_table(cfg, kind):
        if role == "weight":
            params[name] = np.zeros(shape, dtype) if zero else nn.he_normal(rng, shape, fan_in, dtype)
        elif role == "zeros":
            params[name] = np.zeros(shape, dtype)
        elif role == "ones":
            params[name] = np.ones(shape, dtype)
        elif role == "buffer_zeros":
            buffers[name] = np.zeros(shape, dtype)
        else:
            buffers[name] = np.ones(shape, dtype)
    return params, buffers


def init_generator(cfg, rng, dtype=np.float32):
    return GeneratorParams(cfg, *_build(cfg, "generator", rng, dtype, False))


def init_discriminator(cfg, rng, dtype=np.float32, zero=False):
    """``zero=True`` zeroes every weight so the output is exactly 0.5."""
    return DiscriminatorParams(cfg, *_build(cfg, "discriminator", rng, dtype, zero))


def expected_names(cfg, kind):
    return sorted(name for name, *_ in tensor_table(cfg, kind))


# ---------------------------------------------------------------------------
# stage plumbing


def _stage_forward(x, ps, name, spec, output_stage, train, tape, updates):
    p = ps.params
    conv = nn.conv_up if spec.transposed else nn.conv_down
    y, c_conv = conv(x, p[f"{name}.w"], p.get(f"{name}.b"))
    c_bn = c_act = None
    if not output_stage:
        rm, rv = f"{name}.bn.running_mean", f"{name}.bn.running_var"
        y, c_bn, new_m, new_v = nn.batch_norm(
            y, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"], ps.buffers[rm], ps.buffers[rv], train
        )
        if train and updates is not None:
            updates[rm], updates[rv] = new_m, new_v
        y, c_act = nn.leaky_relu(y)
    if tape is not None:
        tape[name] = (spec.transposed, c_conv, c_bn, c_act)
    return y


def _stage_backward(dy, tape, name, grads):
    transposed, c_conv, c_bn, c_act = tape[name]
    if c_act is not None:
        dy = nn.leaky_relu_backward(dy, c_act)
        dy, grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = nn.batch_norm_backward(dy, c_bn)
    back = nn.conv_up_backward if transposed else nn.conv_down_backward
    dx, grads[f"{name}.w"], db = back(dy, c_conv)
    if db is not None:
        grads[f"{name}.b"] = db
    return dx


def _run_group(x, ps, group, specs, train, tape, updates):
    for i, spec in enumerate(specs):
        x = _stage_forward(x, ps, f"{group}.{i}", spec, _is_output_stage(group, i, specs),
                           train, tape, updates)
    return x


def _back_group(dy, group, n_stages, tape, grads):
    for i in reversed(range(n_stages)):
        dy = _stage_backward(dy, tape, f"{group}.{i}", grads)
    return dy


def _linear_forward(x, ps, name, tape):
    y, c = nn.linear(x, ps.params[f"{name}.w"], ps.params[f"{name}.b"])
    if tape is not None:
        tape[name] = c
    return y


def _linear_backward(dy, tape, name, grads):
    dx, grads[f"{name}.w"], grads[f"{name}.b"] = nn.linear_backward(dy, tape[name])
    return dx


def _check_image(x, cfg):
    if x.ndim != 4:
        raise DimensionError(f"image batch must be rank 4, got shape {x.shape}")
    want = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if x.shape[1:] != want:
        raise DimensionError(f"image batch has per-sample shape {x.shape[1:]}, config expects {want}")


def _check_width(z, d, what):
    if z.ndim != 2 or z.shape[1] != d:
        raise ConfigError(f"{what} must have shape (N, {d}), got {z.shape}")


# ---------------------------------------------------------------------------
# generator


@dataclass
class LatentSample:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray


@dataclass
class GeneratorOutput:
    x1_logits: np.ndarray
    x2_logits: np.ndarray
    x_recon: np.ndarray
    latent1: LatentSample
    latent2: LatentSample | None = None


def encode_primary(x, gp, train=False, tape=None, updates=None):
    """Run e11 and e12, returning ``((mu1, logvar1), e11_features)``."""
    cfg = gp.cfg
    _check_image(x, cfg)
    layout = generator_layout(cfg)
    h11 = _run_group(x, gp, "e11", layout["e11"], train, tape, updates)
    h = _run_group(h11, gp, "e12", layout["e12"], train, tape, updates)
    flat = h.reshape(h.shape[0], -1)
    mu = _linear_forward(flat, gp, "enc_head.mu", tape)
    logvar = _linear_forward(flat, gp, "enc_head.logvar", tape)
    return (mu, logvar), h11


def reparameterize(mu, logvar, eps):
    return mu + np.exp(0.5 * logvar) * eps


def _decode_head(z, gp, head, tape):
    cfg = gp.cfg
    h = _linear_forward(z, gp, head, tape)
    h = h.reshape(-1, cfg.enc_channels[-1], cfg.bottleneck_size, cfg.bottleneck_size)
    h, c_act = nn.leaky_relu(h)
    if tape is not None:
        tape[f"{head}.act"] = c_act
    return h


def decode_primary(z1, gp, train=False, tape=None, updates=None):
    """Decode ``z1`` into ``(x1_logits, d11_features)``."""
    cfg = gp.cfg
    _check_width(z1, cfg.latent_dim, "z1")
    layout = generator_layout(cfg)
    h = _decode_head(z1, gp, "dec_head", tape)
    d11 = _run_group(h, gp, "d11", layout["d11"], train, tape, updates)
    x1 = _run_group(d11, gp, "d12", layout["d12"], train, tape, updates)
    return x1, d11


def branch_input(e11_features, d11_features, tape=None):
    """Concatenate e11 features with d11 features pooled to the same extent."""
    he, hd = e11_features.shape[2], d11_features.shape[2]
    if e11_features.shape[0] != d11_features.shape[0]:
        raise ArchitectureError("e11 and d11 features come from different batches")
    if hd % he or (hd // he) & (hd // he - 1) or d11_features.shape[3] != hd or e11_features.shape[3] != he:
        raise ArchitectureError(f"cannot reconcile d11 extent {hd} with e11 extent {he}")
    factor = hd // he
    if factor > 1:
        pooled, c_pool = nn.avg_pool(d11_features, factor)
    else:
        pooled, c_pool = d11_features, None
    if tape is not None:
        tape["pool"] = (c_pool, e11_features.shape[1])
    return np.concatenate([e11_features, pooled], axis=1)


def encode_branch(f_x, gp, train=False, tape=None, updates=None):
    cfg = gp.cfg
    if f_x.ndim != 4 or f_x.shape[1] != cfg.branch_in_channels:
        raise ConfigError(f"branch input must have {cfg.branch_in_channels} channels, got shape {f_x.shape}")
    h = _run_group(f_x, gp, "e2", generator_layout(cfg)["e2"], train, tape, updates)
    flat = h.reshape(h.shape[0], -1)
    return _linear_forward(flat, gp, "e2_head.mu", tape), _linear_forward(flat, gp, "e2_head.logvar", tape)


def decode_branch(z2, gp, train=False, tape=None, updates=None):
    cfg = gp.cfg
    _check_width(z2, cfg.branch_latent_dim, "z2")
    specs = generator_layout(cfg)["d2"]
    h = _decode_head(z2, gp, "d2_head", tape)
    return _run_group(h, gp, "d2", specs, train, tape, updates)


def generator_forward(x, gp, eps1=None, eps2=None, train=False, tape=None, updates=None):
    """Full cascade pass.  ``eps=None`` means zero noise (posterior mean)."""
    cfg = gp.cfg
    (mu1, lv1), e11 = encode_primary(x, gp, train, tape, updates)
    if eps1 is None:
        eps1 = np.zeros_like(mu1)
    z1 = reparameterize(mu1, lv1, eps1)
    x1, d11 = decode_primary(z1, gp, train, tape, updates)
    latent2 = None
    if cfg.branch_enabled:
        f_x = branch_input(e11, d11, tape)
        mu2, lv2 = encode_branch(f_x, gp, train, tape, updates)
        if eps2 is None:
            eps2 = np.zeros_like(mu2)
        z2 = reparameterize(mu2, lv2, eps2)
        x2 = decode_branch(z2, gp, train, tape, updates)
        latent2 = LatentSample(mu2, lv2, z2)
    else:
        x2 = np.zeros_like(x1)
    if tape is not None:
        tape["eps1"], tape["eps2"] = eps1, eps2
        tape["latent1"], tape["latent2"] = (mu1, lv1), (None if latent2 is None else (mu2, lv2))
    return GeneratorOutput(x1, x2, nn.sigmoid(x1 + x2), LatentSample(mu1, lv1, z1), latent2)


def _reparam_backward(dz, dmu, dlv, logvar, eps):
    return dmu + dz, dlv + dz * eps * 0.5 * np.exp(0.5 * logvar)


def _decode_head_backward(dh, head, tape, grads):
    dh = nn.leaky_relu_backward(dh, tape[f"{head}.act"])
    return _linear_backward(dh.reshape(dh.shape[0], -1), tape, head, grads)


def decode_branch_backward(gp, tape, dx2):
    """Gradient of a taped :func:`decode_branch` w.r.t. ``z2`` and its parameters."""
    grads = {}
    dh = _back_group(dx2, "d2", len(generator_layout(gp.cfg)["d2"]), tape, grads)
    return _decode_head_backward(dh, "d2_head", tape, grads), grads


def generator_backward(gp, tape, upstream):
    """Backpropagate loss gradients through a taped :func:`generator_forward`.

    ``upstream`` maps ``x1_logits``, ``mu1``, ``logvar1`` (and for the branch
    ``x2_logits``, ``mu2``, ``logvar2``) to the loss gradient with respect to
    those outputs.  Returns a gradient for every trainable parameter.
    """
    cfg = gp.cfg
    layout = generator_layout(cfg)
    grads = {}
    de11_extra = dd11_extra = None
    if cfg.branch_enabled:
        dz2, g2 = decode_branch_backward(gp, tape, upstream["x2_logits"])
        grads.update(g2)
        mu2, lv2 = tape["latent2"]
        dmu2, dlv2 = _reparam_backward(dz2, upstream["mu2"], upstream["logvar2"], lv2, tape["eps2"])
        dflat = _linear_backward(dmu2, tape, "e2_head.mu", grads) + \
            _linear_backward(dlv2, tape, "e2_head.logvar", grads)
        bshape = (dflat.shape[0], cfg.branch_channels, cfg.e11_size // 2, cfg.e11_size // 2)
        df = _back_group(dflat.reshape(bshape), "e2", 1, tape, grads)
        c_pool, split = tape["pool"]
        de11_extra = df[:, :split]
        dd11_extra = df[:, split:]
        if c_pool is not None:
            dd11_extra = nn.avg_pool_backward(dd11_extra, c_pool)

    d = _back_group(upstream["x1_logits"], "d12", len(layout["d12"]), tape, grads)
    if dd11_extra is not None:
        d = d + dd11_extra
    d = _back_group(d, "d11", len(layout["d11"]), tape, grads)
    dz1 = _decode_head_backward(d, "dec_head", tape, grads)
    mu1, lv1 = tape["latent1"]
    dmu1, dlv1 = _reparam_backward(dz1, upstream["mu1"], upstream["logvar1"], lv1, tape["eps1"])
    dflat = _linear_backward(dmu1, tape, "enc_head.mu", grads) + \
        _linear_backward(dlv1, tape, "enc_head.logvar", grads)
    s = cfg.bottleneck_size
    d = _back_group(dflat.reshape(-1, cfg.enc_channels[-1], s, s), "e12", len(layout["e12"]), tape, grads)
    if de11_extra is not None:
        d = d + de11_extra
    _back_group(d, "e11", len(layout["e11"]), tape, grads)
    return grads


# ---------------------------------------------------------------------------
# discriminator


def discriminator_logits(x, dp, train=False, tape=None, updates=None):
    _check_image(x, dp.cfg)
    h = _run_group(x, dp, "conv", discriminator_layout(dp.cfg)["conv"], train, tape, updates)
    return _linear_forward(h.reshape(h.shape[0], -1), dp, "fc", tape)


def discriminator_forward(x, dp, train=False):
    """Per-sample probability (N, 1) that ``x`` is a reconstruction, i.e. OOD."""
    return nn.sigmoid(discriminator_logits(x, dp, train))


def discriminator_backward(dp, tape, dlogits):
    grads = {}
    cfg = dp.cfg
    dflat = _linear_backward(dlogits, tape, "fc", grads)
    s = cfg.bottleneck_size
    _back_group(dflat.reshape(-1, cfg.enc_channels[-1], s, s), "conv", cfg.depth, tape, grads)
    return grads
