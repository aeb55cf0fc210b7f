"""The joint height / footprint network.

Pipeline: modality gates on the input bands -> patch embedding -> shifted
window transformer blocks -> multi-scale centre pooling -> two task branches
with the footprint-guided gate on the height branch, plus the
height-from-footprint surrogate used by the consistency loss.

All weights live in ``MorphoFormer.params`` (name -> leaf Tensor). Each weight
is initialised from an RNG keyed on ``(seed, name)``, so two configurations
with the same seed share every weight they have in common.
"""

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .dataset import MASK_CHANNEL, N_CHANNELS, SCENE_PX
from .tensor import Tensor

AMGE_GROUPS = (("sar", (0, 1)), ("opt", (2, 3, 4, 5)), ("dem", (6,)))
PASSTHROUGH = (7, 8)
INIT_STD = 0.02
MASK_NEG = -100.0
CKPT_MAGIC = b"MRPH-CKPT"
CKPT_VERSION = 1

SCOPES = ("encoder", "bgtd_pathway", "surrogate", "decoder", "loss", "total")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d0: int = 96
    d: int = 48
    patch: int = 2
    window: int = 9
    heads: int = 3
    n_blocks: int = 2
    mlp_ratio: int = 4
    shift: int = -1  # -1 means window // 2
    rel_pos_bias: bool = True
    msmp_hidden: int = 0  # 0 means d0
    crops: tuple = (3, 5, 9)
    image: int = SCENE_PX
    in_channels: int = N_CHANNELS
    ablate_bgtd: bool = False
    ablate_mcl_head: bool = False
    ablate_amge: bool = False
    ablate_msmp: bool = False

    def __post_init__(self):
        self.crops = tuple(self.crops)

    @property
    def grid(self):
        return self.image // self.patch

    @property
    def shift_size(self):
        return self.window // 2 if self.shift < 0 else self.shift

    @property
    def hidden(self):
        return self.msmp_hidden or self.d0

    def validate(self):
        if self.d0 <= 0 or self.d <= 0:
            raise ConfigError("feature widths must be positive")
        if self.d0 % 2 or self.d != self.d0 // 2:
            raise ConfigError(f"per-task width d must equal d0/2 (d0={self.d0}, d={self.d})")
        if self.d % 2:
            raise ConfigError("d must be even so the surrogate hidden width d/2 is whole")
        if self.d0 % self.heads:
            raise ConfigError(f"d0={self.d0} is not divisible by heads={self.heads}")
        if self.image % self.patch:
            raise ConfigError(f"image {self.image} is not divisible by patch {self.patch}")
        if self.grid % self.window:
            raise ConfigError(f"token grid {self.grid} is not divisible by window {self.window}")
        if not 0 <= self.shift_size < self.window:
            raise ConfigError("shift must lie in [0, window)")
        if any(c > self.grid or c % 2 == 0 for c in self.crops):
            raise ConfigError(f"crops {self.crops} must be odd and fit the {self.grid}x{self.grid} grid")
        if self.in_channels != N_CHANNELS:
            raise ConfigError(f"the input scene has {N_CHANNELS} channels")
        return self

    def to_dict(self):
        d = asdict(self)
        d["crops"] = list(self.crops)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides):
    """One token per 100 m cell (9x9 tokens, one attention window) for CPU-scale training."""
    base = dict(patch=10)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------- parameter layout

def _amge_hidden(group_size):
    return max(2, group_size // 2)


def param_shapes(cfg):
    """Ordered (name, shape, init) for every weight the configuration uses."""
    out = []
    d0, d = cfg.d0, cfg.d

    def lin(name, fan_in, fan_out):
        out.append((f"{name}.w", (fan_in, fan_out), "normal"))
        out.append((f"{name}.b", (fan_out,), "zeros"))

    def ln(name, width):
        out.append((f"{name}.g", (width,), "ones"))
        out.append((f"{name}.b", (width,), "zeros"))

    if not cfg.ablate_amge:
        for gname, chans in AMGE_GROUPS:
            hid = _amge_hidden(len(chans))
            lin(f"amge.{gname}.fc1", len(chans), hid)
            lin(f"amge.{gname}.fc2", hid, len(chans))
    lin("embed", cfg.in_channels * cfg.patch * cfg.patch, d0)
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}"
        ln(f"{p}.ln1", d0)
        lin(f"{p}.qkv", d0, 3 * d0)
        if cfg.rel_pos_bias:
            out.append((f"{p}.rpb", ((2 * cfg.window - 1) ** 2, cfg.heads), "normal"))
        lin(f"{p}.proj", d0, d0)
        ln(f"{p}.ln2", d0)
        lin(f"{p}.fc1", d0, cfg.mlp_ratio * d0)
        lin(f"{p}.fc2", cfg.mlp_ratio * d0, d0)
    if not cfg.ablate_msmp:
        out.append(("msmp.u", (d0, cfg.hidden), "normal"))
        out.append(("msmp.w", (cfg.hidden, 1), "normal"))
    lin("dec.bf", d0, d)
    ln("dec.ln_bf", d)
    lin("dec.f", d, 1)
    lin("dec.bh", d0, d)
    ln("dec.ln_bh", d)
    if not cfg.ablate_bgtd:
        lin("dec.m", d, d)
        ln("dec.ln_m", d)
        lin("dec.g", 2 * d, d)
    lin("dec.h", d, 1)
    if not cfg.ablate_mcl_head:
        lin("sur.fc1", d, d // 2)
        lin("sur.fc2", d // 2, 1)
    out.append(("loss.log_var_h", (), "zeros"))
    out.append(("loss.log_var_f", (), "zeros"))
    return out


def scope_of(name):
    if name.startswith(("amge.", "embed.", "blocks.", "msmp.")):
        return "encoder"
    if name.startswith(("dec.m.", "dec.ln_m.", "dec.g.")):
        return "bgtd_pathway"
    if name.startswith("sur."):
        return "surrogate"
    if name.startswith("dec."):
        return "decoder"
    if name.startswith("loss."):
        return "loss"
    raise KeyError(name)


def _trunc_normal(rng, shape, std):
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def init_params(cfg, seed):
    params = OrderedDict()
    for name, shape, kind in param_shapes(cfg):
        if kind == "normal":
            rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
            arr = _trunc_normal(rng, shape, INIT_STD)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def count_params(params, scope="total"):
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    return int(sum(p.size for n, p in params.items() if scope == "total" or scope_of(n) == scope))


def param_breakdown(params, prefixes=("dec.", "sur.")):
    """Rows (name, shape, count, scope) for the decoder-side weights."""
    return [(n, tuple(p.shape), int(p.size), scope_of(n)) for n, p in params.items() if n.startswith(prefixes)]


# ---------------------------------------------------------------- window geometry

def window_partition(x, w):
    """(B, G, G, C) -> (B * (G/w)^2, w*w, C)."""
    b, g, _, c = x.shape
    n = g // w
    y = x.reshape(b, n, w, n, w, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b * n * n, w * w, c)


def window_reverse(x, w, g):
    """Inverse of :func:`window_partition`."""
    n = g // w
    c = x.shape[-1]
    b = x.shape[0] // (n * n)
    y = x.reshape(b, n, n, w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b, g, g, c)


def window_partition_array(a, w):
    b, g, _, c = a.shape
    n = g // w
    return a.reshape(b, n, w, n, w, c).transpose(0, 1, 3, 2, 4, 5).reshape(b * n * n, w * w, c)


def window_reverse_array(a, w, g):
    n = g // w
    c = a.shape[-1]
    b = a.shape[0] // (n * n)
    return a.reshape(b, n, n, w, w, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, g, g, c)


def relative_position_index(w):
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return (rel[0] * (2 * w - 1) + rel[1]).astype(np.int64)  # (w*w, w*w)


def shift_region_ids(g, w, s):
    """Region label of each token after a cyclic shift by ``s`` (0 when unshifted)."""
    ids = np.zeros((g, g), dtype=np.int64)
    if s == 0:
        return ids
    bounds = (slice(0, g - w), slice(g - w, g - s), slice(g - s, g))
    k = 0
    for rs in bounds:
        for cs in bounds:
            ids[rs, cs] = k
            k += 1
    return ids


def shift_attention_mask(g, w, s):
    """(nW, N, N) additive mask: 0 within a region, MASK_NEG across regions."""
    ids = shift_region_ids(g, w, s)
    win = window_partition_array(ids[None, :, :, None].astype(np.float64), w)[:, :, 0]
    same = win[:, :, None] == win[:, None, :]
    return np.where(same, 0.0, MASK_NEG)


# ---------------------------------------------------------------- forward pieces

def amge_forward(params, cfg, x, force_weight=None):
    """Per-modality squeeze-and-excitation on the band channels.

    Returns ``(gated, weights)`` where weights is (B, 9) with ones on the
    reserved and mask channels. ``force_weight`` replaces the learned weights
    with a constant.
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != N_CHANNELS:
        raise T.DimensionError(f"expected (B, {N_CHANNELS}, H, W) scenes, got {x.shape}")
    b = x.shape[0]
    if cfg.ablate_amge:
        return x, None
    if force_weight is not None:
        scale = np.ones((b, N_CHANNELS))
        scale[:, :PASSTHROUGH[0]] = force_weight
        return T.mul(x, scale[:, :, None, None]), T.as_tensor(scale)
    pooled = T.mean(x, axis=(2, 3))  # (B, 9)
    parts = []
    for gname, chans in AMGE_GROUPS:
        sl = pooled[:, chans[0]:chans[-1] + 1]
        hid = T.relu(T.linear(sl, params[f"amge.{gname}.fc1.w"], params[f"amge.{gname}.fc1.b"]))
        parts.append(T.sigmoid(T.linear(hid, params[f"amge.{gname}.fc2.w"], params[f"amge.{gname}.fc2.b"])))
    parts.append(np.ones((b, len(PASSTHROUGH))))
    scale = T.concat(parts, axis=1)
    return T.mul(x, T.reshape(scale, (b, N_CHANNELS, 1, 1))), scale


def patch_embed(params, cfg, x):
    b, c, hh, ww = x.shape
    p, g = cfg.patch, cfg.grid
    y = T.reshape(x, (b, c, g, p, g, p))
    y = T.transpose(y, (0, 2, 4, 1, 3, 5))
    y = T.reshape(y, (b, g, g, c * p * p))
    return T.linear(y, params["embed.w"], params["embed.b"])


class _Geometry:
    """Constant index/mask arrays for one configuration."""

    def __init__(self, cfg):
        self.rel_index = relative_position_index(cfg.window).reshape(-1)
        self.mask = shift_attention_mask(cfg.grid, cfg.window, cfg.shift_size)


def window_attention(params, cfg, geo, y, prefix, shifted):
    """Multi-head self-attention inside each (possibly shifted) window. ``y`` is (B, G, G, C)."""
    b, g, _, c = y.shape
    w, heads = cfg.window, cfg.heads
    hd = c // heads
    n = w * w
    s = cfg.shift_size if shifted else 0
    if s:
        y = T.roll(y, (-s, -s), (1, 2))
    win = window_partition(y, w)  # (B*nW, N, C)
    bw = win.shape[0]
    qkv = T.linear(win, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    qkv = T.transpose(T.reshape(qkv, (bw, n, 3, heads, hd)), (2, 0, 3, 1, 4))  # (3, Bw, h, N, hd)
    q = T.scale(qkv[0], hd ** -0.5)
    k = qkv[1]
    v = qkv[2]
    attn = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))  # (Bw, h, N, N)
    if cfg.rel_pos_bias:
        bias = T.take(params[f"{prefix}.rpb"], geo.rel_index, axis=0)  # (N*N, h)
        bias = T.transpose(T.reshape(bias, (n, n, heads)), (2, 0, 1))
        attn = T.add(attn, bias)
    if s:
        nw = geo.mask.shape[0]
        attn = T.reshape(attn, (b, nw, heads, n, n))
        attn = T.add(attn, geo.mask[None, :, None, :, :])
        attn = T.reshape(attn, (bw, heads, n, n))
    attn = T.softmax(attn)
    out = T.matmul(attn, v)  # (Bw, h, N, hd)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bw, n, c))
    out = T.linear(out, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    out = window_reverse(out, w, g)
    if s:
        out = T.roll(out, (s, s), (1, 2))
    return out, attn


def swin_block(params, cfg, geo, t, i, shifted):
    p = f"blocks.{i}"
    y = T.layernorm(t, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
    y, _ = window_attention(params, cfg, geo, y, p, shifted)
    t = T.add(t, y)
    y = T.layernorm(t, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    y = T.gelu(T.linear(y, params[f"{p}.fc1.w"], params[f"{p}.fc1.b"]))
    y = T.linear(y, params[f"{p}.fc2.w"], params[f"{p}.fc2.b"])
    return T.add(t, y)


def backbone_forward(params, cfg, x, geo=None, shifts=None):
    """Gated scenes (B, 9, H, W) -> token map (B, G, G, d0). Odd blocks use shifted windows."""
    geo = geo or _Geometry(cfg)
    t = patch_embed(params, cfg, x)
    for i in range(cfg.n_blocks):
        shifted = (i % 2 == 1) if shifts is None else shifts[i]
        t = swin_block(params, cfg, geo, t, i, shifted)
    return t


def crop_bounds(grid, size):
    c = grid // 2
    return c - size // 2, c + size // 2 + 1


def msmp_forward(params, cfg, tokens, force_alpha=None):
    """Centre crops -> pooled vectors -> attention-weighted fusion. Returns (h, alpha)."""
    g = tokens.shape[1]
    vecs = []
    for size in cfg.crops:
        lo, hi = crop_bounds(g, size)
        vecs.append(T.mean(tokens[:, lo:hi, lo:hi, :], axis=(1, 2)))
    v = T.stack(vecs, axis=1)  # (B, K, C)
    b, kk = v.shape[0], v.shape[1]
    if force_alpha is not None or cfg.ablate_msmp:
        alpha_arr = np.full((b, kk), 1.0 / kk) if force_alpha is None else np.broadcast_to(force_alpha, (b, kk))
        alpha = T.as_tensor(np.array(alpha_arr, dtype=np.float64))
    else:
        scores = T.matmul(T.tanh(T.matmul(v, params["msmp.u"])), params["msmp.w"])  # (B, K, 1)
        alpha = T.softmax(T.reshape(scores, (b, kk)))
    h = T.tsum(T.mul(v, T.reshape(alpha, (b, kk, 1))), axis=1)
    return h, alpha


@dataclass
class ModelOutput:
    h_pred: Tensor
    lambda_pred: Tensor
    h_from_bf: Tensor
    gate: Tensor
    h: Tensor
    b_f: Tensor
    b_h: Tensor
    b_h_tilde: Tensor
    m: Tensor
    alpha: Tensor = None


def _branch(params, name, x):
    y = T.linear(x, params[f"dec.{name}.w"], params[f"dec.{name}.b"])
    return T.gelu(T.layernorm(y, params[f"dec.ln_{name}.g"], params[f"dec.ln_{name}.b"]))


def bgtd_forward(params, cfg, h, gate_override=None):
    """Task branches, footprint-guided gate, heads and surrogate from the shared vector ``h``."""
    b = h.shape[0]
    b_f = _branch(params, "bf", h)
    lam = T.sigmoid(T.linear(b_f, params["dec.f.w"], params["dec.f.b"]))
    b_h = _branch(params, "bh", h)
    m = g = None
    if cfg.ablate_bgtd:
        b_tilde = b_h
    else:
        m = _branch(params, "m", b_f)
        if gate_override is None:
            g = T.sigmoid(T.linear(T.concat([b_h, m], axis=-1), params["dec.g.w"], params["dec.g.b"]))
        else:
            g = T.as_tensor(np.array(np.broadcast_to(gate_override, (b, cfg.d)), dtype=np.float64))
        b_tilde = T.add(T.mul(g, b_h), T.mul(T.sub(1.0, g), m))
    h_pred = T.relu(T.linear(b_tilde, params["dec.h.w"], params["dec.h.b"]))
    h_from_bf = None
    if not cfg.ablate_mcl_head:
        s = T.gelu(T.linear(b_f, params["sur.fc1.w"], params["sur.fc1.b"]))
        h_from_bf = T.reshape(T.relu(T.linear(s, params["sur.fc2.w"], params["sur.fc2.b"])), (b,))
    return ModelOutput(T.reshape(h_pred, (b,)), T.reshape(lam, (b,)), h_from_bf, g, h,
                       b_f, b_h, b_tilde, m)


class MorphoFormer:
    def __init__(self, cfg=None, seed=0, params=None):
        self.cfg = (cfg or ModelConfig()).validate()
        self.seed = seed
        self.params = params if params is not None else init_params(self.cfg, seed)
        self._geo = _Geometry(self.cfg)

    def forward(self, x, gate_override=None, amge_weight=None, shifts=None):
        x = T.as_tensor(x)
        gated, _ = amge_forward(self.params, self.cfg, x, force_weight=amge_weight)
        tokens = backbone_forward(self.params, self.cfg, gated, self._geo, shifts)
        h, alpha = msmp_forward(self.params, self.cfg, tokens)
        out = bgtd_forward(self.params, self.cfg, h, gate_override)
        out.alpha = alpha
        return out

    __call__ = forward

    def count(self, scope="total"):
        return count_params(self.params, scope)

    def trainable(self):
        return list(self.params.values())

    def state(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state does not match model parameters: {sorted(missing)}")
        for n, arr in state.items():
            if self.params[n].shape != np.shape(arr):
                raise T.DimensionError(f"{n}: shape {np.shape(arr)} != {self.params[n].shape}")
            self.params[n].data[...] = arr

    def predict(self, x, batch_size=64):
        """Inference without a tape; returns a dict of numpy arrays."""
        keys = ("h_pred", "lambda_pred", "h_from_bf", "gate")
        chunks = {k: [] for k in keys}
        for i in range(0, len(x), batch_size):
            out = self.forward(x[i:i + batch_size])
            for k in keys:
                val = getattr(out, k)
                if val is not None:
                    chunks[k].append(val.data)
        return {k: np.concatenate(v) if v else None for k, v in chunks.items()}


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(model, meta=None):
    header = {"config": model.cfg.to_dict(), "seed": model.seed}
    header.update(meta or {})
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, bytes([CKPT_VERSION]), struct.pack("<I", len(hbytes)), hbytes,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim)
                     + struct.pack(f"<{p.ndim}I", *p.shape) + p.data.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model, path, meta=None):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model, meta))


def parse_checkpoint(blob):
    from .dataset import FormatError, VersionError
    if len(blob) < len(CKPT_MAGIC) + 9 or not blob.startswith(CKPT_MAGIC):
        raise FormatError("not a checkpoint: bad magic")
    if blob[len(CKPT_MAGIC)] != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {blob[len(CKPT_MAGIC)]}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if crc != zlib.crc32(body) & 0xFFFFFFFF:
        raise FormatError("checkpoint checksum mismatch")
    pos = len(CKPT_MAGIC) + 1
    (hlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    state = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(body):
        raise FormatError(f"checkpoint has {len(body) - pos} trailing bytes")
    return header, state


def load_checkpoint(path):
    with open(path, "rb") as f:
        header, state = parse_checkpoint(f.read())
    model = MorphoFormer(ModelConfig.from_dict(header["config"]), seed=header.get("seed", 0))
    model.load_state(state)
    return model, header
