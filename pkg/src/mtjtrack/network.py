"""Attention U-Net that maps a normalized frame to a junction probability map.

The encoder halves the spatial resolution per level while doubling filters;
the decoder mirrors it with nearest upsampling plus convolution, and skip
connections pass through multiplicative attention gates before concatenation.
The final 1x1 convolution with a sigmoid yields per-pixel values in (0, 1).

Weights live in a plain ordered name->array mapping so that gradients and
optimizer state can mirror the structure exactly.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import _rng, backend

WEIGHTS_MAGIC = b"MTJW"
WEIGHTS_FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    """Raised when a weights file does not match its declared manifest."""


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_filters: int = 64
    input_w: int = 256
    input_h: int = 128
    kernel_size: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        div = 1 << self.depth
        if self.input_w % div or self.input_h % div:
            raise ValueError(
                f"input {self.input_w}x{self.input_h} not divisible by 2^depth={div}"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def channel_counts(config):
    """Filter counts per level: encoder levels 0..depth-1, then the bottleneck."""
    return [config.base_filters * (1 << i) for i in range(config.depth + 1)]


def expected_shapes(config):
    """Ordered parameter manifest (name -> shape) for a configuration."""
    k = config.kernel_size
    chans = channel_counts(config)
    shapes = {}

    def conv(name, cout, cin, ksize):
        shapes[f"{name}.w"] = (cout, cin, ksize, ksize)
        shapes[f"{name}.b"] = (cout,)

    cin = 1
    for i in range(config.depth):
        conv(f"enc{i}.conv1", chans[i], cin, k)
        conv(f"enc{i}.conv2", chans[i], chans[i], k)
        cin = chans[i]
    conv("bott.conv1", chans[-1], chans[-2], k)
    conv("bott.conv2", chans[-1], chans[-1], k)
    for i in reversed(range(config.depth)):
        ci, cg = chans[i], chans[i + 1]
        cint = max(ci // 2, 1)
        conv(f"dec{i}.up", ci, cg, k)
        conv(f"att{i}.theta_x", cint, ci, 1)
        conv(f"att{i}.theta_g", cint, cg, 1)
        conv(f"att{i}.psi", 1, cint, 1)
        conv(f"dec{i}.conv1", ci, 2 * ci, k)
        conv(f"dec{i}.conv2", ci, ci, k)
    conv("head", 1, chans[0], 1)
    return shapes


class ModelWeights:
    """Ordered parameter container tied to a NetworkConfig."""

    def __init__(self, config, tensors):
        expected = expected_shapes(config)
        if list(tensors.keys()) != list(expected.keys()):
            raise ValueError("weight names do not match the configuration manifest")
        for name, arr in tensors.items():
            if tuple(arr.shape) != expected[name]:
                raise ValueError(
                    f"{name}: shape {arr.shape} != expected {expected[name]}"
                )
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype):
        return ModelWeights(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def copy(self):
        return ModelWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_params(self):
        return sum(v.size for v in self.tensors.values())

    def all_finite(self):
        return all(np.isfinite(v).all() for v in self.tensors.values())


def init_weights(config):
    """Fan-in scaled uniform kernels, zero biases, deterministic in rng_seed."""
    rng = _rng.substream(config.rng_seed, _rng.INIT)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            limit = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return ModelWeights(config, tensors)


def _relu(x):
    return np.maximum(x, 0)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv_relu(w, b, x, cache, name):
    pre = backend.conv2d_forward(x, w, b)
    if cache is not None:
        cache[name + ".x"] = x
        cache[name + ".mask"] = pre > 0
    return _relu(pre)


def _attention_forward(wt, i, skip, gate, cache):
    wx, bx = wt[f"att{i}.theta_x.w"], wt[f"att{i}.theta_x.b"]
    wg, bg = wt[f"att{i}.theta_g.w"], wt[f"att{i}.theta_g.b"]
    wp, bp = wt[f"att{i}.psi.w"], wt[f"att{i}.psi.b"]
    xs = np.ascontiguousarray(skip[:, :, ::2, ::2])
    q = backend.conv2d_forward(xs, wx, bx) + backend.conv2d_forward(gate, wg, bg)
    r = _relu(q)
    coeff = _sigmoid(backend.conv2d_forward(r, wp, bp))
    coeff_up = backend.upsample2_forward(coeff)
    out = skip * coeff_up
    if cache is not None:
        cache[f"att{i}.xs"] = xs
        cache[f"att{i}.qmask"] = q > 0
        cache[f"att{i}.r"] = r
        cache[f"att{i}.coeff"] = coeff
        cache[f"att{i}.coeff_up"] = coeff_up
        cache[f"att{i}.skip"] = skip
        cache[f"att{i}.gate"] = gate
    return out


def attention_gate(skip, gating, theta_x_w, theta_x_b, theta_g_w, theta_g_b, psi_w, psi_b):
    """Additive attention on a skip connection (NCHW batches).

    The skip features are projected with a stride-2 1x1 convolution to the
    gating resolution, summed with the projected gating signal, passed through
    a rectifier and a 1x1 projection to scalar coefficients in (0,1), which
    are upsampled and multiplied into the skip features.
    """
    if skip.shape[2] != 2 * gating.shape[2] or skip.shape[3] != 2 * gating.shape[3]:
        raise ValueError(
            f"gating {gating.shape} must be half the skip resolution {skip.shape}"
        )
    xs = np.ascontiguousarray(skip[:, :, ::2, ::2])
    q = backend.conv2d_forward(xs, theta_x_w, theta_x_b) + backend.conv2d_forward(
        gating, theta_g_w, theta_g_b
    )
    coeff = _sigmoid(backend.conv2d_forward(_relu(q), psi_w, psi_b))
    return skip * backend.upsample2_forward(coeff)


def _forward_batch(wt, x, cache=None):
    """Forward pass on an NCHW batch; returns the (n,1,h,w) probability map."""
    cfg = wt.config
    t = wt.tensors
    skips = []
    h = x
    for i in range(cfg.depth):
        h = _conv_relu(t[f"enc{i}.conv1.w"], t[f"enc{i}.conv1.b"], h, cache, f"enc{i}.conv1")
        h = _conv_relu(t[f"enc{i}.conv2.w"], t[f"enc{i}.conv2.b"], h, cache, f"enc{i}.conv2")
        skips.append(h)
        h, idx = backend.maxpool2_forward(h)
        if cache is not None:
            cache[f"pool{i}.idx"] = idx
    h = _conv_relu(t["bott.conv1.w"], t["bott.conv1.b"], h, cache, "bott.conv1")
    h = _conv_relu(t["bott.conv2.w"], t["bott.conv2.b"], h, cache, "bott.conv2")
    for i in reversed(range(cfg.depth)):
        up_in = backend.upsample2_forward(h)
        up = _conv_relu(t[f"dec{i}.up.w"], t[f"dec{i}.up.b"], up_in, cache, f"dec{i}.up")
        gated = _attention_forward(t, i, skips[i], h, cache)
        cat = np.concatenate([gated, up], axis=1)
        h = _conv_relu(t[f"dec{i}.conv1.w"], t[f"dec{i}.conv1.b"], cat, cache, f"dec{i}.conv1")
        h = _conv_relu(t[f"dec{i}.conv2.w"], t[f"dec{i}.conv2.b"], h, cache, f"dec{i}.conv2")
    pre = backend.conv2d_forward(h, t["head.w"], t["head.b"])
    out = _sigmoid(pre)
    if cache is not None:
        cache["head.x"] = h
        cache["out"] = out
    return out


def forward(weights, frame):
    """Predict the probability map for one normalized frame (h, w)."""
    cfg = weights.config
    frame = np.asarray(frame)
    if frame.shape != (cfg.input_h, cfg.input_w):
        raise ValueError(
            f"frame shape {frame.shape} != configured {(cfg.input_h, cfg.input_w)}"
        )
    if not weights.all_finite():
        raise ValueError("weights contain non-finite values")
    x = frame[None, None].astype(weights.dtype, copy=False)
    return _forward_batch(weights, x)[0, 0]


def _bce_forward_grad(p, y, w0, clip_eps):
    """Pixel-mean weighted BCE and its gradient w.r.t. the post-sigmoid map.

    The weight is w0 where the soft target is below 0.5 and 1 elsewhere.
    With clip_eps > 0 predictions are clamped to [clip_eps, 1-clip_eps]
    before the logs; clamped pixels get zero gradient.
    """
    w = np.where(y < 0.5, p.dtype.type(w0), p.dtype.type(1.0))
    if clip_eps > 0:
        pc = np.clip(p, clip_eps, 1.0 - clip_eps)
        live = (p > clip_eps) & (p < 1.0 - clip_eps)
    else:
        pc = p
        live = True
    loss = float(np.mean(w * -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))
    dp = w * (pc - y) / (pc * (1.0 - pc)) / p.size
    dp = np.where(live, dp, 0.0).astype(p.dtype)
    return loss, dp


def _attention_backward(t, i, cache, dout, grads):
    """Backward through one attention gate; returns (dskip, dgate)."""
    skip = cache[f"att{i}.skip"]
    coeff_up = cache[f"att{i}.coeff_up"]
    dskip = dout * coeff_up
    dcoeff_up = (dout * skip).sum(axis=1, keepdims=True)
    dcoeff = backend.upsample2_backward(dcoeff_up)
    coeff = cache[f"att{i}.coeff"]
    dpsi_pre = dcoeff * coeff * (1.0 - coeff)
    dr, dwp, dbp = backend.conv2d_backward(
        cache[f"att{i}.r"], t[f"att{i}.psi.w"], dpsi_pre
    )
    grads[f"att{i}.psi.w"] = dwp
    grads[f"att{i}.psi.b"] = dbp
    dq = dr * cache[f"att{i}.qmask"]
    dxs, dwx, dbx = backend.conv2d_backward(
        cache[f"att{i}.xs"], t[f"att{i}.theta_x.w"], dq
    )
    grads[f"att{i}.theta_x.w"] = dwx
    grads[f"att{i}.theta_x.b"] = dbx
    dgate, dwg, dbg = backend.conv2d_backward(
        cache[f"att{i}.gate"], t[f"att{i}.theta_g.w"], dq
    )
    grads[f"att{i}.theta_g.w"] = dwg
    grads[f"att{i}.theta_g.b"] = dbg
    dskip[:, :, ::2, ::2] += dxs
    return dskip, dgate


def _backward_batch(wt, cache, dz):
    """Reverse pass from the pre-sigmoid head gradient; returns grads by name.

    Decoder levels are unwound shallow-to-deep first (accumulating the skip
    gradients), then the bottleneck, then the encoder deep-to-shallow where
    each level sums its pooled-path and skip-path gradients.
    """
    cfg = wt.config
    t = wt.tensors
    grads = {}

    def conv_bwd(name, dout):
        dpre = dout * cache[name + ".mask"]
        dx, dw, db = backend.conv2d_backward(cache[name + ".x"], t[name + ".w"], dpre)
        grads[name + ".w"] = dw
        grads[name + ".b"] = db
        return dx

    dh, grads["head.w"], grads["head.b"] = backend.conv2d_backward(
        cache["head.x"], t["head.w"], dz
    )
    dskips = [None] * cfg.depth
    for i in range(cfg.depth):
        dh = conv_bwd(f"dec{i}.conv2", dh)
        dcat = conv_bwd(f"dec{i}.conv1", dh)
        ci = cache[f"att{i}.skip"].shape[1]
        dgated = np.ascontiguousarray(dcat[:, :ci])
        dup = np.ascontiguousarray(dcat[:, ci:])
        dup_in = conv_bwd(f"dec{i}.up", dup)
        dh_deeper = backend.upsample2_backward(dup_in)
        dskip, dgate = _attention_backward(t, i, cache, dgated, grads)
        dskips[i] = dskip
        dh = dh_deeper + dgate
    dh = conv_bwd("bott.conv2", dh)
    dh = conv_bwd("bott.conv1", dh)
    for i in reversed(range(cfg.depth)):
        de = backend.maxpool2_backward(dh, cache[f"pool{i}.idx"]) + dskips[i]
        dh = conv_bwd(f"enc{i}.conv2", de)
        dh = conv_bwd(f"enc{i}.conv1", dh)
    return {name: grads[name] for name in wt.tensors}


def loss_and_gradients(weights, x, target, w0=0.1, clip_eps=1e-7):
    """Weighted-BCE loss and parameter gradients for an NCHW batch."""
    cache = {}
    out = _forward_batch(weights, x, cache)
    loss, dp = _bce_forward_grad(out, target, w0, clip_eps)
    dz = dp * out * (1.0 - out)
    grads = _backward_batch(weights, cache, dz)
    return loss, grads


def backward(weights, frame, target, w0=0.1, clip_eps=1e-7):
    """Analytic gradients of the training loss for one frame/target pair."""
    cfg = weights.config
    frame = np.asarray(frame)
    target = np.asarray(target)
    if frame.shape != (cfg.input_h, cfg.input_w):
        raise ValueError(
            f"frame shape {frame.shape} != configured {(cfg.input_h, cfg.input_w)}"
        )
    if target.shape != frame.shape:
        raise ValueError(f"target shape {target.shape} != frame shape {frame.shape}")
    if not weights.all_finite():
        raise ValueError("weights contain non-finite values")
    x = frame[None, None].astype(weights.dtype, copy=False)
    y = target[None, None].astype(weights.dtype, copy=False)
    _, grads = loss_and_gradients(weights, x, y, w0, clip_eps)
    return grads


def save_weights(weights, path):
    """Write the .mtjw container: magic, JSON header, f32 tensors in order."""
    header = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "config": weights.config.to_dict(),
        "manifest": [
            {"name": k, "shape": list(v.shape)} for k, v in weights.tensors.items()
        ],
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in weights.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path):
    """Read a .mtjw container, validating every tensor shape against the header."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHTS_MAGIC:
            raise WeightsFormatError(f"{path}: not a weights file (magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != WEIGHTS_FORMAT_VERSION:
            raise WeightsFormatError(f"{path}: unsupported format version")
        config = NetworkConfig.from_dict(header["config"])
        expected = expected_shapes(config)
        manifest = header["manifest"]
        if [m["name"] for m in manifest] != list(expected.keys()):
            raise WeightsFormatError(f"{path}: manifest does not match configuration")
        tensors = {}
        for m in manifest:
            shape = tuple(m["shape"])
            if shape != expected[m["name"]]:
                raise WeightsFormatError(
                    f"{path}: {m['name']} shape {shape} != expected {expected[m['name']]}"
                )
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise WeightsFormatError(f"{path}: truncated tensor {m['name']}")
            tensors[m["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise WeightsFormatError(f"{path}: trailing bytes after manifest tensors")
    return ModelWeights(config, tensors)
