"""Multi-scale spectral-spatial magnification network.

Pipeline for an LR image and magnification factors (l_hat, m_hat):

1. a channel-attention residual extractor maps the image to features F;
2. a small dense net turns (l_hat, m_hat) into per-channel k x k kernels W_R,
   and F_R = depthwise(F, W_R) + F;
3. for every output pixel (w, h) a second dense net turns the position vector
   (frac(w/m_hat), frac(h/m_hat), l_hat) into a C x k x k kernel that is
   applied to the neighbourhood of F_R at (floor(w/m_hat), floor(h/m_hat)).

One parameter set serves every factor pair.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .frames import OctImage, pixels_of

CHECKPOINT_MAGIC = b"MSSM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ExtractorConfig:
    """Feature extractor shape.

    ``input_mean`` and ``input_scale`` standardise intensities on the way in
    and undo it on the way out, like the mean-shift layers of RCAN.
    """

    fC: int = 16
    n_groups: int = 2
    n_blocks_per_group: int = 2
    attention_reduction: int = 4
    k: int = 3
    input_mean: float = 0.0
    input_scale: float = 1.0

    def validate(self):
        if not self.input_scale > 0:
            raise ValueError(f"input_scale must be positive, got {self.input_scale}")
        if self.k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.k}")
        if self.attention_reduction < 1 or self.fC % self.attention_reduction:
            raise ValueError(f"fC={self.fC} must be divisible by attention_reduction={self.attention_reduction}")
        if self.fC < 1 or self.n_groups < 0 or self.n_blocks_per_group < 0:
            raise ValueError("fC must be positive and group/block counts non-negative")


@dataclass
class MetaConfig:
    """Hidden widths of the two weight-prediction networks.

    ``output_init_gain`` scales the initial output-layer weights of both, so
    predicted kernels start close to zero.
    """

    restore_hidden: int = 64
    upscale_hidden: int = 256
    output_init_gain: float = 0.01


@dataclass
class PositionVector:
    frac_w: float
    frac_h: float
    lhat: float

    def as_tuple(self):
        return (self.frac_w, self.frac_h, self.lhat)


def _split(pos, mhat):
    """floor(pos/m) and frac(pos/m), the fraction taken from the remainder.

    Computing (pos - q*m)/m instead of pos/m - q makes every pixel with the
    same remainder share one bit-identical fraction, so integer scales give
    exactly m^2 distinct position vectors.
    """
    pos = np.asarray(pos, dtype=np.float64)
    q = np.floor(pos / mhat)
    r = pos - q * mhat
    wrap = r >= mhat
    q, r = np.where(wrap, q + 1, q), np.where(wrap, r - mhat, r)
    r = np.maximum(r, 0.0)
    return q.astype(np.intp), r / mhat


def compute_position_vector(w, h, mhat, lhat):
    """(w/m - floor(w/m), h/m - floor(h/m), l_hat)."""
    _, fw = _split(w, mhat)
    _, fh = _split(h, mhat)
    return PositionVector(float(fw), float(fh), lhat)


def _fractions(n_out, mhat):
    q, frac = _split(np.arange(n_out), mhat)
    return frac, q


def output_shape(in_h, in_w, mhat):
    return int(math.floor(mhat * in_h)), int(math.floor(mhat * in_w))


def restore_features(features, weights):
    """F_R = depthwise(F, W_R) + F."""
    features, weights = nx.as_tensor(features), nx.as_tensor(weights)
    if features.shape[1] != weights.shape[0]:
        raise ValueError(f"features have {features.shape[1]} channels, W_R has {weights.shape[0]}")
    return nx.add(nx.depthwise_conv2d(features, weights), features)


@dataclass
class _Layout:
    """Parameter names and shapes implied by a config."""

    shapes: dict = field(default_factory=dict)
    fan_in: dict = field(default_factory=dict)


def _layout(ext: ExtractorConfig, meta: MetaConfig):
    lay = _Layout()
    C, k = ext.fC, ext.k
    D = C * k * k

    def conv(name, cout, cin):
        lay.shapes[f"{name}.weight"] = (cout, cin, k, k)
        lay.fan_in[f"{name}.weight"] = cin * k * k
        lay.shapes[f"{name}.bias"] = (cout,)

    def fc(name, nout, nin):
        lay.shapes[f"{name}.weight"] = (nout, nin)
        lay.fan_in[f"{name}.weight"] = nin
        lay.shapes[f"{name}.bias"] = (nout,)

    conv("head", C, 1)
    for g in range(ext.n_groups):
        for b in range(ext.n_blocks_per_group):
            pre = f"groups.{g}.blocks.{b}"
            conv(f"{pre}.conv1", C, C)
            conv(f"{pre}.conv2", C, C)
            fc(f"{pre}.attention.fc1", C // ext.attention_reduction, C)
            fc(f"{pre}.attention.fc2", C, C // ext.attention_reduction)
        conv(f"groups.{g}.conv", C, C)
    conv("trunk", C, C)
    fc("restore.fc1", meta.restore_hidden, 2)
    fc("restore.fc2", D, meta.restore_hidden)
    fc("upscale.fc1", meta.upscale_hidden, 3)
    fc("upscale.fc2", D, meta.upscale_hidden)
    lay.shapes["upscale.bias_out"] = (1, 1, 1, 1)
    return lay


def _as_batch(x):
    if isinstance(x, nx.Tensor):
        return x
    arr = np.asarray(pixels_of(x))
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return nx.Tensor(arr)


class MSSMN:
    """Model parameters plus the forward computation.

    Parameters are float32 by default; pass ``dtype=np.float64`` (or call
    :meth:`astype`) for gradient checking.
    """

    def __init__(self, extractor=None, meta=None, seed=0, dtype=np.float32):
        self.extractor = ExtractorConfig() if extractor is None else extractor
        self.meta = MetaConfig() if meta is None else meta
        self.extractor.validate()
        self.seed = seed
        self.adam_step = 0
        rng = np.random.default_rng(seed)
        lay = _layout(self.extractor, self.meta)
        self.params = {}
        for name, shape in lay.shapes.items():
            if name in lay.fan_in:
                value = nx.init_uniform(rng, shape, lay.fan_in[name], dtype)
                if name in ("restore.fc2.weight", "upscale.fc2.weight"):
                    value = (value * self.meta.output_init_gain).astype(dtype)
            else:
                value = np.zeros(shape, dtype=dtype)
            self.params[name] = nx.Parameter(name, value)

    # -- bookkeeping -------------------------------------------------------

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def config_dict(self):
        return {"extractor": asdict(self.extractor), "meta": asdict(self.meta), "seed": self.seed}

    def state_dict(self):
        return {name: (p.data.copy(), p.m.copy(), p.v.copy()) for name, p in self.params.items()}

    def load_state_dict(self, state, adam_step=None):
        for name, (value, m, v) in state.items():
            p = self.params[name]
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = np.array(value, dtype=p.dtype)
            p.m = np.array(m, dtype=p.dtype)
            p.v = np.array(v, dtype=p.dtype)
            p.grad = np.zeros_like(p.data)
        if adam_step is not None:
            self.adam_step = adam_step

    def astype(self, dtype):
        other = MSSMN(self.extractor, self.meta, self.seed, dtype)
        other.load_state_dict(self.state_dict(), self.adam_step)
        return other

    def copy(self):
        return self.astype(self.dtype)

    def _p(self, name):
        return self.params[name]

    def _conv(self, x, name):
        return nx.conv2d(x, self._p(f"{name}.weight"), self._p(f"{name}.bias"))

    def _fc(self, x, name):
        return nx.dense(x, self._p(f"{name}.weight"), self._p(f"{name}.bias"))

    # -- network -----------------------------------------------------------

    def _affine(self, x, scale, shift):
        if scale == 1 and shift == 0:
            return x
        if not x.requires_grad:
            return nx.Tensor((x.data * scale + shift).astype(self.dtype))
        one = (1,) * len(x.shape)
        return nx.add(nx.mul(x, nx.Tensor(np.full(one, scale, self.dtype))),
                      nx.Tensor(np.full(one, shift, self.dtype)))

    def _standardise(self, x):
        e = self.extractor
        return self._affine(x, 1.0 / e.input_scale, -e.input_mean / e.input_scale)

    def _rcab(self, x, pre):
        y = self._conv(nx.relu(self._conv(x, f"{pre}.conv1")), f"{pre}.conv2")
        a = nx.relu(self._fc(nx.global_average_pool(y), f"{pre}.attention.fc1"))
        a = nx.sigmoid(self._fc(a, f"{pre}.attention.fc2"))
        y = nx.mul(y, nx.reshape(a, a.shape + (1, 1)))
        return nx.add(x, y)

    def extract_features(self, image):
        """B x 1 x H x W (or an OctImage / 2-D array) -> B x fC x H x W."""
        x = _as_batch(image)
        k = self.extractor.k
        if x.shape[2] < k or x.shape[3] < k:
            raise ValueError(f"image {x.shape[2:]} is smaller than the {k}x{k} kernel")
        x = nx.Tensor(x.data.astype(self.dtype, copy=False)) if not x.requires_grad else x
        x = self._standardise(x)
        shallow = self._conv(x, "head")
        y = shallow
        for g in range(self.extractor.n_groups):
            group_in = y
            for b in range(self.extractor.n_blocks_per_group):
                y = self._rcab(y, f"groups.{g}.blocks.{b}")
            y = nx.add(group_in, self._conv(y, f"groups.{g}.conv"))
        return nx.add(shallow, self._conv(y, "trunk"))

    def predict_restoration_weights(self, lhat, mhat):
        """(l_hat, m_hat) -> W_R of shape fC x k x k."""
        v = nx.Tensor(np.array([[lhat, mhat]], dtype=self.dtype))
        h = nx.relu(self._fc(v, "restore.fc1"))
        out = self._fc(h, "restore.fc2")
        C, k = self.extractor.fC, self.extractor.k
        return nx.reshape(out, (C, k, k))

    def predict_upscale_kernels(self, vectors):
        """n x 3 position vectors -> n x (fC*k*k) kernels."""
        v = nx.Tensor(np.asarray(vectors, dtype=self.dtype).reshape(-1, 3))
        h = nx.relu(self._fc(v, "upscale.fc1"))
        return self._fc(h, "upscale.fc2")

    def kernel_grid(self, out_h, out_w, mhat, lhat):
        """Distinct position vectors and the per-pixel index into them."""
        fh, rows = _fractions(out_h, mhat)
        fw, cols = _fractions(out_w, mhat)
        uh, ih = np.unique(fh, return_inverse=True)
        uw, iw = np.unique(fw, return_inverse=True)
        grid_w, grid_h = np.meshgrid(uw, uh)
        vectors = np.stack([grid_w.ravel(), grid_h.ravel(), np.full(grid_w.size, lhat)], axis=1)
        kernel_index = ih.reshape(-1)[:, None] * len(uw) + iw.reshape(-1)[None, :]
        return vectors, kernel_index, rows, cols

    def map_features(self, restored, mhat, lhat):
        """F_R (B x fC x inH x inW) -> B x 1 x floor(m*inH) x floor(m*inW), unclamped."""
        restored = nx.as_tensor(restored)
        if mhat < 1:
            raise ValueError(f"m_hat must be >= 1, got {mhat}")
        out_h, out_w = output_shape(restored.shape[2], restored.shape[3], mhat)
        if out_h < 1 or out_w < 1:
            raise ValueError(f"output size {out_h}x{out_w} is empty")
        vectors, kernel_index, rows, cols = self.kernel_grid(out_h, out_w, mhat, lhat)
        kernels = self.predict_upscale_kernels(vectors)
        out = nx.pixel_kernel_conv(restored, kernels, rows, cols, kernel_index, self.extractor.k)
        return nx.add(out, self._p("upscale.bias_out"))

    def forward(self, image, lhat, mhat):
        """Unclamped reconstruction tensor, B x 1 x floor(m*H) x floor(m*W)."""
        if lhat < 1 or mhat < 1:
            raise ValueError(f"magnification factors must be >= 1, got ({lhat}, {mhat})")
        features = self.extract_features(image)
        restored = restore_features(features, self.predict_restoration_weights(lhat, mhat))
        out = self.map_features(restored, mhat, lhat)
        return self._affine(out, self.extractor.input_scale, self.extractor.input_mean)

    __call__ = forward

    def reconstruct(self, image, lhat, mhat):
        """Inference on one image: clamped to [0, 1] and wrapped as an OctImage."""
        out = np.clip(self.forward(image, lhat, mhat).data[0, 0], 0.0, 1.0).astype(np.float32)
        kw = {}
        if isinstance(image, OctImage):
            kw = dict(axial_pixel_pitch=image.axial_pixel_pitch / mhat,
                      lateral_pixel_pitch=image.lateral_pixel_pitch / mhat,
                      intensity_range=image.intensity_range)
        return OctImage(out, provenance="reconstructed", factors=(lhat, mhat), **kw)


def forward(image, lhat, mhat, model: MSSMN):
    return model.forward(image, lhat, mhat)


# ---------------------------------------------------------------------------
# checkpoints
#
# b"MSSM" | u32 version | u32 len | JSON config | u32 n_records |
#   records: u16 name_len | name | u8 ndim | ndim * u32 | f32 payload


def save_model(model: MSSMN, path):
    """Write parameters and Adam moments as float32 records."""
    records = []
    for name, p in model.params.items():
        records += [(name, p.data), (f"{name}#m", p.m), (f"{name}#v", p.v)]
    header = dict(model.config_dict(), adam_step=model.adam_step, n_params=model.parameter_count())
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), arr.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return Path(path)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_model(path) -> MSSMN:
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an MSSM checkpoint (bad magic)")
    version, blob_len = rd.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(rd.take(blob_len))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt config blob") from exc
    model = MSSMN(ExtractorConfig(**header["extractor"]), MetaConfig(**header["meta"]),
                  seed=header.get("seed", 0), dtype=np.float32)
    model.adam_step = int(header.get("adam_step", 0))
    (n_records,) = rd.unpack("<I")
    seen = set()
    for _ in range(n_records):
        name_len, ndim = rd.unpack("<HB")
        name = rd.take(name_len).decode()
        shape = rd.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(rd.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        base, _, slot = name.partition("#")
        if base not in model.params:
            raise CheckpointError(f"{path}: unexpected parameter {base!r} for this config")
        p = model.params[base]
        if tuple(shape) != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {tuple(shape)}, config implies {p.shape}")
        if slot == "":
            p.data = arr
        elif slot == "m":
            p.m = arr
        elif slot == "v":
            p.v = arr
        else:
            raise CheckpointError(f"{path}: unknown record slot {name!r}")
        seen.add(name)
    missing = [n for n in model.params if n not in seen]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:3]}")
    if rd.pos != len(rd.raw):
        raise CheckpointError(f"{path}: trailing bytes after records")
    for p in model.params.values():
        p.grad = np.zeros_like(p.data)
    return model
