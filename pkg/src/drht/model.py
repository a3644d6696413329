"""The two encoder-decoder networks and the domain transfer between them."""

from dataclasses import asdict, dataclass, field
import math

import numpy as np

from . import numerics as nx
from .numerics import BatchNormState, Tensor, ShapeError


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "deconv"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    has_bn: bool = True
    has_act: bool = True

    def weight_shape(self):
        k = self.kernel
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, k, k)
        return (self.in_channels, self.out_channels, k, k)

    def param_count(self):
        n = self.out_channels * self.in_channels * self.kernel ** 2 + self.out_channels
        if self.has_bn:
            n += 2 * self.out_channels
        return n


@dataclass(frozen=True)
class NetworkSpec:
    """Encoder/decoder layer lists plus the skip wiring.

    ``skip_pairs`` holds (encoder index, decoder index): the encoder layer's
    output is added to that decoder layer's output. The deepest encoder layer
    has no pair because its output *is* the decoder input.
    """

    encoder: tuple
    decoder: tuple
    skip_pairs: tuple
    residual_io: bool = True

    @property
    def depth(self):
        return len(self.encoder)

    @property
    def size_multiple(self):
        return 2 ** (self.depth - 1)

    def layer_names(self):
        return [f"enc{i}" for i in range(len(self.encoder))] + [
            f"dec{i}" for i in range(len(self.decoder))
        ]

    def layers(self):
        return list(zip(self.layer_names(), list(self.encoder) + list(self.decoder)))

    def param_count(self):
        return sum(layer.param_count() for _, layer in self.layers())

    def validate(self):
        enc, dec = self.encoder, self.decoder
        if not enc or len(enc) != len(dec):
            raise ValueError("encoder and decoder must be non-empty and of equal depth")
        if any(l.kind != "conv" for l in enc) or any(l.kind != "deconv" for l in dec):
            raise ValueError("encoder layers must be conv and decoder layers deconv")
        if len(enc) >= 2 and (enc[0].kernel, enc[1].kernel) != (9, 5):
            raise ValueError("the first two encoder layers must use 9x9 and 5x5 kernels")
        if any(l.kernel != 3 for l in enc[2:]):
            raise ValueError("encoder layers past the second must use 3x3 kernels")
        for a, b in zip(enc, enc[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError("encoder channel chain is broken")
        if dec[0].in_channels != enc[-1].out_channels:
            raise ValueError("decoder input must match the deepest encoder output")
        d = len(enc)
        for j, layer in enumerate(dec):
            mirror = enc[d - 1 - j]
            if (layer.kernel, layer.stride) != (mirror.kernel, mirror.stride):
                raise ValueError(f"dec{j} must mirror enc{d - 1 - j} in kernel and stride")
            if (layer.in_channels, layer.out_channels) != (mirror.out_channels, mirror.in_channels):
                raise ValueError(f"dec{j} channels must mirror enc{d - 1 - j}")

        # shape bookkeeping at a nominal size divisible by every stride
        size = self.size_multiple * 4
        enc_shapes = []
        c, s = enc[0].in_channels, size
        for layer in enc:
            s = s // layer.stride
            c = layer.out_channels
            enc_shapes.append((c, s))
        dec_shapes = []
        for layer in dec:
            s = s * layer.stride
            c = layer.out_channels
            dec_shapes.append((c, s))
        seen = set()
        for ei, di in self.skip_pairs:
            if ei in seen:
                raise ValueError(f"encoder layer {ei} appears in more than one skip pair")
            seen.add(ei)
            if enc_shapes[ei] != dec_shapes[di]:
                raise ValueError(
                    f"skip pair (enc{ei}, dec{di}) mismatch: {enc_shapes[ei]} vs {dec_shapes[di]}"
                )
        if set(range(d - 1)) - seen:
            raise ValueError("every encoder layer above the bottleneck needs a skip pair")
        if self.residual_io and dec_shapes[-1] != (enc[0].in_channels, size):
            raise ValueError("residual input->output skip needs matching shapes")
        return self

    def to_dict(self):
        return {
            "encoder": [asdict(l) for l in self.encoder],
            "decoder": [asdict(l) for l in self.decoder],
            "skip_pairs": [list(p) for p in self.skip_pairs],
            "residual_io": self.residual_io,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoder=tuple(LayerSpec(**l) for l in d["encoder"]),
            decoder=tuple(LayerSpec(**l) for l in d["decoder"]),
            skip_pairs=tuple(tuple(p) for p in d["skip_pairs"]),
            residual_io=d["residual_io"],
        ).validate()


def encoder_decoder_spec(channels=(64, 64, 128, 128), strides=(1, 1, 2, 2), image_channels=3):
    """Symmetric encoder-decoder with 9x9, 5x5, then 3x3 kernels."""
    depth = len(channels)
    kernels = [9, 5] + [3] * (depth - 2)
    ins = [image_channels] + list(channels[:-1])
    encoder = tuple(
        LayerSpec("conv", ins[i], channels[i], kernels[i], strides[i]) for i in range(depth)
    )
    decoder = []
    for j in range(depth):
        i = depth - 1 - j
        last = j == depth - 1
        decoder.append(
            LayerSpec("deconv", channels[i], ins[i], kernels[i], strides[i],
                      has_bn=not last, has_act=not last)
        )
    skips = tuple((i, depth - 2 - i) for i in range(depth - 1))
    return NetworkSpec(encoder, tuple(decoder), skips).validate()


PRESETS = {
    "desk": dict(channels=(64, 64, 128, 128), strides=(1, 1, 2, 2)),
    "compact": dict(channels=(16, 16, 32, 32), strides=(1, 1, 2, 2)),
}


def preset_spec(name):
    try:
        return encoder_decoder_spec(**PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class DomainTransferParams:
    alpha: float = 0.03
    gamma: float = 0.45
    delta: float = 1 / 255
    s_max: float = 64.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not self.s_max > 1:
            raise ValueError("s_max must be > 1")

    @property
    def log_bounds(self):
        return math.log(self.delta), math.log(self.s_max + self.delta)


class ModelParams:
    """Trainable tensors and batch-norm running statistics for one network."""

    def __init__(self, spec, params, bn_states):
        self.spec = spec
        self.params = params
        self.bn_states = bn_states

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def tensors(self):
        return list(self.params.values())

    def layer_of(self, name):
        return name.split(".", 1)[0]

    def named_arrays(self):
        """Every persisted array, trainable or not, in a fixed order."""
        out = []
        for layer_name, _ in self.spec.layers():
            for suffix in ("weight", "bias", "bn.gamma", "bn.beta"):
                key = f"{layer_name}.{suffix}"
                if key in self.params:
                    out.append((key, self.params[key].data))
            if layer_name in self.bn_states:
                st = self.bn_states[layer_name]
                out.append((f"{layer_name}.bn.running_mean", st.running_mean))
                out.append((f"{layer_name}.bn.running_var", st.running_var))
        return out

    def load_arrays(self, arrays):
        for key, arr in arrays.items():
            layer_name, _, rest = key.partition(".")
            if rest in ("bn.running_mean", "bn.running_var"):
                target = getattr(self.bn_states[layer_name], rest[3:])
            else:
                target = self.params[key].data
            if target.shape != arr.shape:
                raise ShapeError(f"{key}: checkpoint shape {arr.shape} != model shape {target.shape}")
            if rest in ("bn.running_mean", "bn.running_var"):
                setattr(self.bn_states[layer_name], rest[3:], arr.astype(target.dtype))
            else:
                self.params[key].data = arr.astype(target.dtype)

    def copy(self):
        params = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()}
        states = {
            k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
            for k, s in self.bn_states.items()
        }
        return ModelParams(self.spec, params, states)

    def zero_(self):
        """Set every weight and bias to 0 (batch-norm affine terms too), making the body output 0."""
        for t in self.params.values():
            t.data = np.zeros_like(t.data)
        return self

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def truncated_normal(rng, shape, sigma, bound=2.0):
    """Normal(0, sigma) redrawn until every sample lies within +-bound*sigma."""
    if sigma == 0:
        return np.zeros(shape)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * sigma


def build_network(spec, seed, sigma=0.02, bn_momentum=0.99):
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {}
    states = {}
    for name, layer in spec.layers():
        w = truncated_normal(rng, layer.weight_shape(), sigma)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True, name=f"{name}.bias")
        if layer.has_bn:
            params[f"{name}.bn.gamma"] = Tensor(np.ones(layer.out_channels), requires_grad=True,
                                                name=f"{name}.bn.gamma")
            params[f"{name}.bn.beta"] = Tensor(np.zeros(layer.out_channels), requires_grad=True,
                                               name=f"{name}.bn.beta")
            st = BatchNormState.fresh(layer.out_channels)
            st.momentum = bn_momentum
            states[name] = st
    return ModelParams(spec, params, states)


def _as_input(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_input(spec, x):
    if x.data.ndim != 4 or x.shape[1] != spec.encoder[0].in_channels:
        raise ShapeError(
            f"expected (N, {spec.encoder[0].in_channels}, H, W) input, got {x.shape}"
        )
    m = spec.size_multiple
    h, w = x.shape[2:]
    if h % m or w % m:
        raise ShapeError(f"spatial size {h}x{w} must be a multiple of {m}")


def _layer(params, name, layer, h, train):
    w, b = params[f"{name}.weight"], params[f"{name}.bias"]
    if layer.kind == "conv":
        h = nx.conv2d(h, w, b, layer.stride)
    else:
        h = nx.conv2d_transpose(h, w, b, layer.stride)
    if layer.has_bn:
        bn_train = train and h.shape[0] > 1
        h = nx.batchnorm(h, params[f"{name}.bn.gamma"], params[f"{name}.bn.beta"],
                         params.bn_states[name], bn_train)
    if layer.has_act:
        h = nx.elu(h)
    return h


def forward(params, x, train=False):
    """Encoder-decoder body with additive skips and the input->output residual."""
    spec = params.spec
    x = _as_input(x)
    _check_input(spec, x)
    skip_into = {d: e for e, d in spec.skip_pairs}
    feats = []
    h = x
    for i, layer in enumerate(spec.encoder):
        h = _layer(params, f"enc{i}", layer, h, train)
        feats.append(h)
    for j, layer in enumerate(spec.decoder):
        h = _layer(params, f"dec{j}", layer, h, train)
        if j in skip_into:
            h = nx.add(h, feats[skip_into[j]])
    if spec.residual_io:
        h = nx.add(h, x)
    return h


def forward_f1(params, x, train=False):
    """Gamma-compressed HDR prediction from an LDR batch in [0, 1]."""
    return forward(params, x, train)


def gamma_compress(y, p):
    return p.alpha * np.power(y, p.gamma)


def domain_transfer(s_hat, p):
    """Inverse gamma, log with a delta floor, then affine normalization onto [0, 1]."""
    lo, hi = p.log_bounds
    full = nx.power(nx.scale(nx.clamp(s_hat, lo=0.0), 1.0 / p.alpha), 1.0 / p.gamma)
    logs = nx.log(nx.add(full, p.delta))
    normed = nx.add(nx.scale(logs, 1.0 / (hi - lo)), -lo / (hi - lo))
    return nx.clamp(normed, 0.0, 1.0)


def inverse_domain_transfer(x, p):
    """Radiance recovered from normalized log values (numpy in, numpy out)."""
    lo, hi = p.log_bounds
    return np.exp(np.asarray(x) * (hi - lo) + lo) - p.delta


def full_radiance(s_hat, p):
    """(max(s_hat, 0) / alpha) ** (1 / gamma), as numpy."""
    return np.power(np.maximum(np.asarray(s_hat), 0) / p.alpha, 1 / p.gamma)


def forward_f2(params, x, train=False):
    """LDR correction from the normalized log-HDR; clamped to [0, 1] only outside training."""
    out = forward(params, x, train)
    if not train:
        out = nx.clamp(out, 0.0, 1.0)
    return out


def forward_drht(theta1, theta2, x, p=None, train=False):
    """Full chain; returns both the intermediate prediction and the corrected LDR."""
    p = DomainTransferParams() if p is None else p
    s_hat = forward_f1(theta1, x, train)
    i_ldr = forward_f2(theta2, domain_transfer(s_hat, p), train)
    return s_hat, i_ldr
