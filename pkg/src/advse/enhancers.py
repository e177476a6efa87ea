"""Differentiable enhancement models, their trainer, and the model file format.

Two deliberately different architectures cover the spectral-vs-waveform
contrast: MaskNet predicts a per-bin magnitude mask applied to the noisy
spectrogram (reusing the noisy phase), WaveAE maps waveforms to waveforms
through a small strided convolutional autoencoder.  Both are expressed as
single differentiable graphs from the input signal to the output signal,
which is what the attack algorithms rely on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import grad_engine as ge
from . import signal as sig
from . import tone_codec
from .audio_io import Waveform, band_noise, mix_components, MixSpec, white_noise
from .errors import FormatError, ShapeError, SizeError, TrainingError

MODEL_MAGIC = b"ADVSE"
MODEL_VERSION = 1

MASKNET = "masknet"
WAVEAE = "waveae"


@dataclass
class EnhancerModel:
    kind: str
    params: dict[str, np.ndarray]
    arch: dict
    stft: sig.StftConfig | None = None
    train_meta: dict = field(default_factory=dict)
    graphs: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in (MASKNET, WAVEAE):
            raise ValueError(f"unknown enhancer kind {self.kind!r}")
        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise TrainingError(f"parameter {name!r} contains non-finite values")

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def build_masknet(
    hidden: tuple[int, int] = (64, 64),
    stft_config: sig.StftConfig | None = None,
    seed: int = 0,
) -> EnhancerModel:
    """Per-frame mask predictor over magnitude spectra with +-1 frame context."""
    cfg = stft_config or sig.StftConfig()
    rng = np.random.default_rng(seed)
    bins = cfg.num_bins
    sizes = [3 * bins, *hidden, bins]
    params: dict[str, np.ndarray] = {}
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        tag = f"h{i}" if i < len(sizes) - 2 else "out"
        params[f"w_{tag}"] = _glorot(rng, (fan_in, fan_out), fan_in, fan_out)
        params[f"b_{tag}"] = _glorot(rng, (fan_out,), fan_in, fan_out)
    return EnhancerModel(
        kind=MASKNET,
        params=params,
        arch={"hidden": list(hidden)},
        stft=cfg,
    )


def build_waveae(
    channels: tuple[int, int] = (12, 24),
    kernel: int = 31,
    bottleneck_kernel: int = 15,
    seed: int = 0,
) -> EnhancerModel:
    """Strided conv encoder, bottleneck, and upsampling decoder with tanh output."""
    if kernel % 2 == 0 or bottleneck_kernel % 2 == 0:
        raise ValueError("kernels must be odd so padded convs preserve length")
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    params: dict[str, np.ndarray] = {}

    def conv_init(name, c_out, c_in, k):
        params[f"{name}_w"] = _glorot(rng, (c_out, c_in, k), c_in * k, c_out * k)
        params[f"{name}_b"] = _glorot(rng, (c_out, 1), c_in * k, c_out * k)

    conv_init("enc0", c1, 1, kernel)
    conv_init("enc1", c2, c1, kernel)
    conv_init("bott", c2, c2, bottleneck_kernel)
    conv_init("dec0", c1, c2, kernel)
    conv_init("dec1", 1, c1, kernel)
    return EnhancerModel(
        kind=WAVEAE,
        params=params,
        arch={"channels": list(channels), "kernel": kernel, "bottleneck_kernel": bottleneck_kernel},
    )


# ---------------------------------------------------------------------------
# graph construction

def _masknet_nodes(model: EnhancerModel, n: int):
    cfg = model.stft
    frames_t = sig.num_frames(n, cfg)
    bins = cfg.num_bins
    basis_c, basis_s = sig.dft_basis(cfg.frame_len)
    idft_c, idft_s = sig.idft_basis(cfg.frame_len)

    x = ge.leaf("x")
    windowed = ge.mul(ge.frame(x, cfg), ge.constant(sig.hann_window(cfg.frame_len)))
    re = ge.matmul(windowed, ge.constant(basis_c))
    im = ge.matmul(windowed, ge.constant(basis_s))
    mag = ge.dft_magnitude(windowed, cfg)

    zero_row = ge.constant(np.zeros((1, bins)))
    prev = ge.concat([zero_row, ge.slice_(mag, ((0, frames_t - 1),))], axis=0)
    nxt = ge.concat([ge.slice_(mag, ((1, frames_t),)), zero_row], axis=0)
    h = ge.concat([prev, mag, nxt], axis=1)

    for i in range(len(model.arch["hidden"])):
        h = ge.tanh(ge.add(ge.matmul(h, ge.leaf(f"w_h{i}", "param")), ge.leaf(f"b_h{i}", "param")))
    mask = ge.sigmoid(
        ge.add(ge.matmul(h, ge.leaf("w_out", "param")), ge.leaf("b_out", "param"))
    )

    re_masked = ge.mul(mask, re)
    im_masked = ge.mul(mask, im)
    time_frames = ge.add(
        ge.matmul(re_masked, ge.constant(idft_c)), ge.matmul(im_masked, ge.constant(idft_s))
    )
    y = ge.overlap_add(time_frames, cfg, n)
    watch = {"mask": mask, "re": re, "im": im, "re_masked": re_masked, "im_masked": im_masked}
    return x, y, watch


def _waveae_nodes(model: EnhancerModel, n: int):
    k = model.arch["kernel"]
    bk = model.arch["bottleneck_kernel"]

    x = ge.leaf("x")
    pad = (-n) % 4
    signal_in = ge.concat([x, ge.constant(np.zeros(pad))], axis=0) if pad else x

    def conv_block(h, name, stride, kern, activation):
        h = ge.conv1d(h, ge.leaf(f"{name}_w", "param"), stride=stride, pad=(kern - 1) // 2)
        h = ge.add(h, ge.leaf(f"{name}_b", "param"))
        return activation(h) if activation else h

    h = conv_block(signal_in, "enc0", 2, k, ge.relu)
    h = conv_block(h, "enc1", 2, k, ge.relu)
    h = conv_block(h, "bott", 1, bk, ge.relu)
    h = ge.upsample_repeat(h, 2)
    h = conv_block(h, "dec0", 1, k, ge.relu)
    h = ge.upsample_repeat(h, 2)
    h = conv_block(h, "dec1", 1, k, None)
    y = ge.slice_(ge.tanh(h), ((0, 1), (0, n)))
    return x, y, {}


def enhancer_nodes(model: EnhancerModel, n: int):
    """Symbolic (input, output, watch) nodes for an input of n samples; cached."""
    cache = model.graphs.setdefault("nodes", {})
    if n not in cache:
        if model.kind == MASKNET:
            cache[n] = _masknet_nodes(model, n)
        else:
            cache[n] = _waveae_nodes(model, n)
    return cache[n]


def enhance_graph(model: EnhancerModel, n: int) -> ge.Graph:
    cache = model.graphs.setdefault("graph", {})
    if n not in cache:
        x, y, watch = enhancer_nodes(model, n)
        cache[n] = ge.Graph(y, watch)
    return cache[n]


def min_input_len(model: EnhancerModel) -> int:
    return model.stft.frame_len if model.kind == MASKNET else 16


def output_to_samples(model: EnhancerModel, out: np.ndarray) -> np.ndarray:
    """Graph outputs are [n] for masknet and [1, n] for waveae."""
    return out if model.kind == MASKNET else out[0]


def target_for_graph(model: EnhancerModel, samples: np.ndarray) -> np.ndarray:
    """Shape a desired output signal like the model's graph output."""
    return samples if model.kind == MASKNET else samples[None, :]


def enhance(model: EnhancerModel, x: Waveform) -> Waveform:
    """Run the enhancement graph on one waveform."""
    if len(x) < min_input_len(model):
        raise SizeError(
            f"input of {len(x)} samples is below the model minimum {min_input_len(model)}"
        )
    graph = enhance_graph(model, len(x))
    out = ge.forward(graph, {**model.params, "x": x.samples})
    return Waveform(output_to_samples(model, out), x.sample_rate)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 0.005
    seed: int = 0
    num_sentences: int = 48
    sentence_len: int = 5
    snr_grid: tuple = (-8.0, -4.0, 0.0, 4.0, 8.0)
    noise_kind: str = "white"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.noise_kind not in ("white", "band"):
            raise ValueError(f"noise_kind must be 'white' or 'band', got {self.noise_kind!r}")


def make_noise(kind: str, num_samples: int, seed: int, sample_rate: int) -> Waveform:
    if kind == "white":
        return white_noise(num_samples, seed, sample_rate)
    return band_noise(num_samples, seed, sample_rate=sample_rate)


def make_training_set(
    cfg: TrainConfig, codec: tone_codec.CodecConfig | None = None
) -> list[tuple[Waveform, Waveform]]:
    """Seeded (noisy, clean-in-mixture) pairs cycling through the SNR grid."""
    codec = codec or tone_codec.CodecConfig()
    pairs = []
    for i in range(cfg.num_sentences):
        words = tone_codec.random_sentence(cfg.seed * 100003 + i, cfg.sentence_len, codec)
        clean = tone_codec.encode(words, codec)
        noise = make_noise(
            cfg.noise_kind, len(clean) + codec.sample_rate // 4,
            cfg.seed * 7919 + i, codec.sample_rate,
        )
        snr = cfg.snr_grid[i % len(cfg.snr_grid)]
        noisy, clean_in_mix = mix_components(clean, noise, MixSpec(snr, seed=cfg.seed * 104729 + i))
        pairs.append((noisy, clean_in_mix))
    return pairs


def train(
    model: EnhancerModel,
    dataset: list[tuple[Waveform, Waveform]],
    cfg: TrainConfig,
) -> EnhancerModel:
    """Minimize mean MSE(enhance(noisy), clean) with Adam; deterministic per seed."""
    if not dataset:
        raise TrainingError("training dataset is empty")
    n = len(dataset[0][0])
    for noisy, clean in dataset:
        if len(noisy) != n or len(clean) != n:
            raise ShapeError("all training pairs must share one length")

    x_node, y_node, _ = enhancer_nodes(model, n)
    loss_graph = ge.Graph(ge.mse(y_node, ge.leaf("target")))

    params = {k: v.copy() for k, v in model.params.items()}
    states = {k: ge.AdamState(lr=cfg.lr) for k in params}
    rng = np.random.default_rng(cfg.seed)
    final_loss = None

    targets = [target_for_graph(model, clean.samples) for _, clean in dataset]
    inputs = [noisy.samples for noisy, _ in dataset]

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            grad_sum = {k: np.zeros_like(v) for k, v in params.items()}
            for idx in batch:
                bindings = {**params, "x": inputs[idx], "target": targets[idx]}
                values = ge.forward_values(loss_graph, bindings)
                loss = float(values[loss_graph.root.id])
                if not np.isfinite(loss):
                    raise TrainingError(f"loss diverged at epoch {epoch}, example {idx}")
                epoch_losses.append(loss)
                grads = ge.backward(loss_graph, values, list(params))
                for k in grad_sum:
                    grad_sum[k] += grads[k]
            for k in params:
                params[k], states[k] = ge.adam_step(states[k], params[k], grad_sum[k] / len(batch))
        final_loss = float(np.mean(epoch_losses))

    meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "num_examples": len(dataset),
        "final_loss": final_loss,
    }
    return EnhancerModel(
        kind=model.kind, params=params, arch=dict(model.arch), stft=model.stft, train_meta=meta
    )


def evaluate_mse(model: EnhancerModel, dataset: list[tuple[Waveform, Waveform]]) -> float:
    """Mean enhancement MSE against clean references."""
    losses = []
    for noisy, clean in dataset:
        y = enhance(model, noisy)
        losses.append(float(np.mean(np.square(y.samples - clean.samples))))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# model file format

def save_model(model: EnhancerModel, path) -> None:
    """Versioned binary format: magic, version, kind, arch table, parameter blobs."""
    meta = {
        "arch": model.arch,
        "stft": None
        if model.stft is None
        else {"frame_len": model.stft.frame_len, "hop": model.stft.hop, "window": model.stft.window},
        "train_meta": model.train_meta,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    kind_bytes = model.kind.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<B", len(kind_bytes)))
        fh.write(kind_bytes)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            data = np.ascontiguousarray(model.params[name], dtype="<f8")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"model file truncated while reading {what}")
    return data


def load_model(path) -> EnhancerModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MODEL_MAGIC), "magic") != MODEL_MAGIC:
            raise FormatError(f"bad magic bytes, not a model file: {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model format version {version}")
        (kind_len,) = struct.unpack("<B", _read_exact(fh, 1, "kind length"))
        kind = _read_exact(fh, kind_len, "kind").decode("utf-8")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "meta length"))
        try:
            meta = json.loads(_read_exact(fh, meta_len, "meta").decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt metadata block: {exc}") from exc
        (num_params,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        params = {}
        for _ in range(num_params):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "shape"))
            count = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(fh, 8 * count, f"parameter {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after final parameter blob")
    stft_meta = meta.get("stft")
    stft_cfg = None if stft_meta is None else sig.StftConfig(**stft_meta)
    return EnhancerModel(
        kind=kind,
        params=params,
        arch=meta["arch"],
        stft=stft_cfg,
        train_meta=meta.get("train_meta", {}),
    )
