"""Miniature residual classifiers over raw waveforms or spectrograms.

Both kinds share one topology: stem convolution, residual blocks
(conv-relu-conv with an identity skip, relu after the add; the skip gets
a 1x1 convolution whenever the channel count or stride changes), global
max pooling, then three affine layers ending in two class logits
(bona fide, spoof).  Configs are data, so sizes are adjustable; the
defaults are desk-scale miniatures in the 5k-50k parameter range.
"""

import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff
from .autodiff import Graph

CHECKPOINT_VERSION = 1

BONA_INDEX = 0
SPOOF_INDEX = 1

DEFAULT_RAW1D = dict(kind="raw1d", stem=(16, 7, 2),
                     blocks=((16, 3, 1), (32, 3, 2)), fc=(32, 16, 2))
DEFAULT_SPEC2D = dict(kind="spec2d", stem=(8, 3, 1),
                      blocks=((8, 3, 2), (16, 3, 2)), fc=(16, 16, 2))


class ModelConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    kind: str                      # "raw1d" | "spec2d"
    stem: tuple                    # (channels, kernel, stride)
    blocks: tuple                  # ((channels, kernel, stride), ...)
    fc: tuple                      # three widths, last must be 2

    def __post_init__(self):
        if self.kind not in ("raw1d", "spec2d"):
            raise ModelConfigError(f"kind must be raw1d or spec2d, got {self.kind!r}")
        object.__setattr__(self, "stem", tuple(int(v) for v in self.stem))
        object.__setattr__(self, "blocks",
                           tuple(tuple(int(v) for v in b) for b in self.blocks))
        object.__setattr__(self, "fc", tuple(int(v) for v in self.fc))
        if len(self.stem) != 3:
            raise ModelConfigError("stem must be (channels, kernel, stride)")
        for b in self.blocks:
            if len(b) != 3:
                raise ModelConfigError("each block must be (channels, kernel, stride)")
        if len(self.fc) != 3:
            raise ModelConfigError("fc must list exactly 3 layer widths")
        if self.fc[-1] != 2:
            raise ModelConfigError("final fc width must be 2 (bona fide, spoof)")
        for c, k, s in (self.stem,) + self.blocks:
            if c < 1 or k < 1 or s < 1:
                raise ModelConfigError("channels, kernels and strides must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "stem": list(self.stem),
                "blocks": [list(b) for b in self.blocks], "fc": list(self.fc)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(kind=d["kind"], stem=tuple(d["stem"]),
                   blocks=tuple(tuple(b) for b in d["blocks"]),
                   fc=tuple(d["fc"]))

    @classmethod
    def default(cls, kind: str) -> "ModelConfig":
        if kind == "raw1d":
            return cls(**DEFAULT_RAW1D)
        if kind == "spec2d":
            return cls(**DEFAULT_SPEC2D)
        raise ModelConfigError(f"no default config for kind {kind!r}")


def _build_graph(cfg: ModelConfig) -> Graph:
    g = Graph()
    conv = g.conv1d if cfg.kind == "raw1d" else g.conv2d
    x = g.input()
    c_prev = 1
    c, k, s = cfg.stem
    x = conv(x, c_prev, c, k, s, "stem")
    c_prev = c
    for i, (c, k, s) in enumerate(cfg.blocks):
        name = f"block{i}"
        main = conv(x, c_prev, c, k, s, f"{name}.conv1")
        main = g.relu(main, f"{name}.relu1")
        main = conv(main, c, c, k, 1, f"{name}.conv2")
        if s == 1 and c == c_prev:
            skip = x
        else:
            skip = conv(x, c_prev, c, 1, s, f"{name}.skip")
        x = g.add(main, skip, f"{name}.add")
        x = g.relu(x, f"{name}.relu2")
        c_prev = c
    x = g.global_max_pool(x, "gmp")
    d_prev = c_prev
    for j, d in enumerate(cfg.fc):
        x = g.affine(x, d_prev, d, f"fc{j + 1}")
        if j < len(cfg.fc) - 1:
            x = g.relu(x, f"fc{j + 1}.relu")
        d_prev = d
    g.set_output(x)
    return g


def _init_params(graph: Graph, seed: int, init: str) -> list:
    """Glorot-uniform weights, zero biases; deterministic in `seed`."""
    rng = np.random.default_rng(seed)
    params = []
    for pid, shape in zip(graph.param_ids, graph.param_shapes):
        name = graph.nodes[pid].name
        if init == "zeros" or name.endswith(".b"):
            params.append(np.zeros(shape, dtype=np.float32))
            continue
        if len(shape) == 2:            # affine weight (out, in)
            fan_in, fan_out = shape[1], shape[0]
        else:                          # conv weight (out, in, k...): fans include kernel extent
            k_sz = int(np.prod(shape[2:]))
            fan_in, fan_out = shape[1] * k_sz, shape[0] * k_sz
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=shape)
        params.append(w.astype(np.float32))
    return params


class Model:
    """A built classifier: config + graph + parameters.

    Immutable from the caller's point of view once built or loaded;
    concurrent forward/gradient calls are safe.
    """

    def __init__(self, config: ModelConfig, params: list, metadata: Optional[dict] = None):
        self.config = config
        self.graph = _build_graph(config)
        if len(params) != len(self.graph.param_ids):
            raise CheckpointError("parameter tensor count mismatch")
        for p, shape in zip(params, self.graph.param_shapes):
            if tuple(p.shape) != shape:
                raise CheckpointError("parameter shape mismatch")
        self.params = [np.asarray(p, dtype=np.float32) for p in params]
        self.metadata = dict(metadata or {})
        self._min_len = None

    # -- introspection -------------------------------------------------

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def param_count(self) -> int:
        return self.graph.param_count

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params])

    def _spatial_ok(self, length: int) -> bool:
        """Whether every valid-padding stage keeps at least kernel-size input."""
        def out_len(n, k, s):
            return (n - k) // s + 1 if n >= k else -1

        n = length
        c, k, s = self.config.stem
        n = out_len(n, k, s)
        if n < 1:
            return False
        for c, k, s in self.config.blocks:
            main = out_len(n, k, s)
            if main < 1:
                return False
            main = out_len(main, k, 1)
            if main < 1:
                return False
            # skip path is identity or a 1x1 stride-s conv; both need n >= 1
            n = main
        return n >= 1

    def min_input_length(self) -> int:
        """Smallest admissible size per spatial axis (samples or frames)."""
        if self._min_len is None:
            lo = 1
            while not self._spatial_ok(lo):
                lo += 1
                if lo > 1_000_000:
                    raise ModelConfigError("config admits no reasonable input size")
            self._min_len = lo
        return self._min_len

    # -- forward / gradients --------------------------------------------

    def _as_input(self, x) -> np.ndarray:
        arr = x
        for attr in ("samples", "values"):   # Waveform / Spectrogram duck types
            if hasattr(arr, attr):
                arr = getattr(arr, attr)
                break
        arr = np.asarray(arr)
        want = 1 if self.kind == "raw1d" else 2
        if arr.ndim != want:
            raise ValueError(
                f"{self.kind} model expects {want}D features, got shape {arr.shape}")
        m = self.min_input_length()
        if min(arr.shape) < m:
            raise ValueError(
                f"input size {arr.shape} below minimum admissible length {m} "
                f"per spatial axis")
        return arr[np.newaxis] if want == 1 else arr[np.newaxis, :, :]

    def scores(self, x, dtype=np.float32) -> np.ndarray:
        """Forward pass to the two class logits (bona fide, spoof)."""
        arr = self._as_input(x)
        return autodiff.evaluate(self.graph, self.params, arr, dtype=dtype)

    def _target_seed(self, logits: np.ndarray, class_index: int, target: str):
        if target == "logit":
            seed = np.zeros_like(logits)
            seed[class_index] = 1.0
            return seed
        if target == "probability":
            p = autodiff.softmax(logits)
            seed = -p[class_index] * p
            seed[class_index] += p[class_index]
            return seed
        raise ValueError(f"target must be 'logit' or 'probability', got {target!r}")

    def target_value(self, x, class_index: int, target: str = "logit",
                     dtype=np.float64) -> float:
        logits = self.scores(x, dtype=dtype)
        if target == "logit":
            return float(logits[class_index])
        if target == "probability":
            return float(autodiff.softmax(logits)[class_index])
        raise ValueError(f"target must be 'logit' or 'probability', got {target!r}")

    def target_gradient(self, x, class_index: int, target: str = "logit",
                        dtype=np.float64) -> np.ndarray:
        """Gradient of the chosen output w.r.t. the input features."""
        arr = self._as_input(x)
        values, aux = autodiff._forward(self.graph, self.params, arr, dtype=dtype)
        logits = values[self.graph.output_id]
        seed = self._target_seed(logits, class_index, target)
        _, input_grad = autodiff._backward(self.graph, values, aux, seed, wrt="input")
        return input_grad[0]

    def loss_and_param_grads(self, x, label: int, weights, dtype=np.float32):
        """Weighted cross-entropy loss and parameter gradients for one example."""
        arr = self._as_input(x)
        values, aux = autodiff._forward(self.graph, self.params, arr, dtype=dtype)
        logits = values[self.graph.output_id]
        loss = autodiff.weighted_cross_entropy(logits, label, weights)
        seed = autodiff.weighted_cross_entropy_grad(logits, label, weights)
        seed = seed.astype(logits.dtype)
        param_grads, _ = autodiff._backward(self.graph, values, aux, seed,
                                            wrt="params")
        return float(loss), param_grads


def build_model(config: ModelConfig, seed: int, init: str = "uniform") -> Model:
    """Build a model with fresh parameters; deterministic in `seed`."""
    graph = _build_graph(config)   # validates the channel chain
    params = _init_params(graph, seed, init)
    return Model(config, params, metadata={"seed": int(seed)})


def expected_param_count(config: ModelConfig) -> int:
    return _build_graph(config).param_count


# ---------------------------------------------------------------------------
# checkpoints: JSON header line + little-endian float32 parameter block
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "metadata": model.metadata,
        "param_count": model.param_count,
    }
    blob = model.flat_params().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version!r} "
            f"(this build reads version {CHECKPOINT_VERSION})")
    config = ModelConfig.from_dict(header["config"])
    flat = np.frombuffer(blob, dtype="<f4")
    if flat.size != header["param_count"]:
        raise CheckpointError(
            f"parameter count mismatch: header says {header['param_count']}, "
            f"file holds {flat.size}")
    graph = _build_graph(config)
    if graph.param_count != flat.size:
        raise CheckpointError(
            f"parameter count mismatch: config needs {graph.param_count}, "
            f"file holds {flat.size}")
    params = []
    offset = 0
    for shape in graph.param_shapes:
        n = int(np.prod(shape))
        params.append(flat[offset:offset + n].reshape(shape).copy())
        offset += n
    return Model(config, params, metadata=header.get("metadata", {}))
