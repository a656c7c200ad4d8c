"""
A small MalConv-style byte classifier: embedding, gated 1-D convolution with
stride equal to the kernel width, temporal max-pool, one ReLU dense layer and
a sigmoid output. Everything is float64 numpy with hand-written
backpropagation, so gradients with respect to the embedded input are exact.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from pydantic import PositiveInt, ValidationError, root_validator, validator

from .classes.errors import ModelError
from .classes.logger import Logger
from .pe_format import ByteSample, RegionMask
from .types import BaseModel

PADDING_TOKEN = 256
VOCAB_SIZE = 257

CONTAINER_MAGIC = b"AMG1"
CONTAINER_VERSION = 2
CONTAINER_HEADER = struct.Struct("<4sH6Id")

WEIGHT_ORDER = (
    "embedding",
    "conv_a",
    "bias_a",
    "conv_b",
    "bias_b",
    "dense",
    "dense_bias",
    "out",
    "out_bias",
)

DEFAULT_IG_STEPS = 128
DEFAULT_BATCH_SIZE = 16
GRADIENT_CHUNK = 32


class ModelConfig(BaseModel):
    window: PositiveInt = 4096
    vocab: int = VOCAB_SIZE
    embed_dim: PositiveInt = 8
    filters: PositiveInt = 16
    kernel_width: PositiveInt = 32
    hidden: PositiveInt = 16
    threshold: float = 0.5

    class Config:
        allow_mutation = False

    @validator("vocab")
    def _vocab_is_bytes_plus_padding(cls, v: int) -> int:
        if v != VOCAB_SIZE:
            raise ValueError(f"vocab must be {VOCAB_SIZE}")
        return v

    @validator("threshold")
    def _threshold_is_open_probability(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        return v

    @root_validator(skip_on_failure=True)
    def _window_divides(cls, values: dict) -> dict:
        if values["window"] % values["kernel_width"] != 0:
            raise ValueError("window must be a multiple of kernel_width")
        return values

    @property
    def stride(self) -> int:
        return self.kernel_width

    @property
    def num_windows(self) -> int:
        return self.window // self.kernel_width

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        conv = (self.filters, self.kernel_width, self.embed_dim)
        return {
            "embedding": (self.vocab, self.embed_dim),
            "conv_a": conv,
            "bias_a": (self.filters,),
            "conv_b": conv,
            "bias_b": (self.filters,),
            "dense": (self.hidden, self.filters),
            "dense_bias": (self.hidden,),
            "out": (self.hidden,),
            "out_bias": (1,),
        }


@dataclass(eq=False)
class ClassifierModel:
    config: ModelConfig
    embedding: np.ndarray
    conv_a: np.ndarray
    bias_a: np.ndarray
    conv_b: np.ndarray
    bias_b: np.ndarray
    dense: np.ndarray
    dense_bias: np.ndarray
    out: np.ndarray
    out_bias: np.ndarray

    def __post_init__(self):
        shapes = self.config.weight_shapes()
        for name in WEIGHT_ORDER:
            array = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if array.shape != shapes[name]:
                raise ModelError(
                    "SHAPE_MISMATCH",
                    f"{name} has shape {array.shape}, expected {shapes[name]}",
                )
            if not np.all(np.isfinite(array)):
                raise ValueError(f"{name} contains non-finite weights")
            setattr(self, name, array)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ClassifierModel":
        return cls(
            config=config,
            **{name: np.zeros(shape) for name, shape in config.weight_shapes().items()},
        )

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ClassifierModel":
        rng = np.random.default_rng(seed)
        fan_in = config.kernel_width * config.embed_dim
        conv = (config.filters, config.kernel_width, config.embed_dim)

        return cls(
            config=config,
            embedding=rng.normal(0.0, 1.0, (config.vocab, config.embed_dim)),
            conv_a=rng.normal(0.0, 1.0 / np.sqrt(fan_in), conv),
            bias_a=np.zeros(config.filters),
            conv_b=rng.normal(0.0, 1.0 / np.sqrt(fan_in), conv),
            bias_b=np.zeros(config.filters),
            dense=rng.normal(
                0.0, np.sqrt(2.0 / config.filters), (config.hidden, config.filters)
            ),
            dense_bias=np.zeros(config.hidden),
            out=rng.normal(0.0, 1.0 / np.sqrt(config.hidden), config.hidden),
            out_bias=np.zeros(1),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEIGHT_ORDER}

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(
            config=self.config,
            **{name: array.copy() for name, array in self.parameters().items()},
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClassifierModel):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in WEIGHT_ORDER
        )


@dataclass
class EmbeddedInput:
    tokens: np.ndarray
    z: np.ndarray


@dataclass
class AttributionMap:
    attributions: np.ndarray
    baseline: str = "padding token at every position"
    steps: int = DEFAULT_IG_STEPS

    def __len__(self) -> int:
        return len(self.attributions)

    def top(self, k: int, within: Optional[RegionMask] = None) -> RegionMask:
        """The k highest-attribution offsets, lower offset first on ties."""
        candidates = (
            within.array() if within is not None else np.arange(len(self.attributions))
        )
        order = sorted(
            candidates.tolist(), key=lambda i: (-self.attributions[i], i)
        )
        return RegionMask.from_iterable(order[:k])


class ModelReport(BaseModel):
    samples: int
    malware: int
    benign: int
    accuracy: float
    false_positive_rate: Optional[float] = None
    false_negative_rate: Optional[float] = None


@dataclass
class _ForwardCache:
    x: np.ndarray
    pre_a: np.ndarray
    gate: np.ndarray
    argmax: np.ndarray
    pooled: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    logit: np.ndarray
    prob: np.ndarray = field(repr=False)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tokenize(sample: Union[ByteSample, bytes], config: ModelConfig) -> np.ndarray:
    data = sample.data if isinstance(sample, ByteSample) else sample
    tokens = np.full(config.window, PADDING_TOKEN, dtype=np.int64)
    head = np.frombuffer(data[: config.window], dtype=np.uint8)
    tokens[: len(head)] = head
    return tokens


def embed(model: ClassifierModel, tokens: np.ndarray) -> EmbeddedInput:
    return EmbeddedInput(tokens=tokens, z=model.embedding[tokens])


def _forward(model: ClassifierModel, z: np.ndarray) -> _ForwardCache:
    """z is (batch, window, embed_dim)."""
    config = model.config
    batch = z.shape[0]
    x = z.reshape(batch, config.num_windows, config.kernel_width * config.embed_dim)

    pre_a = x @ model.conv_a.reshape(config.filters, -1).T + model.bias_a
    pre_b = x @ model.conv_b.reshape(config.filters, -1).T + model.bias_b
    gate = _sigmoid(pre_b)
    gated = pre_a * gate

    # argmax keeps the lowest window index on ties
    argmax = gated.argmax(axis=1)
    pooled = np.take_along_axis(gated, argmax[:, None, :], axis=1)[:, 0, :]

    h_pre = pooled @ model.dense.T + model.dense_bias
    h = np.maximum(h_pre, 0.0)
    logit = h @ model.out + model.out_bias[0]

    return _ForwardCache(
        x=x,
        pre_a=pre_a,
        gate=gate,
        argmax=argmax,
        pooled=pooled,
        h_pre=h_pre,
        h=h,
        logit=logit,
        prob=_sigmoid(logit),
    )


def _backward(
    model: ClassifierModel,
    cache: _ForwardCache,
    dlogit: np.ndarray,
    need_params: bool = False,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """
    Returns parameter gradients (embedding excluded, it needs the tokens) and
    the gradient with respect to the embedded input, for upstream dlogit.
    """
    config = model.config
    batch = dlogit.shape[0]

    dh = dlogit[:, None] * model.out[None, :]
    dh_pre = dh * (cache.h_pre > 0)
    dpooled = dh_pre @ model.dense

    dgated = np.zeros_like(cache.pre_a)
    np.put_along_axis(dgated, cache.argmax[:, None, :], dpooled[:, None, :], axis=1)

    dpre_a = dgated * cache.gate
    dpre_b = dgated * cache.pre_a * cache.gate * (1.0 - cache.gate)

    a2 = model.conv_a.reshape(config.filters, -1)
    b2 = model.conv_b.reshape(config.filters, -1)
    dx = dpre_a @ a2 + dpre_b @ b2
    dz = dx.reshape(batch, config.window, config.embed_dim)

    grads: dict[str, np.ndarray] = {}
    if need_params:
        conv_shape = model.conv_a.shape
        grads["out"] = cache.h.T @ dlogit
        grads["out_bias"] = np.array([dlogit.sum()])
        grads["dense"] = dh_pre.T @ cache.pooled
        grads["dense_bias"] = dh_pre.sum(axis=0)
        grads["conv_a"] = np.einsum("nwf,nwk->fk", dpre_a, cache.x).reshape(conv_shape)
        grads["bias_a"] = dpre_a.sum(axis=(0, 1))
        grads["conv_b"] = np.einsum("nwf,nwk->fk", dpre_b, cache.x).reshape(conv_shape)
        grads["bias_b"] = dpre_b.sum(axis=(0, 1))

    return grads, dz


def score_embedded(model: ClassifierModel, z: np.ndarray) -> np.ndarray:
    """Scores for a (batch, window, embed_dim) stack of embedded inputs."""
    return _forward(model, z).prob


def score_tokens(model: ClassifierModel, tokens: np.ndarray) -> np.ndarray:
    return score_embedded(model, model.embedding[tokens])


def score(model: ClassifierModel, sample: ByteSample) -> float:
    tokens = tokenize(sample, model.config)
    return float(score_tokens(model, tokens[None, :])[0])


def score_many(
    model: ClassifierModel,
    samples: Sequence[ByteSample],
    batch_size: int = 64,
) -> np.ndarray:
    scores = []
    for start in range(0, len(samples), batch_size):
        tokens = np.stack(
            [tokenize(s, model.config) for s in samples[start : start + batch_size]]
        )
        scores.append(score_tokens(model, tokens))

    return np.concatenate(scores) if scores else np.zeros(0)


def _score_gradients(model: ClassifierModel, z: np.ndarray) -> np.ndarray:
    """d score / d z for a batch of embedded inputs."""
    cache = _forward(model, z)
    _, dz = _backward(model, cache, cache.prob * (1.0 - cache.prob))
    return dz


def grad_wrt_embeddings(
    model: ClassifierModel,
    embedded: EmbeddedInput,
    positions: RegionMask,
) -> np.ndarray:
    """(len(positions), embed_dim) gradients of the score."""
    if not positions.fits(model.config.window):
        raise ValueError("positions must lie inside the classifier window")

    dz = _score_gradients(model, embedded.z[None, :, :])[0]
    return dz[positions.array()]


def train(
    model: ClassifierModel,
    corpus: Sequence[tuple[ByteSample, int]],
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = DEFAULT_BATCH_SIZE,
    logger: Optional[Logger] = None,
) -> tuple[ClassifierModel, list[float]]:
    """
    Mini-batch SGD on binary cross-entropy. Returns a trained copy and the
    mean loss of each epoch (losses taken before each batch's update).
    """
    if logger is None:
        logger = Logger(prefix="train")
    if len(corpus) == 0:
        raise ModelError("EMPTY_CORPUS", "Cannot train on an empty corpus")
    labels = np.asarray([label for _, label in corpus], dtype=np.float64)
    if len(set(labels.tolist())) < 2:
        raise ModelError("DEGENERATE_LABELS", "Corpus must contain both labels")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be at least 1")

    trained = model.copy()
    config = trained.config
    tokens = np.stack([tokenize(sample, config) for sample, _ in corpus])
    rng = np.random.default_rng(seed)
    history: list[float] = []

    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        total = 0.0

        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            batch_tokens = tokens[idx]
            y = labels[idx]

            cache = _forward(trained, trained.embedding[batch_tokens])
            total += float(np.sum(np.logaddexp(0.0, cache.logit) - y * cache.logit))

            dlogit = (cache.prob - y) / len(idx)
            grads, dz = _backward(trained, cache, dlogit, need_params=True)
            dembedding = np.zeros_like(trained.embedding)
            np.add.at(dembedding, batch_tokens.ravel(), dz.reshape(-1, config.embed_dim))
            grads["embedding"] = dembedding

            for name in WEIGHT_ORDER:
                getattr(trained, name)[...] -= lr * grads[name]

        history.append(total / len(corpus))
        logger.debug(f"epoch {epoch + 1}/{epochs} loss={history[-1]:.6f}")

    logger.info(f"Trained {epochs} epochs on {len(corpus)} samples, final loss {history[-1]:.6f}")
    return trained, history


def evaluate_model(
    model: ClassifierModel,
    corpus: Sequence[tuple[ByteSample, int]],
) -> ModelReport:
    scores = score_many(model, [sample for sample, _ in corpus])
    labels = np.asarray([label for _, label in corpus], dtype=bool)
    predicted = scores >= model.config.threshold

    benign = int((~labels).sum())
    malware = int(labels.sum())

    return ModelReport(
        samples=len(corpus),
        malware=malware,
        benign=benign,
        accuracy=float((predicted == labels).mean()) if len(corpus) else 0.0,
        false_positive_rate=float(predicted[~labels].mean()) if benign else None,
        false_negative_rate=float((~predicted[labels]).mean()) if malware else None,
    )


GradientFn = Callable[[np.ndarray], np.ndarray]


def path_integrated_gradients(
    grad_fn: GradientFn,
    x: np.ndarray,
    baseline: np.ndarray,
    steps: int,
    chunk: int = GRADIENT_CHUNK,
) -> np.ndarray:
    """
    Midpoint-rule sum of the straight-line path integral from baseline to x.
    grad_fn maps a stack of points to a stack of gradients.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if x.shape != baseline.shape:
        raise ValueError("x and baseline must have the same shape")

    diff = x - baseline
    total = np.zeros_like(x, dtype=np.float64)
    alphas = (np.arange(steps, dtype=np.float64) + 0.5) / steps

    for start in range(0, steps, chunk):
        batch = alphas[start : start + chunk]
        points = baseline[None, ...] + batch.reshape(-1, *([1] * x.ndim)) * diff[None, ...]
        total += grad_fn(points).sum(axis=0)

    return diff * total / steps


def integrated_gradients(
    model: ClassifierModel,
    sample: ByteSample,
    steps: int = DEFAULT_IG_STEPS,
) -> AttributionMap:
    tokens = tokenize(sample, model.config)
    x = model.embedding[tokens]
    baseline = np.broadcast_to(
        model.embedding[PADDING_TOKEN], x.shape
    ).copy()

    per_coordinate = path_integrated_gradients(
        lambda points: _score_gradients(model, points), x, baseline, steps
    )
    return AttributionMap(attributions=per_coordinate.sum(axis=1), steps=steps)


def save_model(model: ClassifierModel) -> bytes:
    config = model.config
    header = CONTAINER_HEADER.pack(
        CONTAINER_MAGIC,
        CONTAINER_VERSION,
        config.window,
        config.vocab,
        config.embed_dim,
        config.filters,
        config.kernel_width,
        config.hidden,
        config.threshold,
    )
    blocks = [
        np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes()
        for name in WEIGHT_ORDER
    ]
    return header + b"".join(blocks)


def load_model(data: bytes, threshold: Optional[float] = None) -> ClassifierModel:
    """threshold, when given, replaces the one stored in the container."""
    if data[: len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise ModelError("BAD_MAGIC", f"Bad model magic: {data[:4]!r}")
    if len(data) < CONTAINER_HEADER.size:
        raise ModelError("SHAPE_MISMATCH", "Truncated model header")

    (
        _,
        version,
        window,
        vocab,
        embed_dim,
        filters,
        kernel_width,
        hidden,
        stored_threshold,
    ) = CONTAINER_HEADER.unpack_from(data, 0)
    if version != CONTAINER_VERSION:
        raise ModelError("BAD_MAGIC", f"Unsupported model container version {version}")

    try:
        config = ModelConfig(
            window=window,
            vocab=vocab,
            embed_dim=embed_dim,
            filters=filters,
            kernel_width=kernel_width,
            hidden=hidden,
            threshold=stored_threshold if threshold is None else threshold,
        )
    except ValidationError as err:
        raise ModelError("SHAPE_MISMATCH", f"Invalid model config: {err}") from err

    shapes = config.weight_shapes()
    expected = CONTAINER_HEADER.size + 8 * sum(
        int(np.prod(shapes[name])) for name in WEIGHT_ORDER
    )
    if len(data) != expected:
        raise ModelError(
            "SHAPE_MISMATCH",
            f"Model container is {len(data)} bytes, expected {expected}",
        )

    weights = {}
    offset = CONTAINER_HEADER.size
    for name in WEIGHT_ORDER:
        count = int(np.prod(shapes[name]))
        weights[name] = (
            np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shapes[name])
        )
        offset += 8 * count

    return ClassifierModel(config=config, **weights)


def write_model(model: ClassifierModel, path: Union[str, Path]):
    Path(path).write_bytes(save_model(model))


def read_model(path: Union[str, Path], threshold: Optional[float] = None) -> ClassifierModel:
    return load_model(Path(path).read_bytes(), threshold=threshold)
