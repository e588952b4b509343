"""
Stochastic mask training over frozen weights

A small tanh MLP stands in for the pretrained backbone. Its hidden layers
are gated element-wise by a Bernoulli mask m ~ Bern(sigmoid(s)); only the
scores s are trained, through a straight-through estimator. The head is
fitted once by a linear probe and frozen afterwards.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.autograd import Function

from utils.codec import KL_EPSILON, BinaryMask, ProbabilityMask
from utils.errors import EmptyDataset, InvalidSpec, ShapeMismatch

logger = logging.getLogger(__name__)

DTYPE = torch.float64
DEFAULT_LR = 0.1
DEFAULT_BATCH_SIZE = 64
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
# keeps θ inside [ε, 1 - ε]
SCORE_LIMIT = math.log((1.0 - KL_EPSILON) / KL_EPSILON)


@dataclass(frozen=True, eq=False)
class ClientDataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if features.ndim != 2 or features.shape[0] != labels.size:
            raise ShapeMismatch(f"Features {features.shape} do not match {labels.size} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise InvalidSpec(f"Labels must lie in [0, {self.classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def sample_count(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "ClientDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ClientDataset(self.features[indices], self.labels[indices], self.classes)


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden: Tuple[int, ...]
    classes: int
    maskable: Optional[Tuple[bool, ...]] = None


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weight: torch.Tensor   # (out, in)
    bias: torch.Tensor     # (out,)

    @property
    def fan_in(self) -> int:
        return int(self.weight.shape[1])


@dataclass(frozen=True, eq=False)
class FrozenModel:
    layers: Tuple[DenseLayer, ...]
    maskable: Tuple[bool, ...]
    head: DenseLayer
    spec: ModelSpec

    @property
    def d(self) -> int:
        """Number of maskable parameters"""
        return sum(layer.weight.numel() for layer, flag in zip(self.layers, self.maskable) if flag)

    def weight_digest(self) -> str:
        """sha256 over every backbone weight and bias"""
        digest = hashlib.sha256()
        for layer in self.layers:
            digest.update(layer.weight.detach().numpy().tobytes())
            digest.update(layer.bias.detach().numpy().tobytes())
        return digest.hexdigest()


@dataclass
class MaskedModelState:
    """Trainable scores of one client and their Adam optimizer"""
    scores: torch.Tensor
    optimizer: torch.optim.Adam = field(default=None)

    @classmethod
    def from_mask(cls, theta: ProbabilityMask, lr: float = DEFAULT_LR) -> "MaskedModelState":
        scores = torch.tensor(np.clip(theta.scores, -SCORE_LIMIT, SCORE_LIMIT), dtype=DTYPE,
                              requires_grad=True)
        optimizer = torch.optim.Adam([scores], lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
        return cls(scores, optimizer)

    @property
    def d(self) -> int:
        return int(self.scores.numel())

    @property
    def step(self) -> int:
        state = self.optimizer.state.get(self.scores, {})
        return int(state.get("step", 0))

    def moments(self):
        """First and second Adam moment vectors (zeros before the first step)"""
        state = self.optimizer.state.get(self.scores, {})
        zeros = np.zeros(self.d)
        if not state:
            return zeros, zeros.copy()
        return state["exp_avg"].detach().numpy().copy(), state["exp_avg_sq"].detach().numpy().copy()

    def to_mask(self) -> ProbabilityMask:
        return ProbabilityMask(self.scores.detach().numpy().copy())


class BernoulliStraightThrough(Function):
    """
    Samples m ~ Bern(θ) on the forward pass and passes the gradient with
    respect to m straight through to θ on the backward pass.
    """
    @staticmethod
    def forward(ctx, theta, generator):
        return torch.bernoulli(theta, generator=generator)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def _validate_spec(spec: ModelSpec):
    if spec.input_dim <= 0 or any(width <= 0 for width in spec.hidden):
        raise InvalidSpec("Layer sizes must be positive")
    if spec.classes < 2:
        raise InvalidSpec(f"Need at least 2 classes, got {spec.classes}")
    if not spec.hidden:
        raise InvalidSpec("At least one hidden layer is required")
    if spec.maskable is not None and len(spec.maskable) != len(spec.hidden):
        raise InvalidSpec("One maskable flag per hidden layer is required")


def _uniform_layer(fan_in: int, fan_out: int, generator: torch.Generator, zero_bias=False) -> DenseLayer:
    # fan-in scaled uniform: std = sqrt(2 / fan_in)
    bound = math.sqrt(6.0 / fan_in)
    weight = (torch.rand(fan_out, fan_in, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound
    if zero_bias:
        bias = torch.zeros(fan_out, dtype=DTYPE)
    else:
        bias_bound = 1.0 / math.sqrt(fan_in)
        bias = (torch.rand(fan_out, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bias_bound
    return DenseLayer(weight, bias)


def init_model(spec: ModelSpec, seed: int) -> FrozenModel:
    """
    Deterministic toy backbone plus a randomly initialised head.

    Raises:
        InvalidSpec: non-positive sizes, fewer than 2 classes or bad flags
    """
    _validate_spec(spec)
    generator = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    widths = [spec.input_dim, *spec.hidden]
    layers = tuple(_uniform_layer(widths[i], widths[i + 1], generator) for i in range(len(spec.hidden)))
    head = _uniform_layer(widths[-1], spec.classes, generator, zero_bias=True)
    maskable = tuple(spec.maskable) if spec.maskable is not None else tuple(True for _ in layers)
    model = FrozenModel(layers, maskable, head, spec)
    logger.debug(f"Initialised model {widths + [spec.classes]} with d={model.d} maskable weights")
    return model


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _split_mask(model: FrozenModel, flat: torch.Tensor) -> List[Optional[torch.Tensor]]:
    parts = []
    offset = 0
    for layer, flag in zip(model.layers, model.maskable):
        if flag:
            size = layer.weight.numel()
            parts.append(flat[offset:offset + size].view_as(layer.weight))
            offset += size
        else:
            parts.append(None)
    return parts


def _backbone(model: FrozenModel, x: torch.Tensor, flat_mask: Optional[torch.Tensor]) -> torch.Tensor:
    parts = _split_mask(model, flat_mask) if flat_mask is not None else [None] * len(model.layers)
    h = x
    for layer, part in zip(model.layers, parts):
        weight = layer.weight if part is None else layer.weight * part
        h = torch.tanh(h @ weight.T + layer.bias)
    return h


def _head(model: FrozenModel, h: torch.Tensor) -> torch.Tensor:
    return h @ model.head.weight.T + model.head.bias


def _check_batch(model: FrozenModel, features) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(features, dtype=np.float64), dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeMismatch(f"Batch shape {tuple(x.shape)} does not match input dim {model.spec.input_dim}")
    return x


def _mask_tensor(model: FrozenModel, mask) -> torch.Tensor:
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask).ravel()
    if bits.size != model.d:
        raise ShapeMismatch(f"Mask has {bits.size} entries, model has d={model.d}")
    return torch.as_tensor(bits.astype(np.float64), dtype=DTYPE)


def unmasked_forward(model: FrozenModel, features) -> np.ndarray:
    with torch.no_grad():
        return _head(model, _backbone(model, _check_batch(model, features), None)).numpy()


def masked_forward(model: FrozenModel, mask: BinaryMask, batch) -> Tuple[np.ndarray, np.ndarray]:
    """
    Forward pass with m ⊙ w_init on the maskable layers.

    Args:
        model: frozen model
        mask: binary mask of length d
        batch: (features, labels) tuple

    Returns:
        (per-example cross-entropy losses, logits)
    """
    features, labels = batch
    x = _check_batch(model, features)
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if y.numel() != x.shape[0]:
        raise ShapeMismatch(f"{x.shape[0]} examples but {y.numel()} labels")
    with torch.no_grad():
        logits = _head(model, _backbone(model, x, _mask_tensor(model, mask)))
        losses = F.cross_entropy(logits, y, reduction="none")
    return losses.numpy(), logits.numpy()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def linear_probe(model: FrozenModel, data: ClientDataset, epochs: int = 1, lr: float = 0.05,
                 batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0) -> DenseLayer:
    """
    Fit only the head on frozen, unmasked backbone features.

    Args:
        model: frozen model whose head is the starting point
        data: local training data
        epochs: passes over the data (0 leaves the head unchanged)
        lr: Adam learning rate
        batch_size: minibatch size
        seed: shuffling seed

    Returns:
        The trained head layer
    """
    if epochs <= 0 or data.sample_count == 0:
        return model.head
    generator = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        feats = _backbone(model, _check_batch(model, data.features), None)
    y = torch.as_tensor(data.labels)
    weight = model.head.weight.clone().requires_grad_(True)
    bias = model.head.bias.clone().requires_grad_(True)
    optimizer = torch.optim.Adam([weight, bias], lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    for _ in range(epochs):
        for idx in _batches(data.sample_count, batch_size, generator):
            optimizer.zero_grad()
            loss = F.cross_entropy(feats[idx] @ weight.T + bias, y[idx])
            loss.backward()
            optimizer.step()
    return DenseLayer(weight.detach(), bias.detach())


def with_head(model: FrozenModel, head: DenseLayer) -> FrozenModel:
    return replace(model, head=head)


def average_heads(heads: Sequence[DenseLayer], weights: Sequence[float]) -> DenseLayer:
    """Sample-count weighted average of client heads"""
    total = float(sum(weights))
    weight = sum(h.weight * (w / total) for h, w in zip(heads, weights))
    bias = sum(h.bias * (w / total) for h, w in zip(heads, weights))
    return DenseLayer(weight, bias)


def client_update(theta_global: ProbabilityMask, model: FrozenModel, data: ClientDataset,
                  epochs: int = 1, lr: float = DEFAULT_LR, seed: int = 0,
                  batch_size: int = DEFAULT_BATCH_SIZE,
                  state: Optional[MaskedModelState] = None) -> ProbabilityMask:
    """
    Local mask training starting from the global probability mask.

    A fresh mask is sampled for every batch; gradients reach the scores
    through the straight-through estimator and the sigmoid.

    Returns:
        The client's updated probability mask
    """
    if theta_global.d != model.d:
        raise ShapeMismatch(f"Probability mask has {theta_global.d} entries, model has d={model.d}")
    state = state or MaskedModelState.from_mask(theta_global, lr)
    generator = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    x = _check_batch(model, data.features)
    y = torch.as_tensor(data.labels)
    for _ in range(epochs):
        for idx in _batches(data.sample_count, batch_size, generator):
            state.optimizer.zero_grad()
            theta = torch.sigmoid(state.scores)
            m = BernoulliStraightThrough.apply(theta, generator)
            loss = F.cross_entropy(_head(model, _backbone(model, x[idx], m)), y[idx])
            loss.backward()
            state.optimizer.step()
            with torch.no_grad():
                state.scores.clamp_(-SCORE_LIMIT, SCORE_LIMIT)
    return state.to_mask()


def score_gradient(theta: ProbabilityMask, model: FrozenModel, batch, seed: int = 0) -> np.ndarray:
    """Straight-through gradient dL/ds for a single mask sample"""
    features, labels = batch
    generator = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    scores = torch.tensor(theta.scores, dtype=DTYPE, requires_grad=True)
    m = BernoulliStraightThrough.apply(torch.sigmoid(scores), generator)
    x = _check_batch(model, features)
    loss = F.cross_entropy(_head(model, _backbone(model, x, m)), torch.as_tensor(np.asarray(labels, dtype=np.int64)))
    loss.backward()
    return scores.grad.numpy().copy()


def evaluate(model: FrozenModel, mask: BinaryMask, data: ClientDataset) -> float:
    """
    Fraction of correct argmax predictions; ties go to the lowest class.

    Raises:
        EmptyDataset: no test examples
    """
    if data.sample_count == 0:
        raise EmptyDataset("Cannot evaluate on an empty dataset")
    _, logits = masked_forward(model, mask, (data.features, data.labels))
    predictions = np.argmax(logits, axis=1)
    return float(np.mean(predictions == data.labels))
