"""
Supervised training of the conditioned descriptor network.

For every training pair, L positive correspondences are drawn from the dense
ground-truth map, each with N uniformly drawn negatives in image 2 outside an
exclusion radius around the true match. The descriptor losses are the
contrastive hinge pair (plus the hardest-negative term) or InfoNCE; the
distinctiveness head regresses 1/(1+m)^tau from confusion counts m on a
detached branch. Parameters are updated with Adam.
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from coam_net import CoAMNet
from diffcore import (
    Parameter, Tensor, absolute, concat, index_select, logsumexp, reduce_mean, reduce_sum, relu, reshape, sqrt,
)

logger = logging.getLogger(__name__)

# === Constants ===
LOSS_KINDS = ("hinge", "infonce")
DEFAULT_EXCLUSION_RADIUS = 3
MAX_NEGATIVE_DRAWS = 1000

Seed = Union[int, Sequence[int]]


class InsufficientCorrespondencesError(ValueError):
    """Fewer usable ground-truth correspondences than requested."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite {term} loss at step {step}: {value}")
        self.term = term
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    margin: float = 1.0
    positives_per_pair: int = 512
    negatives_per_positive: int = 512
    hardest_count: int = 3
    distinctiveness_exponent: float = 0.25
    nce_temperature: float = 20.0
    learning_rate: float = 1e-4
    batch_size: int = 16
    loss_kind: str = "hinge"
    exclusion_radius: int = DEFAULT_EXCLUSION_RADIUS
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    log_wall_clock: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.positives_per_pair < 1 or self.negatives_per_positive < 1:
            raise ValueError("positives_per_pair and negatives_per_positive must be >= 1")
        if not 0 <= self.hardest_count <= self.negatives_per_positive:
            raise ValueError(f"hardest_count must lie in [0, {self.negatives_per_positive}], got {self.hardest_count}")
        if self.distinctiveness_exponent <= 0 or self.nce_temperature <= 0:
            raise ValueError("distinctiveness_exponent and nce_temperature must be > 0")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.exclusion_radius < 0:
            raise ValueError(f"exclusion_radius must be >= 0, got {self.exclusion_radius}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")


@dataclass
class TrainingSample:
    """One supervised pair: images plus the dense map from image-1 pixels to image-2 (x, y)."""

    image1: np.ndarray
    image2: np.ndarray
    gt_map: np.ndarray  # (H1, W1, 2)
    valid: np.ndarray   # (H1, W1) bool


@dataclass
class SampledCorrespondences:
    """Integer (x, y) pixel locations; negatives are (L, N, 2) in image 2."""

    positives1: np.ndarray
    positives2: np.ndarray
    negatives: np.ndarray
    shape1: Tuple[int, int]
    shape2: Tuple[int, int]

    def __len__(self) -> int:
        return len(self.positives1)

    @property
    def index1(self) -> np.ndarray:
        return self.positives1[:, 1] * self.shape1[1] + self.positives1[:, 0]

    @property
    def index2(self) -> np.ndarray:
        return self.positives2[:, 1] * self.shape2[1] + self.positives2[:, 0]

    @property
    def negative_index(self) -> np.ndarray:
        return self.negatives[..., 1] * self.shape2[1] + self.negatives[..., 0]


class HingeTerms(NamedTuple):
    positive: Tensor            # L_p
    negative: Tensor            # L_n
    negative_distances: Tensor  # (L, N)
    positive_distances: Tensor  # (L,)


@dataclass
class StepLosses:
    """Per-step losses; `negative` already includes the hardest-negative term."""

    step: int
    positive: float = 0.0
    negative: float = 0.0
    distinctiveness: float = 0.0
    nce: Optional[float] = None
    seconds: float = 0.0

    def log_line(self) -> str:
        if self.nce is not None:
            return f"{self.step} {self.nce:.6f} {self.distinctiveness:.6f} {self.seconds:.3f}"
        return f"{self.step} {self.positive:.6f} {self.negative:.6f} {self.distinctiveness:.6f} {self.seconds:.3f}"


# === Sampling ===
def sample_correspondences(gt_map: np.ndarray, valid: np.ndarray, positives: int, negatives: int,
                           exclusion_radius: int = DEFAULT_EXCLUSION_RADIUS, rng_seed: Seed = 0,
                           shape2: Optional[Tuple[int, int]] = None) -> SampledCorrespondences:
    """Draw positives from the valid ground truth and uniform negatives outside the exclusion window."""
    gt_map = np.asarray(gt_map, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    h1, w1 = valid.shape
    if gt_map.shape != (h1, w1, 2):
        raise ValueError(f"gt_map must have shape {(h1, w1, 2)}, got {gt_map.shape}")
    h2, w2 = shape2 if shape2 is not None else (h1, w1)
    if h2 <= 2 * exclusion_radius + 1 and w2 <= 2 * exclusion_radius + 1:
        raise ValueError(f"image 2 of size {h2}x{w2} has no pixel outside a radius-{exclusion_radius} window")

    targets = np.rint(gt_map).astype(np.int64)
    usable = valid & np.all(np.isfinite(gt_map), axis=-1)
    usable &= (targets[..., 0] >= 0) & (targets[..., 0] < w2) & (targets[..., 1] >= 0) & (targets[..., 1] < h2)
    candidates = np.flatnonzero(usable)
    if len(candidates) < positives:
        raise InsufficientCorrespondencesError(
            f"need {positives} valid correspondences, ground truth has {len(candidates)}"
        )

    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(candidates, size=positives, replace=False)
    ys, xs = np.divmod(chosen, w1)
    positives1 = np.stack([xs, ys], axis=1)
    positives2 = targets[ys, xs]

    drawn = np.stack([rng.integers(0, w2, size=(positives, negatives)),
                      rng.integers(0, h2, size=(positives, negatives))], axis=-1)
    for _ in range(MAX_NEGATIVE_DRAWS):
        too_close = np.abs(drawn - positives2[:, None, :]).max(axis=-1) <= exclusion_radius
        count = int(too_close.sum())
        if not count:
            break
        drawn[too_close] = np.stack([rng.integers(0, w2, size=count), rng.integers(0, h2, size=count)], axis=-1)
    else:
        raise RuntimeError(f"could not draw negatives outside radius {exclusion_radius}")

    return SampledCorrespondences(positives1=positives1, positives2=positives2, negatives=drawn,
                                  shape1=(h1, w1), shape2=(h2, w2))


# === Losses ===
def descriptor_distance(d1, d2) -> float:
    return float(np.linalg.norm(np.asarray(d1, dtype=np.float64) - np.asarray(d2, dtype=np.float64)))


def _rows(descriptors) -> Tensor:
    """Descriptor rows (H*W, D) from a row tensor or an (H, W, D) map."""
    if not isinstance(descriptors, Tensor):
        descriptors = Tensor(np.asarray(descriptors))
    if descriptors.ndim == 3:
        descriptors = reshape(descriptors, (-1, descriptors.shape[-1]))
    return descriptors


def _distances(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    diff = a - b
    return sqrt(reduce_sum(diff * diff, axis=axis))


def _gather(D1, D2, samples: SampledCorrespondences):
    rows1, rows2 = _rows(D1), _rows(D2)
    count, per = samples.negatives.shape[:2]
    anchors = index_select(rows1, samples.index1)
    matches = index_select(rows2, samples.index2)
    negatives = reshape(index_select(rows2, samples.negative_index.reshape(-1)), (count, per, rows2.shape[1]))
    return anchors, matches, negatives


def hinge_loss(D1, D2, samples: SampledCorrespondences, margin: float = 1.0) -> HingeTerms:
    """L_p = mean positive distance; L_n = mean max(0, M + c_x - d(x, y_neg)), differentiating through c_x."""
    anchors, matches, negatives = _gather(D1, D2, samples)
    count = len(samples)
    positive_distances = _distances(anchors, matches)
    negative_distances = _distances(reshape(anchors, (count, 1, anchors.shape[1])), negatives)
    violations = relu((reshape(positive_distances, (count, 1)) + margin) - negative_distances)
    return HingeTerms(
        positive=reduce_mean(positive_distances),
        negative=reduce_mean(violations),
        negative_distances=negative_distances,
        positive_distances=positive_distances,
    )


def hardest_negatives(distances, count: int) -> np.ndarray:
    """Indices of the `count` smallest distances along the last axis, ties broken by index."""
    distances = np.asarray(distances)
    if count > distances.shape[-1]:
        raise ValueError(f"asked for {count} hardest negatives out of {distances.shape[-1]}")
    return np.argsort(distances, axis=-1, kind="stable")[..., :count]


def hardest_negative_loss(terms: HingeTerms, count: int, margin: float = 1.0) -> Tensor:
    """Hinge term averaged over the L*count hardest (closest) negatives."""
    distances = terms.negative_distances
    rows, per = distances.shape
    if count == 0:
        return Tensor(np.zeros((), dtype=distances.dtype))
    hardest = hardest_negatives(distances.data, count)
    flat = (np.arange(rows)[:, None] * per + hardest).reshape(-1)
    selected = reshape(index_select(reshape(distances, (rows * per,)), flat), (rows, count))
    return reduce_mean(relu((reshape(terms.positive_distances, (rows, 1)) + margin) - selected))


def confusion_counts(negative_distances, margin: float = 1.0) -> np.ndarray:
    """m_x: negatives closer than the margin, per positive."""
    return (np.asarray(negative_distances) < margin).sum(axis=-1)


def distinctiveness_target(counts, exponent: float = 0.25) -> np.ndarray:
    return np.power(1.0 + np.asarray(counts, dtype=np.float64), -exponent)


def distinctiveness_loss(scores: Tensor, counts, exponent: float = 0.25) -> Tensor:
    """Mean |r(x) - 1/(1+m_x)^tau| over the positives."""
    if not isinstance(scores, Tensor):
        scores = Tensor(np.asarray(scores, dtype=np.float64))
    target = Tensor(distinctiveness_target(counts, exponent).astype(scores.dtype).reshape(scores.shape))
    return reduce_mean(absolute(scores - target))


def infonce_from_scores(positive_scores, negative_scores, temperature: float = 20.0) -> Tensor:
    """-mean log softmax of the positive among [positive, negatives], scores scaled by the temperature."""
    if not isinstance(positive_scores, Tensor):
        positive_scores = Tensor(np.asarray(positive_scores, dtype=np.float64))
    if not isinstance(negative_scores, Tensor):
        negative_scores = Tensor(np.asarray(negative_scores, dtype=np.float64))
    count = positive_scores.shape[0]
    logits = concat([reshape(positive_scores, (count, 1)), negative_scores], axis=1) * temperature
    shifted = logits - reshape(positive_scores * temperature, (count, 1))
    return reduce_mean(logsumexp(shifted, axis=1))


def infonce_loss(D1, D2, samples: SampledCorrespondences, temperature: float = 20.0) -> Tensor:
    anchors, matches, negatives = _gather(D1, D2, samples)
    count = len(samples)
    positive_scores = reduce_sum(anchors * matches, axis=1)
    negative_scores = reduce_sum(reshape(anchors, (count, 1, anchors.shape[1])) * negatives, axis=2)
    return infonce_from_scores(positive_scores, negative_scores, temperature)


def negative_distances(D1, D2, samples: SampledCorrespondences) -> np.ndarray:
    """Anchor-to-negative distances on plain arrays (no graph)."""
    rows1 = _rows(D1).data
    rows2 = _rows(D2).data
    anchors = rows1[samples.index1]
    return np.linalg.norm(anchors[:, None, :] - rows2[samples.negative_index], axis=-1)


# === Optimizer ===
class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if getattr(p, "trainable", True)]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


# === Training loop ===
class Trainer:
    """Owns the network, the Adam state and the step counter."""

    def __init__(self, net: CoAMNet, config: Optional[TrainConfig] = None):
        self.net = net
        self.config = config or TrainConfig()
        self.optimizer = Adam(net.parameters(), self.config.learning_rate, self.config.betas, self.config.adam_eps)
        self.step_index = 0
        self.history: List[StepLosses] = []

    def compute_losses(self, sample: TrainingSample, sampling_seed: Seed) -> Dict[str, Tensor]:
        """Loss tensors for one pair: descriptor terms plus the detached distinctiveness term."""
        cfg = self.config
        out = self.net.forward_pair(sample.image1, sample.image2)
        samples = sample_correspondences(
            sample.gt_map, sample.valid, cfg.positives_per_pair, cfg.negatives_per_positive,
            cfg.exclusion_radius, sampling_seed, shape2=(out.height, out.width),
        )
        terms: Dict[str, Tensor] = {}
        if cfg.loss_kind == "hinge":
            hinge = hinge_loss(out.D1, out.D2, samples, cfg.margin)
            terms["positive"] = hinge.positive
            terms["negative"] = hinge.negative
            terms["hardest"] = hardest_negative_loss(hinge, cfg.hardest_count, cfg.margin)
            distances = hinge.negative_distances.data
        else:
            terms["nce"] = infonce_loss(out.D1, out.D2, samples, cfg.nce_temperature)
            distances = negative_distances(out.D1, out.D2, samples)
        counts = confusion_counts(distances, cfg.margin)
        scores = index_select(out.r1, samples.index1)
        terms["distinctiveness"] = distinctiveness_loss(scores, counts, cfg.distinctiveness_exponent)
        return terms

    def train_step(self, batch: Sequence[TrainingSample]) -> StepLosses:
        """One Adam update over the batch; gradients are averaged over pairs."""
        if not batch:
            raise ValueError("empty training batch")
        started = time.perf_counter()
        self.net.zero_grad()
        totals: Dict[str, float] = {}
        scale = 1.0 / len(batch)
        for i, sample in enumerate(batch):
            terms = self.compute_losses(sample, (self.config.seed, self.step_index, i))
            for name, value in terms.items():
                number = value.item()
                if not np.isfinite(number):
                    raise NonFiniteLossError(name, self.step_index, number)
                totals[name] = totals.get(name, 0.0) + number * scale
            objective = None
            for value in terms.values():
                objective = value if objective is None else objective + value
            (objective * scale).backward()
        self.optimizer.step()

        seconds = time.perf_counter() - started if self.config.log_wall_clock else 0.0
        losses = StepLosses(step=self.step_index, distinctiveness=totals["distinctiveness"], seconds=seconds)
        if "nce" in totals:
            losses.nce = totals["nce"]
        else:
            losses.positive = totals["positive"]
            losses.negative = totals["negative"] + totals["hardest"]
        self.step_index += 1
        self.history.append(losses)
        return losses

    def batch_indices(self, pool_size: int) -> np.ndarray:
        rng = np.random.default_rng((self.config.seed, self.step_index, pool_size))
        return rng.choice(pool_size, size=min(self.config.batch_size, pool_size), replace=False)

    def fit(self, samples: Sequence[TrainingSample], steps: int, log_path: Optional[str] = None,
            log_every: int = 10) -> List[StepLosses]:
        """Run `steps` updates on batches drawn from `samples`, appending one loss line per step."""
        if steps and not samples:
            raise InsufficientCorrespondencesError("no training pairs")
        log_file = open(log_path, "a") if log_path else None
        try:
            results = []
            for _ in range(steps):
                batch = [samples[i] for i in self.batch_indices(len(samples))]
                losses = self.train_step(batch)
                results.append(losses)
                if log_file:
                    log_file.write(losses.log_line() + "\n")
                    log_file.flush()
                if losses.step % log_every == 0:
                    logger.info(f"step {losses.step}: {losses.log_line()}")
            return results
        finally:
            if log_file:
                log_file.close()

    def save_checkpoint(self, path: str) -> str:
        saved = self.net.save(path)
        logger.info(f"Saved checkpoint after {self.step_index} steps to {saved}")
        return saved
