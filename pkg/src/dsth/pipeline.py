"""End-to-end training and evaluation on a dataset split."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .anchors import AnchorModel, build_anchor_model
from .data import Dataset, DatasetSplit
from .evaluation import EvalReport, LabelRelevance, evaluate
from .hashing import HashModel, encode, learn_projection
from .optimizer import DsthConfig, FitResult, fit
from .retrieval import PackedCodeIndex, pack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnchorParams:
    k: int = 300
    s: int = 5
    sigma: float | None = None
    max_iter: int = 100


@dataclass
class TrainedModel:
    hash_model: HashModel
    anchor_model: AnchorModel
    fit_result: FitResult
    timings: dict = field(default_factory=dict)


def sub_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the run seed."""
    tag = int.from_bytes(stage.encode(), "little") % (2**32)
    return int(np.random.SeedSequence([int(seed) % 2**63, tag]).generate_state(1)[0])


def build_anchors(x, anchors: AnchorParams, seed: int) -> AnchorModel:
    """Anchor model for training features; ``k`` is capped at the sample count."""
    k = min(anchors.k, x.shape[1])
    return build_anchor_model(
        x, k=k, s=min(anchors.s, k), sigma=anchors.sigma,
        max_iter=anchors.max_iter, seed=sub_seed(seed, "anchors"),
    )


def train(
    x,
    y,
    cfg: DsthConfig,
    anchors: AnchorParams = AnchorParams(),
    eta: float = 100.0,
    anchor_model: AnchorModel | None = None,
) -> TrainedModel:
    """Anchor graph, discrete codes and hash projection for training features.

    A prebuilt ``anchor_model`` (covering exactly the columns of ``x``) skips
    the clustering stage.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    timings = {}
    t0 = time.perf_counter()
    if anchor_model is None:
        anchor_model = build_anchors(x, anchors, cfg.seed)
    timings["anchors"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    result = fit(x, y, anchor_model, cfg)
    timings["fit"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    hash_model = learn_projection(x, 2.0 * result.codes - 1.0, eta)
    timings["projection"] = time.perf_counter() - t0
    log.info("trained %s in %.3fs (%d sweeps)", cfg.variant.value, sum(timings.values()), len(result.trace))
    return TrainedModel(hash_model, anchor_model, result, timings)


def build_index(model: HashModel, x, ids) -> PackedCodeIndex:
    bits = encode(model, np.asarray(x, dtype=np.float64))
    return PackedCodeIndex.from_bits(bits.T, ids=ids)


def run_split(
    data: Dataset,
    split: DatasetSplit,
    cfg: DsthConfig,
    anchors: AnchorParams = AnchorParams(),
    eta: float = 100.0,
    R: int = 100,
    scopes=(),
) -> tuple[TrainedModel, EvalReport]:
    """Train on the split's training ids, index the database, score the queries."""
    tr = split.training_ids
    model = train(data.visual[:, tr], data.text[:, tr], cfg, anchors, eta)
    index = build_index(model.hash_model, data.visual[:, split.database_ids], split.database_ids)
    queries = index_words(model.hash_model, data.visual[:, split.query_ids])
    relevance = LabelRelevance(data.labels.subset(split.query_ids), data.labels)
    config = {"dsth": {**asdict(cfg), "variant": cfg.variant.value}, "anchors": asdict(anchors), "eta": eta}
    report = evaluate(queries, index, relevance, R=R, scopes=scopes, config=config)
    return model, report


def index_words(model: HashModel, x) -> np.ndarray:
    """Packed codes (``n x words``) for the columns of ``x``."""
    return pack(encode(model, np.asarray(x, dtype=np.float64)).T)
