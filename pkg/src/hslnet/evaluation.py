"""Hierarchical scoring, candidate ranking, nDCG@k and the level x granularity ablation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import ModelConfig, TrainConfig, replace
from .data import Dataset, ObjectFeatureSet, TokenSequence, Vocabulary, pad_features, pad_tokens, tokenize
from .encoders import MultiLevelRepr
from .model import AblationSpec, HSLModel
from .numcore import Tensor
from .similarity import GRANULARITIES, IMAGE, OBJECT

log = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 15, 20, 25, 30)


@dataclass
class RankedList:
    query_id: str
    items: list[tuple[str, float]]

    @property
    def image_ids(self) -> list[str]:
        return [i for i, _ in self.items]


def table2_specs(levels: int = 2) -> list[AblationSpec]:
    """Each single level and all levels, crossed with object / image / both granularities."""
    level_sets = [(l,) for l in range(1, levels + 1)]
    if levels > 1:
        level_sets.append(tuple(range(1, levels + 1)))
    grans = [(OBJECT,), (IMAGE,), GRANULARITIES]
    return dedupe_specs(AblationSpec(ls, g) for ls in level_sets for g in grans)


def dedupe_specs(specs) -> list[AblationSpec]:
    seen, out = set(), []
    for s in specs:
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def hierarchical_score(image: ObjectFeatureSet, query: TokenSequence, model: HSLModel,
                       spec: AblationSpec | None = None, lambdas=None) -> float:
    """Level-weighted sum of the enabled granularity similarities for one pair."""
    with nc.no_grad():
        scores = model.score_matrix(model.encode_images([image]), model.encode_queries([query]), spec, lambdas)
    return float(scores[0, 0])


class Ranker:
    """Encodes each image once, on its own, then ranks candidate pools against queries.

    Images are encoded one at a time so a candidate's features never depend
    on which other images were loaded alongside it.
    """

    def __init__(self, model: HSLModel, images: dict[str, ObjectFeatureSet]):
        self.model = model
        self.encoded: dict[str, list[np.ndarray]] = {}
        with nc.no_grad():
            for iid in sorted(images):
                feats, mask = pad_features([images[iid]])
                self.encoded[iid] = [x.data[0] for x in model.image_encoder(feats, mask).levels]

    def _stack(self, pool: list[str]) -> MultiLevelRepr:
        n_max = max(self.encoded[i][0].shape[0] for i in pool)
        mask = np.zeros((len(pool), n_max), dtype=bool)
        levels = [np.zeros((len(pool), n_max, self.model.cfg.d_c)) for _ in range(self.model.cfg.levels)]
        for b, iid in enumerate(pool):
            for l, x in enumerate(self.encoded[iid]):
                levels[l][b, :x.shape[0]] = x
            mask[b, :self.encoded[iid][0].shape[0]] = True
        return MultiLevelRepr([Tensor(x) for x in levels], mask)

    def encode_query(self, query: TokenSequence) -> MultiLevelRepr:
        ids, mask = pad_tokens([query])
        with nc.no_grad():
            return self.model.text_encoder(ids, mask)

    def scores(self, query: TokenSequence, pool: list[str], spec=None, lambdas=None) -> np.ndarray:
        missing = [i for i in pool if i not in self.encoded]
        if missing:
            raise KeyError(f"unknown image_id in pool: {missing[0]}")
        with nc.no_grad():
            return self.model.score_matrix(self._stack(pool), self.encode_query(query), spec, lambdas)[:, 0]

    def rank(self, query: TokenSequence, pool: list[str], spec=None, lambdas=None) -> RankedList:
        if not pool:
            raise ValueError(f"empty candidate pool for {query.query_id}")
        return order_by_score(query.query_id, pool, self.scores(query, pool, spec, lambdas))


def order_by_score(query_id: str, pool: list[str], scores) -> RankedList:
    """Descending score, ties broken by ascending image id."""
    pairs = sorted(zip(pool, (float(s) for s in scores)), key=lambda p: (-p[1], p[0]))
    return RankedList(query_id, pairs)


def rank_candidates(query: TokenSequence, pool: list[str], images: dict[str, ObjectFeatureSet],
                    model: HSLModel, spec: AblationSpec | None = None, lambdas=None) -> RankedList:
    missing = [i for i in pool if i not in images]
    if missing:
        raise KeyError(f"unknown image_id in pool: {missing[0]}")
    return Ranker(model, {i: images[i] for i in pool}).rank(query, pool, spec, lambdas)


def ndcg_at_k(ranked: RankedList | list[str], relevance: dict[str, int], k: int) -> float:
    """Linear-gain nDCG@k; 0.0 when the pool holds no relevant image."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if any(g < 0 for g in relevance.values()):
        raise ValueError("negative relevance grade")
    order = ranked.image_ids if isinstance(ranked, RankedList) else list(ranked)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    gains = np.array([relevance.get(i, 0) for i in order[:k]], dtype=np.float64)
    dcg = float(np.sum(gains * discounts[:len(gains)]))
    ideal = np.sort(np.array(list(relevance.values()), dtype=np.float64))[::-1][:k]
    idcg = float(np.sum(ideal * discounts[:len(ideal)]))
    return dcg / idcg if idcg > 0 else 0.0


@dataclass
class EvalResult:
    spec: AblationSpec
    per_query: dict[str, dict[int, float]]
    ranked: dict[str, RankedList]

    def mean(self, k: int) -> float:
        return float(np.mean([v[k] for v in self.per_query.values()])) if self.per_query else 0.0


def evaluate(model: HSLModel, vocab: Vocabulary, dataset: Dataset, spec: AblationSpec | None = None,
             ks=DEFAULT_KS, lambdas=None, ranker: Ranker | None = None) -> EvalResult:
    spec = spec or AblationSpec.full(model.cfg.levels)
    if ranker is None:
        needed = sorted({i for pool in dataset.eval_pools.values() for i in pool})
        ranker = Ranker(model, {i: dataset.images[i] for i in needed})
    per_query, ranked = {}, {}
    for qid in sorted(dataset.eval_pools):
        pool = sorted(dataset.eval_pools[qid])
        query = tokenize(dataset.eval_queries[qid], vocab, model.cfg.max_tokens, qid)
        rl = ranker.rank(query, pool, spec, lambdas)
        ranked[qid] = rl
        per_query[qid] = {k: ndcg_at_k(rl, dataset.eval_pools[qid], k) for k in ks}
    return EvalResult(spec, per_query, ranked)


@dataclass
class AblationRow:
    spec: AblationSpec
    ndcg: dict[int, float]


def _sub_config(cfg: ModelConfig, spec: AblationSpec) -> ModelConfig:
    top = spec.levels[-1]
    return replace(cfg, levels=top, lambdas=cfg.lambdas[:top])


def run_ablation(dataset: Dataset, specs, mode: str = "mask", checkpoint=None,
                 model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                 ks=DEFAULT_KS) -> list[AblationRow]:
    """Mean nDCG@k per spec.

    ``mask`` scores one trained model (``checkpoint``) with each spec's
    restriction. ``retrain`` trains a fresh model per spec, limited to the
    spec's deepest level and optimizing only the spec's loss terms.
    """
    from .training import train

    specs = dedupe_specs(specs)
    rows = []
    if mode == "mask":
        if checkpoint is None:
            raise ValueError("mask mode needs a checkpoint")
        model = checkpoint.build_model()
        for s in specs:
            s.check(model.cfg.levels)
        needed = sorted({i for pool in dataset.eval_pools.values() for i in pool})
        ranker = Ranker(model, {i: dataset.images[i] for i in needed})
        for s in specs:
            res = evaluate(model, checkpoint.vocab, dataset, s, ks, ranker=ranker)
            rows.append(AblationRow(s, {k: res.mean(k) for k in ks}))
    elif mode == "retrain":
        if model_cfg is None or train_cfg is None:
            raise ValueError("retrain mode needs model and training configs")
        for s in specs:
            s.check(model_cfg.levels)
            result = train(dataset, _sub_config(model_cfg, s), train_cfg, spec=s)
            res = evaluate(result.model, result.vocab, dataset, s, ks)
            rows.append(AblationRow(s, {k: res.mean(k) for k in ks}))
            log.info("ablation %s nDCG@%d %.4f", s.name, ks[0], rows[-1].ndcg[ks[0]])
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")
    return rows


def write_report_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["spec", "levels", "granularities", "k", "ndcg"])
        for row in rows:
            for k, v in row.ndcg.items():
                w.writerow([row.spec.name, "+".join(map(str, row.spec.levels)),
                            "+".join(row.spec.granularities), k, repr(v)])


def write_ranked_tsv(ranked: list[RankedList], path_or_file) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", encoding="utf-8") if own else path_or_file
    try:
        fh.write("query_id\trank\timage_id\tscore\n")
        for rl in ranked:
            for r, (iid, score) in enumerate(rl.items, 1):
                fh.write(f"{rl.query_id}\t{r}\t{iid}\t{score!r}\n")
    finally:
        if own:
            fh.close()
