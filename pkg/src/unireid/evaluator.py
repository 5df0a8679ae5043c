"""Retrieval evaluation: CMC and mean average precision for both tasks.

Image-to-image ranking follows the standard cross-camera protocol: gallery
items sharing the query's identity and camera are excluded before scoring, and
queries left with no positive are skipped but counted.  Text-to-image ranking
applies no camera rule; every caption of a query-split image is an independent
query.  All metric arithmetic runs in float64 with ties broken by original
gallery index, so results are stable across platforms.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import EvaluationError

CMC_KS = (1, 5, 10)


@dataclass
class RetrievalResult:
    task: str
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    ap_per_query: list[float]
    n_queries: int
    n_gallery: int
    skipped: int

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "mAP": self.mAP,
            "n_queries": self.n_queries,
            "n_gallery": self.n_gallery,
            "skipped": self.skipped,
        }


def average_precision(relevance: Sequence[int] | np.ndarray) -> float:
    """AP of a ranked binary relevance list: mean over the k-th positive of k/rank_k."""
    rel = np.asarray(relevance)
    positions = np.nonzero(rel)[0]
    if positions.size == 0:
        raise EvaluationError("average precision is undefined without a positive")
    hits = np.arange(1, positions.size + 1, dtype=np.float64)
    return float(np.mean(hits / (positions + 1.0)))


def compute_retrieval_metrics(scores: np.ndarray, query_ids: np.ndarray,
                              gallery_ids: np.ndarray, *, task: str,
                              query_cams: np.ndarray | None = None,
                              gallery_cams: np.ndarray | None = None,
                              camera_filter: bool = False) -> RetrievalResult:
    """Rank every query against the gallery and reduce to CMC / mAP.

    ``scores[q, g]`` is the similarity of query q to gallery item g.  With
    ``camera_filter`` on, same-identity same-camera gallery items are dropped
    per query; queries with no remaining positive are skipped and counted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_queries, n_gallery = scores.shape
    if camera_filter and (query_cams is None or gallery_cams is None):
        raise EvaluationError("camera filtering requires camera ids on both sides")
    aps: list[float] = []
    cmc_hits = {k: 0 for k in CMC_KS}
    skipped = 0
    for q in range(n_queries):
        # stable sort on negated scores: ties resolve to the lower gallery index
        order = np.argsort(-scores[q], kind="stable")
        if camera_filter:
            drop = (gallery_ids == query_ids[q]) & (gallery_cams == query_cams[q])
            order = order[~drop[order]]
        rel = gallery_ids[order] == query_ids[q]
        if not rel.any():
            skipped += 1
            continue
        first = int(np.nonzero(rel)[0][0])
        for k in CMC_KS:
            cmc_hits[k] += first < k
        aps.append(average_precision(rel))
    if not aps:
        raise EvaluationError("every query lost all positives after filtering")
    n_scored = len(aps)
    return RetrievalResult(
        task=task,
        rank1=cmc_hits[1] / n_scored,
        rank5=cmc_hits[5] / n_scored,
        rank10=cmc_hits[10] / n_scored,
        mAP=float(np.mean(aps)),
        ap_per_query=aps,
        n_queries=n_queries,
        n_gallery=n_gallery,
        skipped=skipped,
    )


def _embed_images(model, dataset, indices: Sequence[int], token: str,
                  batch_size: int) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = list(indices[start:start + batch_size])
            feats = model.encode_image(dataset.pixels_float(chunk))
            outs.append(getattr(feats, token))
    return torch.cat(outs)


def _embed_captions(model, captions: Sequence[list[int]], batch_size: int) -> torch.Tensor:
    from .data import pad_token_batch

    outs = []
    with torch.no_grad():
        for start in range(0, len(captions), batch_size):
            ids = pad_token_batch(captions[start:start + batch_size])
            outs.append(model.encode_text(ids).eos)
    return torch.cat(outs)


def _cosine_scores(a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    a64 = torch.nn.functional.normalize(a.double(), dim=1)
    b64 = torch.nn.functional.normalize(b.double(), dim=1)
    return (a64 @ b64.t()).numpy()


def evaluate_i2i(model, dataset, *, query_split: str = "query",
                 gallery_split: str = "gallery", batch_size: int = 64) -> RetrievalResult:
    """Cross-camera image retrieval on the image-task class embeddings."""
    was_training = model.training
    model.eval()
    try:
        q_idx = dataset.split_indices(query_split)
        g_idx = dataset.split_indices(gallery_split)
        if not q_idx or not g_idx:
            raise EvaluationError(f"empty {query_split!r} or {gallery_split!r} split")
        q = _embed_images(model, dataset, q_idx, "cls_i2i", batch_size)
        g = _embed_images(model, dataset, g_idx, "cls_i2i", batch_size)
        return compute_retrieval_metrics(
            _cosine_scores(q, g),
            dataset.labels[q_idx].numpy(), dataset.labels[g_idx].numpy(),
            task="i2i",
            query_cams=dataset.cameras[q_idx].numpy(),
            gallery_cams=dataset.cameras[g_idx].numpy(),
            camera_filter=True,
        )
    finally:
        model.train(was_training)


def evaluate_t2i(model, dataset, vocab, *, max_text_len: int = 77,
                 query_split: str = "query", gallery_split: str = "gallery",
                 batch_size: int = 64) -> RetrievalResult:
    """Caption-to-image retrieval: text EOS embeddings against text-task class embeddings."""
    was_training = model.training
    model.eval()
    try:
        g_idx = dataset.split_indices(gallery_split)
        captions, q_labels = [], []
        for i in dataset.split_indices(query_split):
            for caption in dataset.entries[i].captions:
                captions.append(vocab.encode(caption, max_text_len, train=False))
                q_labels.append(int(dataset.labels[i]))
        if not captions or not g_idx:
            raise EvaluationError("caption retrieval needs caption queries and a gallery")
        q = _embed_captions(model, captions, batch_size)
        g = _embed_images(model, dataset, g_idx, "cls_t2i", batch_size)
        return compute_retrieval_metrics(
            _cosine_scores(q, g),
            np.asarray(q_labels), dataset.labels[g_idx].numpy(),
            task="t2i",
        )
    finally:
        model.train(was_training)


CSV_COLUMNS = ("run", "task", "rank1", "rank5", "rank10", "mAP",
               "n_queries", "n_gallery", "skipped")


def write_results(results: Sequence[RetrievalResult], out_dir: str | Path,
                  run_name: str = "run") -> Path:
    """Write results.json in out_dir and append one row per task to runs.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "results.json"
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in results], fh, indent=1)
        fh.write("\n")
    csv_path = out_dir / "runs.csv"
    fresh = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_COLUMNS)
        for r in results:
            writer.writerow([run_name, r.task, r.rank1, r.rank5, r.rank10, r.mAP,
                             r.n_queries, r.n_gallery, r.skipped])
    return json_path
