"""Dense retrieval over L2-normalized code embeddings.

The search index is a dense n x d matrix; scoring is an exact
matrix-vector product (cosine similarity of unit vectors). Candidate
selection reads the (possibly stale) index; gradient-carrying scores are
recomputed live by the trainer.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch


class RetrievalError(ValueError):
    pass


@dataclass
class RetrievedExemplar:
    pair: object  # CodeCommentPair
    index_score: float
    live_score: object = None  # filled by the trainer (torch scalar)


class SearchIndex:
    def __init__(self, matrix, row_ids, pairs, step=0):
        if len(row_ids) != len(set(row_ids)):
            raise RetrievalError("duplicate sample ids in index")
        if matrix.shape[0] != len(row_ids):
            raise RetrievalError("matrix rows and row_ids length differ")
        self.matrix = matrix
        self.row_ids = list(row_ids)
        self.pairs = list(pairs)
        self.id_to_row = {sid: i for i, sid in enumerate(self.row_ids)}
        self.staleness = np.full(len(row_ids), step, dtype=np.int64)

    @property
    def size(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]


def normalize(v):
    """v / ||v||_2 as a differentiable torch op; rejects the zero vector."""
    norm = torch.linalg.vector_norm(v)
    if norm.item() == 0.0:
        raise RetrievalError("cannot normalize an all-zero embedding")
    return v / norm


def _embed_rows(encoder, pairs, batch_size=64):
    was_training = encoder.training
    encoder.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            batch = pairs[start:start + batch_size]
            emb = encoder.encode_batch([p.code_tokens for p in batch])
            emb = emb / torch.linalg.vector_norm(emb, dim=1, keepdim=True)
            rows.append(emb.cpu().numpy())
    if was_training:
        encoder.train()
    return np.concatenate(rows, axis=0)


def build_index(encoder, base, step=0, batch_size=64):
    if not base:
        raise RetrievalError("retrieval base is empty")
    matrix = _embed_rows(encoder, base, batch_size)
    return SearchIndex(matrix, [p.id for p in base], base, step=step)


def score_all(index, query):
    """Cosine scores against every row; query must be unit-normalized."""
    q = query.detach().cpu().numpy() if isinstance(query, torch.Tensor) else np.asarray(query)
    if q.shape[0] != index.dim:
        raise RetrievalError(f"query dim {q.shape[0]} != index dim {index.dim}")
    return index.matrix @ q


def retrieve_topk(index, query, k, exclude_id=None):
    """Top-k rows by index score, ties broken by ascending row position.

    Returns min(k, available) exemplars; `exclude_id` never appears.
    """
    if k < 1:
        raise RetrievalError("k must be >= 1")
    scores = score_all(index, query)
    rows = np.arange(index.size)
    if exclude_id is not None and exclude_id in index.id_to_row:
        rows = rows[rows != index.id_to_row[exclude_id]]
    if rows.size == 0:
        raise RetrievalError("effective retrieval base is empty")
    order = rows[np.lexsort((rows, -scores[rows]))]
    return [
        RetrievedExemplar(pair=index.pairs[r], index_score=float(scores[r]))
        for r in order[:k]
    ]


def refresh_rows(index, encoder, ids, step=0, batch_size=64):
    """Re-embed the named rows in place with the current encoder."""
    ids = list(ids)
    if not ids:
        return index
    try:
        rows = [index.id_to_row[sid] for sid in ids]
    except KeyError as exc:
        raise RetrievalError(f"unknown sample id {exc.args[0]!r}") from exc
    fresh = _embed_rows(encoder, [index.pairs[r] for r in rows], batch_size)
    for r, emb in zip(rows, fresh):
        index.matrix[r] = emb
        index.staleness[r] = step
    return index


def refresh_full(index, encoder, step=0, batch_size=64):
    """Rebuild every row, preserving row order."""
    index.matrix = _embed_rows(encoder, index.pairs, batch_size)
    index.staleness[:] = step
    return index


def save_index(index, path, encoder_hash=""):
    np.savez(path, matrix=index.matrix, staleness=index.staleness)
    meta = {"row_ids": index.row_ids, "encoder_hash": encoder_hash}
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f)


def load_index(path, pairs):
    data = np.load(str(path) if str(path).endswith(".npz") else str(path) + ".npz")
    with open(str(path).removesuffix(".npz") + ".meta.json", encoding="utf-8") as f:
        meta = json.load(f)
    by_id = {p.id: p for p in pairs}
    ordered = [by_id[sid] for sid in meta["row_ids"]]
    index = SearchIndex(data["matrix"], meta["row_ids"], ordered)
    index.staleness = data["staleness"]
    return index, meta["encoder_hash"]


def index_hash(index):
    h = hashlib.sha256()
    h.update(index.matrix.tobytes())
    for sid in index.row_ids:
        h.update(sid.encode())
    return h.hexdigest()
