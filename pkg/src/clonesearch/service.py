"""HTTP search service over an opened index.

Wraps a SearchSession (centroids in memory, inverted lists on disk) so the
one-time cost of opening the index is shared across clients. The CLI's
``query --server`` mode talks to this API.

Endpoints:
  GET  /health  {status, dim, nlist, vectors, metric}
  GET  /stats   indexing statistics as recorded at build time
  POST /search  {texts, k, k_global?, threshold, nprobe?} -> ranked hits
"""

from __future__ import annotations

import json
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .errors import CloneSearchError, UsageError
from .pipeline import STATS_FILE, QueryConfig, SearchSession
from .results import Location

MAX_TEXTS_PER_REQUEST = 1024


class SearchRequest(BaseModel):
    texts: list[str] = Field(min_length=1, max_length=MAX_TEXTS_PER_REQUEST)
    k: int = Field(default=100, ge=1)
    k_global: int | None = Field(default=None, ge=1)
    threshold: float = Field(default=0.95, ge=-1.0, le=1.01)
    nprobe: int | None = Field(default=None, ge=1)


class LocationModel(BaseModel):
    path: str
    start_line: int
    end_line: int


class HitModel(BaseModel):
    rank: int
    score: float
    query_index: int
    corpus: LocationModel
    duplicate_locations: list[LocationModel]


class SearchResponse(BaseModel):
    mode: str  # "global" or "per_query"
    queries: int
    qps: float
    hits: list[HitModel]


class HealthResponse(BaseModel):
    status: str
    dim: int
    nlist: int
    vectors: int
    metric: str
    embedder: str


def create_app(index_dir: Path, endpoint: str | None = None) -> FastAPI:
    index_dir = Path(index_dir)
    state: dict = {}

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        state["session"] = SearchSession(index_dir, endpoint=endpoint)
        try:
            yield
        finally:
            state.pop("session").close()

    app = FastAPI(title="clonesearch", version="0.1.0", lifespan=lifespan)

    def session() -> SearchSession:
        if "session" not in state:
            raise HTTPException(status_code=503, detail="index not opened yet")
        return state["session"]

    @app.get("/health", response_model=HealthResponse)
    def health():
        s = session()
        m = s.index.manifest
        return HealthResponse(
            status="ok",
            dim=m.dim,
            nlist=m.nlist,
            vectors=m.count,
            metric=m.metric,
            embedder=s.embedder_config.kind,
        )

    @app.get("/stats")
    def stats():
        stats_path = index_dir / STATS_FILE
        if not stats_path.exists():
            raise HTTPException(status_code=404, detail="no stats recorded for this index")
        return json.loads(stats_path.read_text())

    @app.post("/search", response_model=SearchResponse)
    def search(req: SearchRequest):
        s = session()
        for i, text in enumerate(req.texts):
            if not text.strip():
                raise HTTPException(status_code=400, detail=f"texts[{i}] is empty")
        cfg = QueryConfig(
            k=req.k,
            k_global=req.k_global,
            threshold=req.threshold,
            nprobe=req.nprobe,
        )
        # service queries carry no file locations; index into texts instead
        locations = {
            i: Location(path=f"request:texts[{i}]", start_line=1, end_line=1)
            for i in range(len(req.texts))
        }
        try:
            report = s.run(req.texts, locations, cfg)
        except UsageError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except CloneSearchError as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc

        hits = [
            HitModel(
                rank=rec.rank,
                score=rec.score,
                query_index=_query_index(rec.query.path),
                corpus=LocationModel(**vars(rec.corpus)),
                duplicate_locations=[LocationModel(**vars(l)) for l in rec.duplicate_locations],
            )
            for rec in report.records
        ]
        return SearchResponse(
            mode="global" if req.k_global is not None else "per_query",
            queries=report.queries,
            qps=report.qps,
            hits=hits,
        )

    return app


def _query_index(path: str) -> int:
    # inverse of the synthetic "request:texts[i]" location path
    return int(path.rsplit("[", 1)[1].rstrip("]"))
