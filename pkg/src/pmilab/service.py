"""HTTP service exposing the two naturally long-running surfaces.

- POST /v1/embeddings implements the embedding-provider wire format this
  package's client speaks ({"model", "input"} in, {"embeddings"} out),
  backed by the deterministic stub embedder. It doubles as a reference
  provider for offline runs and integration tests.
- POST /v1/score serves PMI scores for (context, response) pairs from a
  trained checkpoint, embedding them through the configured provider.

Batch pipeline commands (synth/train/eval/compare) stay in the CLI, which
calls the library directly; see the README for the layout.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .core import DataError
from .ingest import EmbeddingClient, ProviderConfig, StubEmbedder, render_prompt
from .scorer import load_checkpoint, pmis_score_batch


class EmbedRequest(BaseModel):
    model: str
    input: list[str] = Field(min_length=1)


class EmbedResponse(BaseModel):
    model: str
    dim: int
    embeddings: list[list[float]]


class ScorePairIn(BaseModel):
    context: str
    response: str


class ScoreRequest(BaseModel):
    pairs: list[ScorePairIn] = Field(min_length=1)


class ScoreResponse(BaseModel):
    scores: list[float]


class HealthResponse(BaseModel):
    status: str
    embed_model: str
    embed_dim: int
    checkpoint: str | None


def create_app(
    embed_dim: int = 64,
    embed_model: str = "stub-gaussian-64",
    checkpoint_path: str | Path | None = None,
    provider: ProviderConfig | None = None,
) -> FastAPI:
    """Build the service app.

    The embeddings endpoint always answers with the stub embedder at
    ``embed_dim`` (the request's model name keys the hash, so different
    model names give different vectors). Scoring requires a checkpoint; its
    pair embeddings come from ``provider`` when given, else from the stub
    sized to the checkpoint's input dimension.
    """
    app = FastAPI(title="pmilab", version="0.1.0")

    params = None
    meta: dict = {}
    if checkpoint_path is not None:
        params, meta = load_checkpoint(checkpoint_path)
        if provider is None:
            provider = ProviderConfig(
                endpoint=f"stub:{params.d}",
                model_name=meta.get("embed", {}).get("model") or embed_model,
                stub_dim=params.d,
            )
    client = EmbeddingClient(provider) if provider is not None else None

    @app.get("/healthz", response_model=HealthResponse)
    def healthz():
        return HealthResponse(
            status="ok",
            embed_model=embed_model,
            embed_dim=embed_dim,
            checkpoint=str(checkpoint_path) if checkpoint_path else None,
        )

    @app.post("/v1/embeddings", response_model=EmbedResponse)
    def embeddings(req: EmbedRequest):
        stub = StubEmbedder(dim=embed_dim, model_name=req.model)
        vectors = stub.embed(req.input)
        return EmbedResponse(
            model=req.model,
            dim=embed_dim,
            embeddings=[[float(x) for x in vec] for vec in vectors],
        )

    @app.post("/v1/score", response_model=ScoreResponse)
    def score(req: ScoreRequest):
        if params is None or client is None:
            raise HTTPException(status_code=409, detail="no checkpoint loaded")
        prompts = [render_prompt(p.context, p.response) for p in req.pairs]
        try:
            X = client.embed(prompts)
        except DataError as exc:
            raise HTTPException(status_code=502, detail=str(exc)) from exc
        if X.shape[1] != params.d:
            raise HTTPException(
                status_code=409,
                detail=f"embedding dim {X.shape[1]} != checkpoint dim {params.d}",
            )
        return ScoreResponse(scores=[float(s) for s in pmis_score_batch(params, X)])

    return app
