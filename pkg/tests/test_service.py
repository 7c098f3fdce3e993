"""FastAPI search service endpoints."""

import pytest
from fastapi.testclient import TestClient

from clonesearch.service import create_app

from conftest import FUNC_F, FUNC_G


@pytest.fixture
def client(tiny_index):
    app = create_app(tiny_index)
    with TestClient(app) as client:
        yield client


class TestHealth:
    def test_health_reports_index_shape(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"
        assert body["dim"] == 64
        assert body["nlist"] == 4
        assert body["vectors"] == 4
        assert body["metric"] == "L2-on-unit-vectors"

    def test_stats_served(self, client):
        body = client.get("/stats").json()
        assert body["index"]["functions_parsed"] == 5
        assert body["index"]["embeddings"] == 4


class TestSearch:
    def test_identical_text_full_score(self, client):
        resp = client.post(
            "/search",
            json={"texts": [FUNC_F], "k": 5, "threshold": 0.5, "nprobe": 4},
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["mode"] == "per_query"
        assert body["queries"] == 1
        top = body["hits"][0]
        assert top["score"] == 1.0
        assert top["query_index"] == 0
        assert len(top["duplicate_locations"]) == 2

    def test_global_mode_sorted(self, client):
        resp = client.post(
            "/search",
            json={
                "texts": [FUNC_F, FUNC_G],
                "k": 4,
                "k_global": 5,
                "threshold": -1.0,
                "nprobe": 4,
            },
        )
        body = resp.json()
        assert body["mode"] == "global"
        scores = [h["score"] for h in body["hits"]]
        assert scores == sorted(scores, reverse=True)
        assert len(body["hits"]) == 5

    def test_empty_text_rejected(self, client):
        resp = client.post("/search", json={"texts": ["   "], "k": 5})
        assert resp.status_code == 400
        assert "texts[0]" in resp.json()["detail"]

    def test_no_texts_rejected(self, client):
        resp = client.post("/search", json={"texts": []})
        assert resp.status_code == 422

    def test_oversized_nprobe_clamped_to_nlist(self, client):
        resp = client.post(
            "/search", json={"texts": [FUNC_F], "nprobe": 99, "threshold": -1.0}
        )
        assert resp.status_code == 200
        assert resp.json()["hits"]  # behaves as an exhaustive probe

    def test_zero_nprobe_rejected(self, client):
        resp = client.post("/search", json={"texts": [FUNC_F], "nprobe": 0})
        assert resp.status_code == 422
