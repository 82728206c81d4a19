import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from api import app

FIXTURES = Path(__file__).parent / "fixtures"
client = TestClient(app)


def model(name):
    return json.loads((FIXTURES / name).read_text())


def test_health():
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_solve():
    response = client.post("/solve", json={"model": model("terminal_wealth_vanishes.json")})
    assert response.status_code == 200
    data = response.json()
    assert data["L0"] == pytest.approx(1.5)
    assert data["value0"] == pytest.approx(3.0)
    assert data["strategy_at_root"]["pi"] == [1.0]
    assert len(data["levels"]) == 2


def test_solve_rejects_bad_model():
    broken = model("merton.json")
    broken["p"] = 1.5
    assert client.post("/solve", json={"model": broken}).status_code == 422
    assert client.post("/solve", json={"model": model("merton.json"), "tolerances": {"tol_nonsense": 1}}).status_code == 422


def test_verify():
    response = client.post("/verify", json={"model": model("tree_two_period.json")})
    assert response.status_code == 200
    data = response.json()
    assert data["schema"] == "bp-verify/1"
    assert data["passed"] is True


def test_verify_rejects_malformed_candidate():
    response = client.post("/verify", json={"model": model("tree_two_period.json"), "candidate": {"levels": "x"}})
    assert response.status_code == 422


def test_g_eval():
    response = client.post("/g-eval", json={"model": model("merton.json"), "y": [1.0]})
    assert response.status_code == 200
    data = response.json()
    assert data["g"] == pytest.approx(0.09)
    assert data["maximizer"][0] == pytest.approx(5.0)
    assert data["G"] == pytest.approx(0.0, abs=1e-12)
    assert data["starts"] == 5
    assert data["start_spread"] == pytest.approx(0.0, abs=1e-12)
