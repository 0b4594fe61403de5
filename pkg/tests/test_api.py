"""
Tests for the BNER EBP service.
"""

import pytest
from fastapi.testclient import TestClient

from app.main import app
from tests.conftest import DATA_DIR


client = TestClient(app)


def _files(*names):
    """Multipart entries for bundled data files, as (field, file stem) pairs."""
    return {
        field: (f"{stem}.csv", (DATA_DIR / f"{stem}.csv").read_bytes(), "text/csv")
        for field, stem in names
    }


def test_health_check():
    """Test the health check endpoint."""
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_get_targets():
    """Built-in targets come back in their canonical order."""
    response = client.get("/targets")
    assert response.status_code == 200
    data = response.json()
    names = [t["name"] for t in data["targets"]]
    assert names == ["mean1", "mean2", "mean_of_ratios", "ratio_of_means"]
    kinds = {t["name"]: t["kind"] for t in data["targets"]}
    assert kinds["ratio_of_means"] == "nonadditive"
    assert data["transforms"] == ["identity", "log"]


def test_fit_upload():
    """Fit the bundled sample."""
    response = client.post("/fit", files=_files(("data", "sample")), data={"transform": "log"})
    assert response.status_code == 200
    data = response.json()
    assert data["iterations"] >= 1
    names = [p["parameter"] for p in data["parameters"]]
    assert names[-6:] == ["sigma2_u1", "sigma2_u2", "rho_u", "sigma2_e1", "sigma2_e2", "rho_e"]
    assert "X-Request-Duration" in response.headers


def test_predict_every_listed_domain():
    """Unsampled domains get EBPs and null direct estimates."""
    files = _files(("data", "sample"), ("aux", "aux"), ("patterns", "patterns"))
    response = client.post("/predict", files=files, data={"L": "20", "seed": "4"})
    assert response.status_code == 200
    data = response.json()
    assert (data["L"], data["seed"], data["transform"]) == (20, 4, "log")
    domains = {row["domain_id"]: row for row in data["domains"]}
    assert len(domains) == 14
    unsampled = domains["D13"]
    assert unsampled["n_d"] == 0
    assert unsampled["values"]["dir1"] is None
    assert unsampled["values"]["ebp1"] > 0
    assert 0 < domains["D01"]["values"]["Rebp"] < 1

    again = client.post("/predict", files=files, data={"L": "20", "seed": "4"})
    assert again.json() == data


def test_predict_selected_targets():
    files = _files(("data", "sample"), ("aux", "aux"), ("patterns", "patterns"))
    response = client.post("/predict", files=files, data={"L": "5", "targets": "ratio_of_means"})
    assert response.status_code == 200
    values = response.json()["domains"][0]["values"]
    assert "Rebp" in values and "ebp1" not in values


def test_bad_csv_is_a_client_error():
    """Library failures map to 400 with the error type."""
    bad = "domain_id,x1_1,x2_1,z1,z2\na,1,1,-1,2\n"
    response = client.post("/fit", files={"data": ("data.csv", bad.encode(), "text/csv")})
    assert response.status_code == 400
    body = response.json()
    assert body["error_type"] == "DataError"
    assert "non-positive z1" in body["detail"]


def test_unknown_transform_is_rejected():
    response = client.post("/fit", files=_files(("data", "sample")), data={"transform": "sqrt"})
    assert response.status_code == 400


@pytest.mark.parametrize("L", ["0", "20000"])
def test_predict_validates_replicates(L):
    files = _files(("data", "sample"), ("aux", "aux"), ("patterns", "patterns"))
    response = client.post("/predict", files=files, data={"L": L})
    assert response.status_code == 422


def test_predict_missing_files():
    response = client.post("/predict", files=_files(("data", "sample")))
    assert response.status_code == 422
