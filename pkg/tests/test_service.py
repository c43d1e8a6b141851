import numpy as np
from fastapi.testclient import TestClient

from gapfill.service.app import app

client = TestClient(app, raise_server_exceptions=False)


def test_health():
    resp = client.get("/health")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok" and body["version"]


class TestMaskEndpoint:
    def test_random_mask_counts(self):
        resp = client.post("/mask", json={"length": 96, "rate": 0.5, "seed": 3})
        mask = resp.json()["mask"]
        assert len(mask) == 96 and mask.count(0) == 48

    def test_continuous_block(self):
        resp = client.post("/mask", json={"length": 10, "rate": 0.3,
                                          "pattern": "continuous", "seed": 1})
        mask = resp.json()["mask"]
        zeros = [i for i, b in enumerate(mask) if b == 0]
        assert len(zeros) == 3 and zeros[-1] - zeros[0] == 2

    def test_rate_out_of_range_is_422(self):
        resp = client.post("/mask", json={"length": 10, "rate": 1.5})
        assert resp.status_code == 422
        assert resp.json()["kind"] == "data"

    def test_determinism(self):
        a = client.post("/mask", json={"length": 64, "rate": 0.4, "seed": 9}).json()
        b = client.post("/mask", json={"length": 64, "rate": 0.4, "seed": 9}).json()
        assert a == b


class TestImputeEndpoint:
    def test_imputes_nulls(self, tiny_workspace):
        values = [[float(np.sin(t / 3.0))] for t in range(24)]
        values[4][0] = None
        values[11][0] = None
        resp = client.post("/impute", json={
            "checkpoint": str(tiny_workspace["ckpt"]),
            "values": values,
        })
        assert resp.status_code == 200
        body = resp.json()
        assert len(body["imputed"]) == 24
        assert body["observed_mask"][4][0] == 0
        assert all(np.isfinite(row[0]) for row in body["imputed"])
        # observed points come back exactly
        assert body["imputed"][0][0] == values[0][0]

    def test_missing_checkpoint_is_error(self):
        resp = client.post("/impute", json={
            "checkpoint": "/nonexistent.ckpt",
            "values": [[1.0]] * 24,
        })
        assert resp.status_code in (400, 422)
        assert resp.json()["kind"] in ("usage", "data")

    def test_too_short_series_is_data_error(self, tiny_workspace):
        resp = client.post("/impute", json={
            "checkpoint": str(tiny_workspace["ckpt"]),
            "values": [[1.0]] * 5,
        })
        assert resp.status_code == 422
        assert resp.json()["kind"] == "data"


class TestTrainAndBench:
    def test_train_then_bench_round_trip(self, tiny_workspace, tmp_path):
        bench_cfg = tmp_path / "bench.cfg"
        bench_cfg.write_text(
            f"data = {tiny_workspace['csv']}\n"
            f"checkpoint = {tiny_workspace['ckpt']}\n"
            "models = engine, median, last\n"
            "rates = 0.2, 0.5\n"
            "patterns = random\n"
            "window_length = 24\n"
            "split_seed = 0\n"
        )
        resp = client.post("/bench", json={"config_path": str(bench_cfg),
                                           "out_dir": str(tmp_path / "rep")})
        assert resp.status_code == 200
        body = resp.json()
        assert len(body["cells"]) == 3 * 2
        assert set(body["averages"]) == {"engine", "median", "last"}

    def test_train_validation_error_names_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("data = x.csv\nnotakey = 1\n")
        resp = client.post("/train", json={"config_path": str(cfg), "out": str(tmp_path / "m")})
        assert resp.status_code == 400
        assert "notakey" in resp.json()["detail"]

    def test_train_requires_some_config(self, tmp_path):
        resp = client.post("/train", json={"out": str(tmp_path / "m")})
        assert resp.status_code == 400
        assert resp.json()["kind"] == "usage"


class TestForecastEndpoint:
    def test_forecast_after_conversion(self, tiny_workspace, tmp_path):
        from gapfill.service import core
        from gapfill.service import schemas as S

        fck = tmp_path / "fore.ckpt"
        core.finetune(S.FinetuneRequest(
            base=str(tiny_workspace["ckpt"]), data=[str(tiny_workspace["csv"])],
            out=str(fck), task="forecast", horizon=1,
            overrides={"epochs": 1, "lr": 0.002, "batch_size": 8, "seed": 2},
        ))
        values = [float(np.sin(t / 3.0)) for t in range(30)]
        resp = client.post("/forecast", json={"checkpoint": str(fck), "values": values})
        assert resp.status_code == 200
        out = resp.json()["forecast"]
        assert len(out) == 6  # horizon 1 x patch length 6
        assert all(np.isfinite(x) for x in out)

    def test_wrong_horizon_rejected(self, tiny_workspace, tmp_path):
        from gapfill.service import core
        from gapfill.service import schemas as S

        fck = tmp_path / "fore2.ckpt"
        core.finetune(S.FinetuneRequest(
            base=str(tiny_workspace["ckpt"]), data=[str(tiny_workspace["csv"])],
            out=str(fck), task="forecast", horizon=1,
            overrides={"epochs": 0, "seed": 2},
        ))
        resp = client.post("/forecast", json={"checkpoint": str(fck),
                                              "values": [0.0] * 24, "horizon": 3})
        assert resp.status_code == 400
